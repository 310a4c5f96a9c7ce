use super::*;
use crate::datagen::LabeledSample;
use crate::model::ModelSpec;
use crate::numkit::ParamRole;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_batch(n: usize, seed: u64) -> Vec<MultimodalSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |k: usize| (0..k).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 2.0 * z }).collect::<Vec<f64>>();
    (0..n).map(|_| MultimodalSample::new(v(16), v(16))).collect()
}

fn stream(n: usize, seed: u64) -> Dataset {
    let samples = random_batch(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, s)| LabeledSample {
            sample: s.with_domain(if i % 2 == 0 { "a" } else { "b" }),
            label: i % 8,
        })
        .collect();
    Dataset {
        classes: 8,
        input_dims: [16, 16],
        samples,
    }
}

fn model() -> Model {
    Model::new(ModelSpec::default(), 11).unwrap()
}

fn fast_config() -> AdaptConfig {
    AdaptConfig {
        learning_rate: 1e-2,
        gamma_m: 3.0,
        ..AdaptConfig::default()
    }
}

#[test]
fn adapter_names_round_trip() {
    let mut kinds = AdapterKind::standard();
    kinds.extend(AdapterKind::ablation());
    for k in kinds {
        let s = k.to_string();
        assert_eq!(s.parse::<AdapterKind>().unwrap(), k, "{s}");
        let json = serde_json::to_string(&k).unwrap();
        assert_eq!(serde_json::from_str::<AdapterKind>(&json).unwrap(), k);
    }
    assert_eq!(AdapterKind::SUMI.to_string(), "sumi");
    assert_eq!(AdapterKind::Sumi(Components::NONE).to_string(), "sumi[none]");
    assert!("sumi[foo]".parse::<AdapterKind>().is_err());
    assert!("tent".parse::<AdapterKind>().is_err());
}

#[test]
fn frozen_parameters_never_change() {
    for kind in AdapterKind::standard() {
        let mut m = model();
        let before = m.params().snapshot_bits(ParamRole::Frozen);
        let report = run_adaptation(&mut m, &stream(64, 1), kind, &fast_config(), AdaptMode::Weak).unwrap();
        assert_eq!(m.params().snapshot_bits(ParamRole::Frozen), before, "{kind}");
        if kind != AdapterKind::Source {
            assert!(report.updates > 0, "{kind}");
            assert_ne!(m.params().snapshot_bits(ParamRole::Adaptable), model().params().snapshot_bits(ParamRole::Adaptable));
        }
    }
}

#[test]
fn empty_selection_is_a_no_op() {
    let config = AdaptConfig {
        gamma_m: 0.0,
        ..fast_config()
    };
    let data = stream(48, 2);
    let mut m = model();
    let adapted = run_adaptation(&mut m, &data, AdapterKind::SUMI, &config, AdaptMode::Wild).unwrap();
    assert_eq!(adapted.updates, 0);
    assert!(adapted.trace.iter().all(|s| s.selected == 0 && s.loss == 0.0 && !s.updated));
    assert_eq!(m.params().snapshot_bits(ParamRole::Adaptable), model().params().snapshot_bits(ParamRole::Adaptable));
    let source = run_adaptation(&mut model(), &data, AdapterKind::Source, &config, AdaptMode::Wild).unwrap();
    assert_eq!(adapted.correct, source.correct);
    for (a, b) in adapted.trace.iter().zip(&source.trace) {
        assert_eq!(a.predictions, b.predictions);
    }
}

#[test]
fn runs_are_deterministic() {
    let data = stream(80, 3);
    let run = || {
        let mut m = model();
        let r = run_adaptation(&mut m, &data, AdapterKind::SUMI, &fast_config(), AdaptMode::Wild).unwrap();
        (serde_json::to_string(&r).unwrap(), m.params().snapshot_bits(ParamRole::Adaptable))
    };
    assert_eq!(run(), run());
}

#[test]
fn ungated_ablation_matches_gated_baseline() {
    let data = stream(96, 4);
    let mut a = model();
    let mut b = model();
    let ra = run_adaptation(&mut a, &data, AdapterKind::Sumi(Components::NONE), &fast_config(), AdaptMode::Weak).unwrap();
    let rb = run_adaptation(&mut b, &data, AdapterKind::GatedEntropyMin, &fast_config(), AdaptMode::Weak).unwrap();
    assert_eq!(a.params().snapshot_bits(ParamRole::Adaptable), b.params().snapshot_bits(ParamRole::Adaptable));
    assert_eq!(ra.trace, rb.trace);
}

/// The confidence weights are recomputed each step, so the tracked quantity is
/// the batch entropy rather than the weighted loss.
#[test]
fn repeated_batch_entropy_decreases() {
    let batch = random_batch(16, 5);
    let mean_entropy = |m: &Model| {
        let outs = m.forward_batch(&batch).unwrap();
        outs.iter().map(|o| o.entropies.multimodal).sum::<f64>() / outs.len() as f64
    };
    for kind in [AdapterKind::EntropyMin, AdapterKind::GatedEntropyMin] {
        let mut m = model();
        let start = mean_entropy(&m);
        let mut adapter = Adapter::new(kind, &fast_config(), 20, AdaptMode::Weak).unwrap();
        for t in 1..=20 {
            adapter.step(&mut m, &batch, t).unwrap();
        }
        let end = mean_entropy(&m);
        assert!(end < start, "{kind}: {start} -> {end}");
    }
}

#[test]
fn iteration_bounds_are_checked() {
    let batch = random_batch(4, 6);
    let mut m = model();
    let mut adapter = Adapter::new(AdapterKind::SUMI, &fast_config(), 3, AdaptMode::Weak).unwrap();
    assert!(matches!(adapter.step(&mut m, &batch, 0), Err(AdaptError::IterationOutOfRange { .. })));
    assert!(matches!(adapter.step(&mut m, &batch, 4), Err(AdaptError::IterationOutOfRange { .. })));
    assert!(matches!(adapter.step(&mut m, &[], 1), Err(AdaptError::EmptyBatch)));
    let short = AdaptConfig {
        iter: Some(2),
        ..fast_config()
    };
    let err = run_adaptation(&mut m, &stream(64, 1), AdapterKind::SUMI, &short, AdaptMode::Weak).unwrap_err();
    assert!(matches!(err, AdaptError::HorizonTooShort { batches: 4, iter: 2 }));
}

#[test]
fn wild_mode_drops_divergence_after_t0() {
    let data = stream(128, 7);
    let mut m = model();
    let r = run_adaptation(&mut m, &data, AdapterKind::SUMI, &fast_config(), AdaptMode::Wild).unwrap();
    assert_eq!(r.iter, 8);
    for s in &r.trace {
        let want = if s.t < 4 { 5.0 } else { 0.0 };
        assert_eq!(s.lambda_eff, want, "t = {}", s.t);
        if want == 0.0 {
            assert_eq!(s.mis_loss, 0.0);
        }
    }
    assert_eq!(r.trace.last().unwrap().smoothing, Some(1.0));
}

#[test]
fn report_bookkeeping() {
    let data = stream(40, 8);
    let r = run_adaptation(&mut model(), &data, AdapterKind::SUMI, &fast_config(), AdaptMode::Weak).unwrap();
    assert_eq!(r.samples, 40);
    assert_eq!(r.trace.len(), 3);
    assert_eq!(r.trace[2].batch_size, 8);
    assert_eq!(r.per_domain.values().map(|d| d.samples).sum::<usize>(), 40);
    assert_eq!(r.per_domain.values().map(|d| d.correct).sum::<usize>(), r.correct);
    let sel: usize = r.trace.iter().map(|s| s.selected).sum();
    assert_eq!(r.per_domain.values().map(|d| d.selected).sum::<usize>(), sel);
    assert_eq!(r.trace.last().unwrap().running_accuracy, Some(r.accuracy));
    for s in &r.trace {
        assert!(s.selected <= s.candidates && s.candidates <= s.batch_size);
    }
}
