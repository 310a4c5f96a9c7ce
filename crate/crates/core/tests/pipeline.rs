use proptest::prelude::*;

use sumi::adapt::{evaluate, run_adaptation, AdapterKind};
use sumi::datagen::{
    corrupt, make_stream, make_task, train_source, Corruption, CorruptionKind, SeverityLevel, StreamSpec, TaskSpec,
    TrainOptions,
};
use sumi::harness::{emit_report, run_experiment, ExperimentConfig};
use sumi::model::{BatchGraph, Entropies, Model, ModelSpec, MultimodalSample};
use sumi::objective::{total_loss, AdaptConfig, AdaptMode};
use sumi::selection::SelectionMask;

fn loss_of(model: &Model, batch: &[MultimodalSample]) -> f64 {
    let mut bg = BatchGraph::new(model, batch).unwrap();
    let eval = bg.graph.forward(&bg.bindings(model.params())).unwrap();
    let entropies: Vec<Entropies> = bg.outputs(&eval).iter().map(|o| o.entropies).collect();
    let mask = SelectionMask::all(batch.len());
    let config = AdaptConfig::for_classes(model.spec().classes);
    let loss = total_loss(&mut bg.graph, &bg.nodes, &entropies, &mask, &config, 1, 4, AdaptMode::Weak);
    bg.graph.set_output(loss.total);
    bg.graph.evaluate(&bg.bindings(model.params())).unwrap().item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn duplicating_a_batch_doubles_the_loss(seed in 0u64..1000, n in 1usize..6, xs in prop::collection::vec(-3.0f64..3.0, 32 * 6)) {
        let model = Model::new(ModelSpec::default(), seed).unwrap();
        let batch: Vec<MultimodalSample> = (0..n)
            .map(|i| MultimodalSample::new(xs[i * 32..i * 32 + 16].to_vec(), xs[i * 32 + 16..i * 32 + 32].to_vec()))
            .collect();
        let doubled: Vec<MultimodalSample> = batch.iter().chain(&batch).cloned().collect();
        let (one, two) = (loss_of(&model, &batch), loss_of(&model, &doubled));
        prop_assert!((two - 2.0 * one).abs() <= 1e-10 * one.abs().max(1.0), "{one} {two}");
    }

    #[test]
    fn corruption_keeps_shape(seed in 0u64..1000, kind in 0usize..7, severity in 1u8..=5, xs in prop::collection::vec(-3.0f64..3.0, 16 + 9)) {
        let kind = CorruptionKind::ALL[kind];
        let severity = if kind == CorruptionKind::None { 0 } else { severity };
        let sample = MultimodalSample::new(xs[..16].to_vec(), xs[16..].to_vec());
        let out = corrupt(&sample, Corruption::new(kind, severity).unwrap(), 1.0, seed);
        prop_assert_eq!(out.modalities[0].len(), 16);
        prop_assert_eq!(out.modalities[1].len(), 9);
        prop_assert!(out.modalities.iter().flatten().all(|v| v.is_finite()));
    }
}

#[test]
fn streams_keep_labels() {
    let task = TaskSpec {
        n_train: 200,
        n_test: 300,
        ..TaskSpec::default()
    };
    let (_, test) = make_task(&task).unwrap();
    let stream = make_stream(&test, &StreamSpec::half_strong(SeverityLevel::Mixed, 7), 1.0).unwrap();
    let mut want: Vec<usize> = test.labels();
    let mut got: Vec<usize> = stream.labels();
    want.sort_unstable();
    got.sort_unstable();
    assert_eq!(want, got);
}

#[test]
fn trace_respects_selection_bounds() {
    let task = TaskSpec::default();
    let (train, test) = make_task(&task).unwrap();
    let model = train_source(&task.model_spec(), &train, &test, &TrainOptions::default())
        .unwrap()
        .model;
    let stream = make_stream(&test, &StreamSpec::half_strong(SeverityLevel::Fixed(5), 1), 1.0).unwrap();
    let config = AdaptConfig {
        learning_rate: 1e-2,
        ..AdaptConfig::for_classes(8)
    };
    for kind in [AdapterKind::SUMI, AdapterKind::GatedEntropyMin] {
        let mut m = model.clone();
        let run = run_adaptation(&mut m, &stream, kind, &config, AdaptMode::Wild).unwrap();
        assert_eq!(run.trace.len(), run.iter);
        for (i, step) in run.trace.iter().enumerate() {
            assert_eq!(step.t, i + 1);
            assert!(step.selected <= step.candidates && step.candidates <= step.batch_size);
        }
        if kind == AdapterKind::SUMI {
            assert_eq!(run.trace.last().unwrap().smoothing, Some(1.0));
        }
        assert_eq!(run.samples, stream.len());
    }
}

#[test]
fn strong_shift_hurts_more_than_weak() {
    let (mut weak, mut strong) = (0.0, 0.0);
    for seed in 0..5 {
        let task = TaskSpec {
            seed,
            ..TaskSpec::default()
        };
        let (train, test) = make_task(&task).unwrap();
        let opts = TrainOptions {
            seed,
            ..TrainOptions::default()
        };
        let model = train_source(&task.model_spec(), &train, &test, &opts).unwrap().model;
        let w = make_stream(&test, &StreamSpec::with_strong_ratio(0.0, SeverityLevel::Fixed(5), seed), 1.0).unwrap();
        let s = make_stream(&test, &StreamSpec::with_strong_ratio(1.0, SeverityLevel::Fixed(5), seed), 1.0).unwrap();
        weak += evaluate(&model, &w).unwrap() / 5.0;
        strong += evaluate(&model, &s).unwrap() / 5.0;
    }
    assert!(strong < weak, "strong {strong:.4} weak {weak:.4}");
}

#[test]
fn untrained_source_is_near_chance() {
    let task = TaskSpec::default();
    let (train, test) = make_task(&task).unwrap();
    let opts = TrainOptions {
        epochs: 0,
        min_clean_accuracy: 0.0,
        ..TrainOptions::default()
    };
    let acc = train_source(&task.model_spec(), &train, &test, &opts).unwrap().clean_accuracy;
    assert!((acc - 1.0 / 8.0).abs() <= 0.1, "{acc}");
}

#[test]
fn report_has_a_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        seeds: vec![0, 1],
        adapters: vec![AdapterKind::Source, AdapterKind::SUMI, AdapterKind::EntropyMin],
        ..ExperimentConfig::default()
    };
    cfg.task.n_train = 800;
    cfg.task.n_test = 200;
    cfg.train.min_clean_accuracy = 0.0;
    cfg.streams.push("strong=0.2@3".parse().unwrap());
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.cells.len(), 2 * 3 * 2);
    for agg in &report.summary {
        assert_eq!(agg.n, 2);
        assert!(agg.std.is_some());
    }
    let (_, csv) = emit_report(&report, dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 1 + 12);
}
