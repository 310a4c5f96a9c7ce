//! Synthetic two-modality classification data, supervised source training,
//! feature-space corruptions and mixed test streams.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{evaluate, Adam};
use crate::model::{BatchGraph, Model, ModelError, ModelSpec, MultimodalSample};
use crate::numkit::{NodeId, NumError, Tensor};
use crate::objective::AdaptMode;

/// Noise std per severity level, in units of the task's within-class noise scale.
pub const NOISE_PER_SEVERITY: f64 = 0.4;
pub const MAX_SEVERITY: u8 = 5;

pub const COLUMNAR_MAGIC: &str = "#sumi-columnar";
pub const COLUMNAR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task spec: {0}")]
    InvalidTask(String),
    #[error("invalid corruption: {0}")]
    InvalidCorruption(String),
    #[error("invalid stream spec: {0}")]
    InvalidStream(String),
    #[error("source model reached clean accuracy {accuracy:.4} after {epochs} epochs, below the floor {floor:.2} (final train loss {train_loss:.4})")]
    AccuracyFloor {
        accuracy: f64,
        floor: f64,
        epochs: usize,
        train_loss: f64,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("columnar file: {0}")]
    Columnar(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        DataError::Columnar(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub classes: usize,
    pub input_dims: [usize; 2],
    /// Std of the class-center coordinates, before the per-modality weight.
    pub separation: f64,
    /// Std of the within-class Gaussian noise.
    pub noise_scale: f64,
    /// Per-modality multiplier on `separation`.
    pub informativeness: [f64; 2],
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            classes: 8,
            input_dims: [16, 16],
            separation: 0.7,
            noise_scale: 1.0,
            informativeness: [1.0, 1.0],
            n_train: 4000,
            n_test: 2000,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::InvalidTask(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_dims.contains(&0) {
            return Err(DataError::InvalidTask("feature dims must be >= 1".into()));
        }
        if self.informativeness.iter().any(|w| !(*w > 0.0)) {
            return Err(DataError::InvalidTask("informativeness weights must be > 0".into()));
        }
        if !(self.separation > 0.0) || !(self.noise_scale > 0.0) {
            return Err(DataError::InvalidTask("separation and noise scale must be > 0".into()));
        }
        Ok(())
    }

    /// Model spec whose input layer and class count match this task.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dims: self.input_dims,
            classes: self.classes,
            ..ModelSpec::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample: MultimodalSample,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub classes: usize,
    pub input_dims: [usize; 2],
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self) -> Vec<MultimodalSample> {
        self.samples.iter().map(|s| s.sample.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Gaussian class clusters in both modalities, labels assigned round-robin
/// and shuffled. Returns `(train, test)`.
pub fn make_task(spec: &TaskSpec) -> Result<(Dataset, Dataset), DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: [Vec<Vec<f64>>; 2] = std::array::from_fn(|m| {
        let std = spec.separation * spec.informativeness[m];
        (0..spec.classes)
            .map(|_| gaussian(&mut rng, spec.input_dims[m], std))
            .collect()
    });
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Dataset {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        labels.shuffle(rng);
        let samples = labels
            .into_iter()
            .map(|label| {
                let x: [Vec<f64>; 2] = std::array::from_fn(|m| {
                    let noise = gaussian(rng, spec.input_dims[m], spec.noise_scale);
                    centers[m][label].iter().zip(noise).map(|(c, e)| c + e).collect()
                });
                LabeledSample {
                    sample: MultimodalSample {
                        modalities: x,
                        domain: None,
                    },
                    label,
                }
            })
            .collect();
        Dataset {
            classes: spec.classes,
            input_dims: spec.input_dims,
            samples,
        }
    };
    let train = draw(spec.n_train, &mut rng);
    let test = draw(spec.n_test, &mut rng);
    Ok((train, test))
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Model initialization and minibatch order.
    pub seed: u64,
    /// Clean test accuracy below this is an error.
    pub min_clean_accuracy: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 12,
            learning_rate: 3e-3,
            batch_size: 32,
            seed: 0,
            min_clean_accuracy: 0.9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedSource {
    pub model: Model,
    pub clean_accuracy: f64,
    pub final_train_loss: f64,
}

/// Supervised cross-entropy training of every parameter on the fused prediction.
pub fn train_source(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainedSource, DataError> {
    if train.is_empty() || test.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut model = Model::new(spec.clone(), opts.seed)?;
    let mut trainable = model.params().all_adaptable();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0f7a_1e);
    let mut opt = Adam::new(opts.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_loss = f64::NAN;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch: Vec<MultimodalSample> = chunk.iter().map(|&i| train.samples[i].sample.clone()).collect();
            let mut bg = BatchGraph::new(&model, &batch)?;
            let g = &mut bg.graph;
            let terms: Vec<NodeId> = bg
                .nodes
                .iter()
                .zip(chunk)
                .map(|(n, &i)| {
                    let lp = g.log(n.p_m);
                    let mut pick = vec![0.0; spec.classes];
                    pick[train.samples[i].label] = -1.0 / chunk.len() as f64;
                    let pick = g.constant(Tensor::vector(pick));
                    g.dot(lp, pick)
                })
                .collect();
            let loss = g.add_all(&terms).expect("non-empty chunk");
            g.set_output(loss);
            let grads = {
                let eval = bg.graph.forward(&bg.bindings(&trainable))?;
                epoch_loss += eval.value(loss).item() * chunk.len() as f64;
                bg.graph.gradient(&eval, &trainable)?
            };
            opt.step(&mut trainable, &grads)?;
        }
        last_loss = epoch_loss / train.len() as f64;
    }
    for (name, p) in trainable.iter() {
        model.params_mut().set(name, p.value.clone())?;
    }
    let clean_accuracy = evaluate(&model, test)?;
    if clean_accuracy < opts.min_clean_accuracy {
        return Err(DataError::AccuracyFloor {
            accuracy: clean_accuracy,
            floor: opts.min_clean_accuracy,
            epochs: opts.epochs,
            train_loss: last_loss,
        });
    }
    Ok(TrainedSource {
        model,
        clean_accuracy,
        final_train_loss: last_loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    None,
    NoiseU1,
    NoiseU2,
    Both,
    MissU1,
    MissU2,
    Mix,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::None,
        CorruptionKind::NoiseU1,
        CorruptionKind::NoiseU2,
        CorruptionKind::Both,
        CorruptionKind::MissU1,
        CorruptionKind::MissU2,
        CorruptionKind::Mix,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::None => "none",
            CorruptionKind::NoiseU1 => "noise-u1",
            CorruptionKind::NoiseU2 => "noise-u2",
            CorruptionKind::Both => "both",
            CorruptionKind::MissU1 => "miss-u1",
            CorruptionKind::MissU2 => "miss-u2",
            CorruptionKind::Mix => "mix",
        }
    }

    /// Several modalities corrupted, or one missing.
    pub fn is_strong(&self) -> bool {
        matches!(
            self,
            CorruptionKind::Both | CorruptionKind::MissU1 | CorruptionKind::MissU2 | CorruptionKind::Mix
        )
    }

    fn uses_severity(&self) -> bool {
        !matches!(self, CorruptionKind::MissU1 | CorruptionKind::MissU2)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::InvalidCorruption(format!("unknown kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl Corruption {
    pub const NONE: Corruption = Corruption {
        kind: CorruptionKind::None,
        severity: 0,
    };

    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self, DataError> {
        if severity > MAX_SEVERITY {
            return Err(DataError::InvalidCorruption(format!("severity {severity} > {MAX_SEVERITY}")));
        }
        match kind {
            CorruptionKind::None if severity != 0 => Err(DataError::InvalidCorruption(
                "kind none takes severity 0".into(),
            )),
            k if k != CorruptionKind::None && k.uses_severity() && severity == 0 => Err(
                DataError::InvalidCorruption(format!("{k} needs a severity in 1..={MAX_SEVERITY}")),
            ),
            _ => Ok(Corruption { kind, severity }),
        }
    }
}

/// Applies one corruption. Labels and dimensions are untouched.
pub fn corrupt(sample: &MultimodalSample, corruption: Corruption, noise_scale: f64, seed: u64) -> MultimodalSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = NOISE_PER_SEVERITY * corruption.severity as f64 * noise_scale;
    let mut out = sample.clone();
    let noisy = |x: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
        for v in x.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += std * z;
        }
    };
    let missing = |x: &mut Vec<f64>| x.iter_mut().for_each(|v| *v = 0.0);
    let [u1, u2] = &mut out.modalities;
    match corruption.kind {
        CorruptionKind::None => {}
        CorruptionKind::NoiseU1 => noisy(u1, &mut rng),
        CorruptionKind::NoiseU2 => noisy(u2, &mut rng),
        CorruptionKind::Both => {
            noisy(u1, &mut rng);
            noisy(u2, &mut rng);
        }
        CorruptionKind::MissU1 => missing(u1),
        CorruptionKind::MissU2 => missing(u2),
        CorruptionKind::Mix => {
            if rng.random_bool(0.5) {
                missing(u1);
                noisy(u2, &mut rng);
            } else {
                missing(u2);
                noisy(u1, &mut rng);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeverityLevel {
    Fixed(u8),
    /// Uniform over `1..=5`, drawn per sample.
    Mixed,
}

/// Deserializes from the full object or from the compact text form accepted by `FromStr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StreamSpecRepr")]
pub struct StreamSpec {
    /// Number of test samples drawn into the stream; `None` uses the whole test set.
    pub total: Option<usize>,
    pub ratios: BTreeMap<CorruptionKind, f64>,
    pub severity: SeverityLevel,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StreamSpecRepr {
    Text(String),
    Full {
        #[serde(default)]
        total: Option<usize>,
        ratios: BTreeMap<CorruptionKind, f64>,
        severity: SeverityLevel,
        #[serde(default)]
        seed: u64,
    },
}

impl TryFrom<StreamSpecRepr> for StreamSpec {
    type Error = DataError;

    fn try_from(repr: StreamSpecRepr) -> Result<Self, DataError> {
        match repr {
            StreamSpecRepr::Text(s) => s.parse(),
            StreamSpecRepr::Full {
                total,
                ratios,
                severity,
                seed,
            } => {
                let spec = StreamSpec {
                    total,
                    ratios,
                    severity,
                    seed,
                };
                spec.validate()?;
                Ok(spec)
            }
        }
    }
}

impl StreamSpec {
    pub fn new(ratios: &[(CorruptionKind, f64)], severity: SeverityLevel, seed: u64) -> Self {
        StreamSpec {
            total: None,
            ratios: ratios.iter().copied().collect(),
            severity,
            seed,
        }
    }

    /// Half weak (single-modality noise), half strong (both / missing / mix).
    pub fn half_strong(severity: SeverityLevel, seed: u64) -> Self {
        StreamSpec::with_strong_ratio(0.5, severity, seed)
    }

    /// Weak kinds share `1 - strong`, strong kinds share `strong`, evenly.
    pub fn with_strong_ratio(strong: f64, severity: SeverityLevel, seed: u64) -> Self {
        let weak = 1.0 - strong;
        StreamSpec::new(
            &[
                (CorruptionKind::NoiseU1, weak / 2.0),
                (CorruptionKind::NoiseU2, weak / 2.0),
                (CorruptionKind::Both, strong / 4.0),
                (CorruptionKind::MissU1, strong / 4.0),
                (CorruptionKind::MissU2, strong / 4.0),
                (CorruptionKind::Mix, strong / 4.0),
            ],
            severity,
            seed,
        )
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.ratios.is_empty() {
            return Err(DataError::InvalidStream("no corruption ratios".into()));
        }
        if self.ratios.values().any(|r| !(*r >= 0.0)) {
            return Err(DataError::InvalidStream("ratios must be >= 0".into()));
        }
        let sum: f64 = self.ratios.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidStream(format!("ratios sum to {sum}")));
        }
        match self.severity {
            SeverityLevel::Fixed(s) if s > MAX_SEVERITY => {
                Err(DataError::InvalidStream(format!("severity {s} > {MAX_SEVERITY}")))
            }
            SeverityLevel::Fixed(0) if self.ratios.iter().any(|(k, r)| *r > 0.0 && k.uses_severity() && *k != CorruptionKind::None) => {
                Err(DataError::InvalidStream("severity 0 with a noise corruption".into()))
            }
            _ => Ok(()),
        }
    }

    /// Streams with any strong-shift share are adapted in wild mode.
    pub fn mode(&self) -> AdaptMode {
        if self.ratios.iter().any(|(k, r)| k.is_strong() && *r > 0.0) {
            AdaptMode::Wild
        } else {
            AdaptMode::Weak
        }
    }

    /// Compact label, e.g. `noise-u1:0.5,mix:0.5@5`.
    pub fn label(&self) -> String {
        let parts: Vec<String> = self
            .ratios
            .iter()
            .filter(|(_, r)| **r > 0.0)
            .map(|(k, r)| format!("{k}:{r}"))
            .collect();
        let sev = match self.severity {
            SeverityLevel::Fixed(s) => s.to_string(),
            SeverityLevel::Mixed => "mixed".into(),
        };
        let mut label = format!("{}@{sev}", parts.join(","));
        if let Some(n) = self.total {
            label.push_str(&format!("#{n}"));
        }
        label
    }
}

impl FromStr for StreamSpec {
    type Err = DataError;

    /// Parses `kind:ratio[,kind:ratio...][@severity|@mixed][#total]`, or the
    /// shorthand `strong=<ratio>[@...]` for an even weak/strong mixture.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| DataError::InvalidStream(m);
        let (body, total) = match s.split_once('#') {
            Some((b, n)) => (b, Some(n.parse::<usize>().map_err(|e| bad(format!("total `{n}`: {e}")))?)),
            None => (s, None),
        };
        let (mix, sev) = body.split_once('@').unwrap_or((body, "5"));
        let severity = match sev {
            "mixed" => SeverityLevel::Mixed,
            n => SeverityLevel::Fixed(n.parse().map_err(|e| bad(format!("severity `{n}`: {e}")))?),
        };
        let mut spec = if let Some(r) = mix.strip_prefix("strong=") {
            let r: f64 = r.parse().map_err(|e| bad(format!("strong ratio `{r}`: {e}")))?;
            StreamSpec::with_strong_ratio(r, severity, 0)
        } else {
            let mut ratios = BTreeMap::new();
            for part in mix.split(',') {
                let (k, r) = part.split_once(':').unwrap_or((part, "1"));
                let r: f64 = r.parse().map_err(|e| bad(format!("ratio `{r}`: {e}")))?;
                ratios.insert(k.trim().parse()?, r);
            }
            StreamSpec {
                total: None,
                ratios,
                severity,
                seed: 0,
            }
        };
        if let (SeverityLevel::Fixed(_), Some(r)) = (spec.severity, spec.ratios.get(&CorruptionKind::None)) {
            if *r == 1.0 {
                spec.severity = SeverityLevel::Fixed(0);
            }
        }
        spec.total = total;
        spec.validate()?;
        Ok(spec)
    }
}

/// Splits `n` into per-kind counts proportional to `ratios` (largest remainder).
pub fn quotas(ratios: &BTreeMap<CorruptionKind, f64>, n: usize) -> Vec<(CorruptionKind, usize)> {
    let exact: Vec<(CorruptionKind, f64)> = ratios.iter().map(|(k, r)| (*k, r * n as f64)).collect();
    let mut counts: Vec<(CorruptionKind, usize)> = exact.iter().map(|(k, x)| (*k, x.floor() as usize)).collect();
    let assigned: usize = counts.iter().map(|(_, c)| c).sum();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a].1 - exact[a].1.floor();
        let fb = exact[b].1 - exact[b].1.floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i].1 += 1;
    }
    counts
}

/// Corrupts a quota-assigned subset of the test set and shuffles it. Each
/// sample's domain tag is its corruption kind.
pub fn make_stream(test: &Dataset, spec: &StreamSpec, noise_scale: f64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let n = spec.total.unwrap_or(test.len());
    if n == 0 || n > test.len() {
        return Err(DataError::InvalidStream(format!(
            "stream of {n} samples from a test set of {}",
            test.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pick: Vec<usize> = (0..test.len()).collect();
    pick.shuffle(&mut rng);
    pick.truncate(n);
    let mut kinds = Vec::with_capacity(n);
    for (kind, count) in quotas(&spec.ratios, n) {
        kinds.extend(std::iter::repeat_n(kind, count));
    }
    let mut samples = Vec::with_capacity(n);
    for (i, (&idx, kind)) in pick.iter().zip(kinds).enumerate() {
        let severity = match (kind, spec.severity) {
            (CorruptionKind::None, _) => 0,
            (_, SeverityLevel::Fixed(s)) => s,
            (_, SeverityLevel::Mixed) => rng.random_range(1..=MAX_SEVERITY),
        };
        let corruption = Corruption::new(kind, severity)?;
        let src = &test.samples[idx];
        let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
        let sample = corrupt(&src.sample, corruption, noise_scale, seed).with_domain(kind.name());
        samples.push(LabeledSample {
            sample,
            label: src.label,
        });
    }
    samples.shuffle(&mut rng);
    Ok(Dataset {
        classes: test.classes,
        input_dims: test.input_dims,
        samples,
    })
}

/// Writes a dataset as comma-separated rows: label, domain, modality-1 values,
/// modality-2 values, under a metadata line and a header row.
pub fn write_columnar(data: &Dataset, path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path)?;
    writeln!(
        file,
        "{COLUMNAR_MAGIC} v{COLUMNAR_VERSION} classes={} dims={},{}",
        data.classes, data.input_dims[0], data.input_dims[1]
    )?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["label".to_string(), "domain".to_string()];
    for (m, d) in data.input_dims.iter().enumerate() {
        header.extend((0..*d).map(|j| format!("u{}_{j}", m + 1)));
    }
    w.write_record(&header)?;
    for s in &data.samples {
        let mut row = vec![s.label.to_string(), s.sample.domain.clone().unwrap_or_default()];
        for x in &s.sample.modalities {
            row.extend(x.iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_columnar(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path)?;
    let (meta, rest) = text
        .split_once('\n')
        .ok_or_else(|| DataError::Columnar("missing metadata line".into()))?;
    let bad = |m: &str| DataError::Columnar(format!("{m}: `{meta}`"));
    let mut fields = meta.split_whitespace();
    if fields.next() != Some(COLUMNAR_MAGIC) || fields.next() != Some(&format!("v{COLUMNAR_VERSION}")) {
        return Err(bad("unsupported header"));
    }
    let mut classes = None;
    let mut dims = None;
    for f in fields {
        match f.split_once('=') {
            Some(("classes", v)) => classes = v.parse::<usize>().ok(),
            Some(("dims", v)) => {
                let d: Vec<usize> = v.split(',').filter_map(|x| x.parse().ok()).collect();
                dims = (d.len() == 2).then(|| [d[0], d[1]]);
            }
            _ => return Err(bad("unknown field")),
        }
    }
    let (classes, dims) = (classes.ok_or_else(|| bad("no classes"))?, dims.ok_or_else(|| bad("no dims"))?);
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 2 + dims[0] + dims[1] {
            return Err(DataError::Columnar(format!("row has {} fields", rec.len())));
        }
        let label: usize = rec[0].parse().map_err(|_| DataError::Columnar(format!("label `{}`", &rec[0])))?;
        if label >= classes {
            return Err(DataError::Columnar(format!("label {label} >= {classes}")));
        }
        let parse = |range: std::ops::Range<usize>| -> Result<Vec<f64>, DataError> {
            range
                .map(|i| rec[i].parse::<f64>().map_err(|_| DataError::Columnar(format!("value `{}`", &rec[i]))))
                .collect()
        };
        let u1 = parse(2..2 + dims[0])?;
        let u2 = parse(2 + dims[0]..2 + dims[0] + dims[1])?;
        let domain = (!rec[1].is_empty()).then(|| rec[1].to_string());
        samples.push(LabeledSample {
            sample: MultimodalSample {
                modalities: [u1, u2],
                domain,
            },
            label,
        });
    }
    Ok(Dataset {
        classes,
        input_dims: dims,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_task() -> TaskSpec {
        TaskSpec {
            n_train: 1000,
            n_test: 400,
            seed: 3,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn make_task_is_deterministic() {
        let spec = small_task();
        assert_eq!(make_task(&spec).unwrap(), make_task(&spec).unwrap());
        let other = TaskSpec { seed: 4, ..spec.clone() };
        assert_ne!(make_task(&spec).unwrap().0, make_task(&other).unwrap().0);
    }

    #[test]
    fn labels_are_balanced() {
        let spec = TaskSpec {
            n_train: 1000,
            ..TaskSpec::default()
        };
        let (train, _) = make_task(&spec).unwrap();
        let mut hist = [0usize; 8];
        for s in &train.samples {
            hist[s.label] += 1;
        }
        for h in hist {
            let share = h as f64 / 1000.0;
            assert!((share - 0.125).abs() <= 0.02, "{hist:?}");
        }
    }

    /// Nearest class mean on a single modality, fit on train, scored on test.
    fn centroid_probe(train: &Dataset, test: &Dataset, m: usize) -> f64 {
        let d = train.input_dims[m];
        let mut sums = vec![vec![0.0; d]; train.classes];
        let mut counts = vec![0usize; train.classes];
        for s in &train.samples {
            counts[s.label] += 1;
            sums[s.label].iter_mut().zip(&s.sample.modalities[m]).for_each(|(a, b)| *a += b);
        }
        let means: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
            .collect();
        let hits = test
            .samples
            .iter()
            .filter(|s| {
                let x = &s.sample.modalities[m];
                let dist = |mu: &Vec<f64>| mu.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..means.len())
                    .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                    .unwrap();
                best == s.label
            })
            .count();
        hits as f64 / test.len() as f64
    }

    #[test]
    fn each_modality_alone_beats_chance() {
        let (train, test) = make_task(&small_task()).unwrap();
        for m in 0..2 {
            let acc = centroid_probe(&train, &test, m);
            assert!(acc > 1.0 / 8.0 + 0.1, "modality {m}: {acc}");
        }
    }

    #[test]
    fn task_validation() {
        let bad = TaskSpec {
            informativeness: [1.0, 0.0],
            ..TaskSpec::default()
        };
        assert!(make_task(&bad).is_err());
        let bad = TaskSpec {
            classes: 1,
            ..TaskSpec::default()
        };
        assert!(make_task(&bad).is_err());
    }

    fn sample() -> MultimodalSample {
        MultimodalSample::new((0..16).map(|i| i as f64 * 0.1).collect(), (0..16).map(|i| 1.0 - i as f64 * 0.05).collect())
    }

    #[test]
    fn corruption_none_is_identity() {
        let s = sample();
        assert_eq!(corrupt(&s, Corruption::NONE, 1.0, 7), s);
    }

    #[test]
    fn missing_modality_is_zeroed() {
        let s = sample();
        let c = Corruption::new(CorruptionKind::MissU1, 3).unwrap();
        let out = corrupt(&s, c, 1.0, 7);
        assert!(out.modalities[0].iter().all(|v| *v == 0.0));
        assert_eq!(out.modalities[1], s.modalities[1]);
    }

    #[test]
    fn mix_drops_one_side_and_perturbs_the_other() {
        let s = sample();
        let c = Corruption::new(CorruptionKind::Mix, 2).unwrap();
        let mut sides = [0, 0];
        for seed in 0..40 {
            let out = corrupt(&s, c, 1.0, seed);
            let zero: Vec<bool> = out.modalities.iter().map(|x| x.iter().all(|v| *v == 0.0)).collect();
            assert!(zero[0] ^ zero[1]);
            let other = if zero[0] { 1 } else { 0 };
            assert_ne!(out.modalities[other], s.modalities[other]);
            sides[1 - other] += 1;
        }
        assert!(sides[0] > 0 && sides[1] > 0);
    }

    #[test]
    fn noise_std_matches_severity() {
        let s = MultimodalSample::new(vec![0.0; 16], vec![0.0; 16]);
        let c = Corruption::new(CorruptionKind::NoiseU1, 5).unwrap();
        let noise_scale = 0.7;
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for seed in 0..10_000u64 {
            let out = corrupt(&s, c, noise_scale, seed);
            assert!(out.modalities[1].iter().all(|v| *v == 0.0));
            sum_sq += out.modalities[0].iter().map(|v| v * v).sum::<f64>();
            n += 16;
        }
        let std = (sum_sq / n as f64).sqrt();
        let want = 2.0 * noise_scale;
        assert!((std - want).abs() / want < 0.05, "{std} vs {want}");
    }

    #[test]
    fn corruption_validation() {
        assert!(Corruption::new(CorruptionKind::None, 2).is_err());
        assert!(Corruption::new(CorruptionKind::NoiseU1, 0).is_err());
        assert!(Corruption::new(CorruptionKind::Both, 6).is_err());
        assert!(Corruption::new(CorruptionKind::MissU2, 0).is_ok());
    }

    #[test]
    fn clean_stream_is_a_shuffle_of_the_test_set() {
        let (_, test) = make_task(&small_task()).unwrap();
        let spec = StreamSpec::new(&[(CorruptionKind::None, 1.0)], SeverityLevel::Fixed(0), 1);
        let stream = make_stream(&test, &spec, 1.0).unwrap();
        assert_eq!(stream.len(), test.len());
        let key = |s: &LabeledSample| format!("{:?}{}", s.sample.modalities, s.label);
        let mut a: Vec<String> = test.samples.iter().map(key).collect();
        let mut b: Vec<String> = stream.samples.iter().map(key).collect();
        assert_ne!(a, b);
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn stream_quotas_are_exact() {
        let spec = TaskSpec {
            n_test: 1000,
            n_train: 8,
            ..TaskSpec::default()
        };
        let (_, test) = make_task(&spec).unwrap();
        let stream_spec = StreamSpec::new(
            &[(CorruptionKind::NoiseU1, 0.5), (CorruptionKind::Mix, 0.5)],
            SeverityLevel::Fixed(3),
            9,
        );
        let stream = make_stream(&test, &stream_spec, 1.0).unwrap();
        let count = |tag: &str| stream.samples.iter().filter(|s| s.sample.domain.as_deref() == Some(tag)).count();
        assert_eq!((count("noise-u1"), count("mix")), (500, 500));
    }

    #[test]
    fn quotas_sum_to_n() {
        let ratios: BTreeMap<_, _> = [
            (CorruptionKind::NoiseU1, 1.0 / 3.0),
            (CorruptionKind::NoiseU2, 1.0 / 3.0),
            (CorruptionKind::Both, 1.0 / 3.0),
        ]
        .into_iter()
        .collect();
        for n in [1, 2, 7, 100, 1001] {
            assert_eq!(quotas(&ratios, n).iter().map(|(_, c)| c).sum::<usize>(), n);
        }
    }

    #[test]
    fn stream_spec_parsing() {
        let s: StreamSpec = "noise-u1:0.5,mix:0.5@3".parse().unwrap();
        assert_eq!(s.ratios.len(), 2);
        assert_eq!(s.severity, SeverityLevel::Fixed(3));
        assert_eq!(s.mode(), AdaptMode::Wild);
        let s: StreamSpec = "noise-u2@mixed#100".parse().unwrap();
        assert_eq!(s.severity, SeverityLevel::Mixed);
        assert_eq!(s.total, Some(100));
        assert_eq!(s.mode(), AdaptMode::Weak);
        let s: StreamSpec = "strong=0.5@5".parse().unwrap();
        assert_eq!(s, StreamSpec::half_strong(SeverityLevel::Fixed(5), 0));
        let s: StreamSpec = "none".parse().unwrap();
        assert_eq!(s.severity, SeverityLevel::Fixed(0));
        assert!("noise-u1:0.4".parse::<StreamSpec>().is_err());
        assert!("bogus:1".parse::<StreamSpec>().is_err());
        let round: StreamSpec = s.label().parse().unwrap();
        assert_eq!(round.ratios, s.ratios);
    }

    #[test]
    fn stream_spec_deserializes_from_text_or_object() {
        let spec = StreamSpec::half_strong(SeverityLevel::Mixed, 3);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<StreamSpec>(&json).unwrap(), spec);
        let text: StreamSpec = serde_json::from_str("\"strong=0.5@mixed\"").unwrap();
        assert_eq!(text, StreamSpec::half_strong(SeverityLevel::Mixed, 0));
        assert!(serde_json::from_str::<StreamSpec>("\"noise-u1:0.4\"").is_err());
        let bad = json.replace("0.25", "0.5");
        assert!(serde_json::from_str::<StreamSpec>(&bad).is_err());
    }

    #[test]
    fn columnar_round_trip() {
        let (_, test) = make_task(&TaskSpec {
            n_train: 8,
            n_test: 50,
            ..TaskSpec::default()
        })
        .unwrap();
        let stream = make_stream(&test, &StreamSpec::half_strong(SeverityLevel::Mixed, 2), 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream.csv");
        write_columnar(&stream, &path).unwrap();
        assert_eq!(read_columnar(&path).unwrap(), stream);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("#sumi-columnar v1 classes=8 dims=16,16\nlabel,domain,u1_0,"));
    }
}
