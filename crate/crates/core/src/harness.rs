//! Experiment runner: trains one source model per seed, runs every
//! (stream, adapter, seed) cell and writes JSON and CSV reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapt::{run_adaptation, AdaptError, AdapterKind, DomainStats, StepReport};
use crate::datagen::{make_stream, make_task, train_source, DataError, SeverityLevel, StreamSpec, TaskSpec, TrainOptions};
use crate::model::{Model, ModelError, ModelSpec};
use crate::objective::AdaptConfig;

pub const REPORT_FORMAT: &str = "sumi-report";
pub const REPORT_VERSION: u32 = 1;
pub const CSV_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "SUMI_THREADS";

/// Learning rate of the bundled experiments; see the README for why it
/// differs from the method default.
pub const EXPERIMENT_LEARNING_RATE: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    /// Defaults to the task's dimensions with the standard encoder sizes.
    pub model: Option<ModelSpec>,
    pub train: TrainOptions,
    /// Fields overriding the class-count defaults of [`AdaptConfig`].
    pub adapt: Map<String, Value>,
    pub streams: Vec<StreamSpec>,
    pub adapters: Vec<AdapterKind>,
    /// Each seed drives data generation, source training and stream assembly.
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    /// Directory of trained source checkpoints keyed by content hash.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut adapt = Map::new();
        adapt.insert("learning_rate".into(), EXPERIMENT_LEARNING_RATE.into());
        ExperimentConfig {
            task: TaskSpec::default(),
            model: None,
            train: TrainOptions::default(),
            adapt,
            streams: vec![StreamSpec::half_strong(SeverityLevel::Fixed(5), 0)],
            adapters: AdapterKind::standard(),
            seeds: (0..5).collect(),
            output: None,
            cache_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.model.clone().unwrap_or_else(|| self.task.model_spec())
    }

    /// Class-count defaults with `adapt` overlaid.
    pub fn adapt_config(&self) -> Result<AdaptConfig, HarnessError> {
        let mut base = serde_json::to_value(AdaptConfig::for_classes(self.task.classes))?;
        let obj = base.as_object_mut().expect("struct serializes to an object");
        for (k, v) in &self.adapt {
            if !obj.contains_key(k) {
                return Err(HarnessError::InvalidConfig(format!("unknown adapt field `{k}`")));
            }
            obj.insert(k.clone(), v.clone());
        }
        let cfg: AdaptConfig = serde_json::from_value(base)?;
        cfg.validate().map_err(HarnessError::InvalidConfig)?;
        Ok(cfg)
    }

    pub fn set_adapt(&mut self, key: &str, value: impl Into<Value>) {
        self.adapt.insert(key.to_string(), value.into());
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.streams.is_empty() {
            return bad("at least one stream is required");
        }
        if self.adapters.is_empty() {
            return bad("at least one adapter is required");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        self.task.validate()?;
        let m = self.model_spec();
        m.validate()?;
        if m.input_dims != self.task.input_dims || m.classes != self.task.classes {
            return bad("model dims and classes must match the task");
        }
        for s in &self.streams {
            s.validate()?;
        }
        self.adapt_config()?;
        Ok(())
    }

    /// The same experiment over the eight component subsets of the method.
    pub fn ablation(&self) -> Self {
        ExperimentConfig {
            adapters: AdapterKind::ablation(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub seed: u64,
    pub cache_key: String,
    pub clean_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub stream: String,
    pub adapter: AdapterKind,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub selection_rate: Option<f64>,
    pub candidate_rate: Option<f64>,
    pub updates: Option<u64>,
    pub per_domain: BTreeMap<String, DomainStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub trace: Vec<StepReport>,
}

impl Cell {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub stream: String,
    pub adapter: AdapterKind,
    /// Seeds that completed.
    pub n: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation across seeds; `None` below two seeds.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub sources: Vec<SourceSummary>,
    pub cells: Vec<Cell>,
    pub summary: Vec<Aggregate>,
}

impl ExperimentReport {
    pub fn completed(&self) -> bool {
        self.cells.iter().all(Cell::ok)
    }

    pub fn aggregate(&self, stream: &str, adapter: AdapterKind) -> Option<&Aggregate> {
        self.summary.iter().find(|a| a.stream == stream && a.adapter == adapter)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let report: ExperimentReport = serde_json::from_str(&text)?;
        if report.format != REPORT_FORMAT || report.version != REPORT_VERSION {
            return Err(HarnessError::InvalidConfig(format!(
                "unsupported report {} v{}",
                report.format, report.version
            )));
        }
        Ok(report)
    }
}

/// Content hash identifying a trained source model.
pub fn source_cache_key(task: &TaskSpec, model: &ModelSpec, train: &TrainOptions) -> Result<String, HarnessError> {
    let payload = serde_json::to_vec(&(REPORT_VERSION, task, model, train))?;
    Ok(hex::encode(Sha256::digest(payload)))
}

fn per_seed(config: &ExperimentConfig, seed: u64) -> (TaskSpec, TrainOptions) {
    let task = TaskSpec {
        seed,
        ..config.task.clone()
    };
    let train = TrainOptions {
        seed,
        ..config.train.clone()
    };
    (task, train)
}

struct SeedData {
    source: Result<Model, String>,
    test: Option<crate::datagen::Dataset>,
    summary: SourceSummary,
}

fn prepare_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedData, HarnessError> {
    let (task, train_opts) = per_seed(config, seed);
    let spec = config.model_spec();
    let key = source_cache_key(&task, &spec, &train_opts)?;
    let (train, test) = make_task(&task)?;
    let cached = config.cache_dir.as_ref().map(|d| d.join(format!("source-{key}.json")));
    if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
        let model = Model::load(path)?;
        let clean = crate::adapt::evaluate(&model, &test)?;
        return Ok(SeedData {
            source: Ok(model),
            test: Some(test),
            summary: SourceSummary {
                seed,
                cache_key: key,
                clean_accuracy: Some(clean),
                error: None,
            },
        });
    }
    match train_source(&spec, &train, &test, &train_opts) {
        Ok(trained) => {
            if let Some(path) = &cached {
                trained.model.save(path)?;
            }
            Ok(SeedData {
                source: Ok(trained.model),
                test: Some(test),
                summary: SourceSummary {
                    seed,
                    cache_key: key,
                    clean_accuracy: Some(trained.clean_accuracy),
                    error: None,
                },
            })
        }
        Err(e @ DataError::AccuracyFloor { .. }) => Ok(SeedData {
            source: Err(e.to_string()),
            test: None,
            summary: SourceSummary {
                seed,
                cache_key: key,
                clean_accuracy: None,
                error: Some(e.to_string()),
            },
        }),
        Err(e) => Err(e.into()),
    }
}

fn run_cell(
    config: &ExperimentConfig,
    adapt: &AdaptConfig,
    data: &SeedData,
    stream: &StreamSpec,
    adapter: AdapterKind,
    seed: u64,
) -> Cell {
    let mut cell = Cell {
        stream: stream.label(),
        adapter,
        seed,
        accuracy: None,
        selection_rate: None,
        candidate_rate: None,
        updates: None,
        per_domain: BTreeMap::new(),
        error: None,
        trace: Vec::new(),
    };
    let result = (|| -> Result<_, HarnessError> {
        let model = data.source.as_ref().map_err(|e| HarnessError::InvalidConfig(format!("source model: {e}")))?;
        let test = data.test.as_ref().expect("test set accompanies a source model");
        let spec = StreamSpec {
            seed: stream.seed.wrapping_add(seed),
            ..stream.clone()
        };
        let samples = make_stream(test, &spec, config.task.noise_scale)?;
        let mut model = model.clone();
        Ok(run_adaptation(&mut model, &samples, adapter, adapt, spec.mode())?)
    })();
    match result {
        Ok(r) => {
            cell.accuracy = Some(r.accuracy);
            cell.selection_rate = Some(r.selection_rate);
            cell.candidate_rate = Some(r.candidate_rate);
            cell.updates = Some(r.updates);
            cell.per_domain = r.per_domain;
            cell.trace = r.trace;
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell
}

fn thread_pool() -> Result<rayon::ThreadPool, HarnessError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| HarnessError::Pool(e.to_string()))
}

/// Runs every cell. Cell order is stream-major, then adapter, then seed,
/// independent of scheduling. Failed cells carry an error message.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    let adapt = config.adapt_config()?;
    if let Some(dir) = &config.cache_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let pool = thread_pool()?;
    let seeds: Vec<SeedData> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&s| prepare_seed(config, s))
            .collect::<Result<_, _>>()
    })?;
    let mut jobs = Vec::new();
    for stream in &config.streams {
        for &adapter in &config.adapters {
            for (i, &seed) in config.seeds.iter().enumerate() {
                jobs.push((stream, adapter, i, seed));
            }
        }
    }
    let cells: Vec<Cell> = pool.install(|| {
        jobs.par_iter()
            .map(|&(stream, adapter, i, seed)| run_cell(config, &adapt, &seeds[i], stream, adapter, seed))
            .collect()
    });
    let summary = summarize(config, &cells);
    Ok(ExperimentReport {
        format: REPORT_FORMAT.to_string(),
        version: REPORT_VERSION,
        config: config.clone(),
        sources: seeds.into_iter().map(|s| s.summary).collect(),
        cells,
        summary,
    })
}

fn summarize(config: &ExperimentConfig, cells: &[Cell]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for stream in &config.streams {
        let label = stream.label();
        for &adapter in &config.adapters {
            let accs: Vec<f64> = cells
                .iter()
                .filter(|c| c.stream == label && c.adapter == adapter)
                .filter_map(|c| c.accuracy)
                .collect();
            let n = accs.len();
            let mean = (n > 0).then(|| accs.iter().sum::<f64>() / n as f64);
            let std = mean.filter(|_| n > 1).map(|m| {
                (accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            });
            out.push(Aggregate {
                stream: label.clone(),
                adapter,
                n,
                mean,
                std,
            });
        }
    }
    out
}

const CSV_FIXED: [&str; 10] = [
    "schema_version",
    "stream",
    "adapter",
    "seed",
    "status",
    "accuracy",
    "selection_rate",
    "candidate_rate",
    "updates",
    "error",
];

/// One row per cell, with an `acc:<domain>` column for every domain seen.
pub fn write_csv(report: &ExperimentReport, path: &Path) -> Result<(), HarnessError> {
    let domains: BTreeSet<&str> = report
        .cells
        .iter()
        .flat_map(|c| c.per_domain.keys().map(String::as_str))
        .collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => HarnessError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => HarnessError::InvalidConfig(format!("{other:?}")),
    })?;
    let mut header: Vec<String> = CSV_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(domains.iter().map(|d| format!("acc:{d}")));
    w.write_record(&header)?;
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in &report.cells {
        let mut row = vec![
            CSV_VERSION.to_string(),
            c.stream.clone(),
            c.adapter.to_string(),
            c.seed.to_string(),
            if c.ok() { "ok" } else { "failed" }.to_string(),
            num(c.accuracy),
            num(c.selection_rate),
            num(c.candidate_rate),
            c.updates.map(|u| u.to_string()).unwrap_or_default(),
            c.error.clone().unwrap_or_default(),
        ];
        row.extend(domains.iter().map(|d| num(c.per_domain.get(*d).map(|s| s.accuracy))));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Writes `report.json` and `report.csv` into `dir`, returning both paths.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json_path = dir.join("report.json");
    let csv_path = dir.join("report.csv");
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(&json_path, json).map_err(io_err(&json_path))?;
    write_csv(report, &csv_path)?;
    Ok((json_path, csv_path))
}

/// Plain-text table of the per-(stream, adapter) aggregates.
pub fn render_summary(report: &ExperimentReport) -> String {
    let width = report
        .summary
        .iter()
        .map(|a| a.adapter.to_string().len())
        .max()
        .unwrap_or(7)
        .max(7);
    let mut out = String::new();
    let mut last_stream = None;
    for a in &report.summary {
        if last_stream != Some(&a.stream) {
            out.push_str(&format!("stream {}\n", a.stream));
            last_stream = Some(&a.stream);
        }
        let stat = match (a.mean, a.std) {
            (Some(m), Some(s)) => format!("{:6.2} ± {:5.2}", 100.0 * m, 100.0 * s),
            (Some(m), None) => format!("{:6.2}", 100.0 * m),
            _ => "failed".to_string(),
        };
        out.push_str(&format!("  {:width$}  {stat}  (n={})\n", a.adapter.to_string(), a.n));
    }
    for s in report.sources.iter().filter(|s| s.error.is_some()) {
        out.push_str(&format!("source seed {}: {}\n", s.seed, s.error.as_deref().unwrap_or("")));
    }
    out
}
