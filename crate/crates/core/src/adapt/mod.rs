//! Online test-time adaptation: the full method, its baselines and ablations,
//! and the loop that runs them over a labelled stream.

mod optimizer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use optimizer::Adam;

use crate::datagen::Dataset;
use crate::model::{BatchGraph, Model, ModelError, MultimodalSample};
use crate::numkit::NumError;
use crate::objective::{total_loss, weighted_entropy_node, AdaptConfig, AdaptMode, Components, LossNodes};
use crate::selection::{iqr_mask, quartiles, ua_mask, SelectionError, SelectionMask, SmoothingSchedule};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid adaptation config: {0}")]
    InvalidConfig(String),
    #[error("iteration {t} outside 1..={iter}")]
    IterationOutOfRange { t: usize, iter: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty stream")]
    EmptyStream,
    #[error("stream needs {batches} iterations but iter is fixed at {iter}")]
    HorizonTooShort { batches: usize, iter: usize },
    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Adaptation strategy run over a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    /// No adaptation.
    Source,
    /// Minimize the fused-prediction entropy of every sample.
    EntropyMin,
    /// Entropy minimization restricted to confident samples, weighted by confidence.
    GatedEntropyMin,
    Sumi(Components),
}

impl AdapterKind {
    pub const SUMI: AdapterKind = AdapterKind::Sumi(Components::ALL);

    /// The three reference strategies plus the full method.
    pub fn standard() -> Vec<AdapterKind> {
        vec![
            AdapterKind::Source,
            AdapterKind::EntropyMin,
            AdapterKind::GatedEntropyMin,
            AdapterKind::SUMI,
        ]
    }

    /// One entry per component subset, all-off first and all-on last.
    pub fn ablation() -> Vec<AdapterKind> {
        Components::grid().into_iter().map(AdapterKind::Sumi).collect()
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterKind::Source => f.write_str("source"),
            AdapterKind::EntropyMin => f.write_str("entropy-min"),
            AdapterKind::GatedEntropyMin => f.write_str("gated-entropy-min"),
            AdapterKind::Sumi(c) if *c == Components::ALL => f.write_str("sumi"),
            AdapterKind::Sumi(c) => write!(f, "sumi[{}]", c.label()),
        }
    }
}

impl FromStr for AdapterKind {
    type Err = AdaptError;

    /// Accepts `source`, `entropy-min`, `gated-entropy-min`, `sumi`, and
    /// `sumi[<components>]` with components joined by `+` or `none`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || AdaptError::UnknownAdapter(s.to_string());
        match s {
            "source" => return Ok(AdapterKind::Source),
            "entropy-min" => return Ok(AdapterKind::EntropyMin),
            "gated-entropy-min" => return Ok(AdapterKind::GatedEntropyMin),
            "sumi" => return Ok(AdapterKind::SUMI),
            _ => {}
        }
        let inner = s
            .strip_prefix("sumi[")
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(unknown)?;
        let mut c = Components::NONE;
        if inner != "none" {
            for part in inner.split('+') {
                match part {
                    "iqr" => c.iqr = true,
                    "ua" => c.ua = true,
                    "mis" => c.mis = true,
                    _ => return Err(unknown()),
                }
            }
        }
        Ok(AdapterKind::Sumi(c))
    }
}

impl Serialize for AdapterKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AdapterKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What happened at one adaptation step. Predictions are taken before the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub t: usize,
    pub batch_size: usize,
    /// Samples surviving the IQR stage.
    pub candidates: usize,
    /// Samples contributing to the loss.
    pub selected: usize,
    pub loss: f64,
    pub entropy_loss: f64,
    pub mis_loss: f64,
    pub balance_loss: f64,
    /// Smoothing value in effect, when the IQR stage ran.
    pub smoothing: Option<f64>,
    pub lambda_eff: f64,
    pub updated: bool,
    /// Filled in by [`run_adaptation`], which knows the labels.
    pub running_accuracy: Option<f64>,
    #[serde(skip)]
    pub predictions: Vec<usize>,
    #[serde(skip)]
    pub selected_indices: Vec<usize>,
}

/// A strategy bound to its config, iteration horizon and optimizer state.
#[derive(Clone, Debug)]
pub struct Adapter {
    kind: AdapterKind,
    config: AdaptConfig,
    schedule: SmoothingSchedule,
    mode: AdaptMode,
    optimizer: Adam,
}

impl Adapter {
    /// The kind decides `config.components`: its own set for [`AdapterKind::Sumi`],
    /// none for the gated baseline.
    pub fn new(kind: AdapterKind, config: &AdaptConfig, iter: usize, mode: AdaptMode) -> Result<Self, AdaptError> {
        config.validate().map_err(AdaptError::InvalidConfig)?;
        let mut config = config.clone();
        match kind {
            AdapterKind::Sumi(c) => config.components = c,
            AdapterKind::GatedEntropyMin => config.components = Components::NONE,
            _ => {}
        }
        Ok(Adapter {
            kind,
            schedule: SmoothingSchedule::new(config.schedule, iter)?,
            optimizer: Adam::new(config.learning_rate),
            config,
            mode,
        })
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn iter(&self) -> usize {
        self.schedule.iter
    }

    /// Number of parameter updates applied so far.
    pub fn updates(&self) -> u64 {
        self.optimizer.steps()
    }

    /// Predicts the batch, then adapts on it. `t` counts from 1.
    pub fn step(&mut self, model: &mut Model, batch: &[MultimodalSample], t: usize) -> Result<StepReport, AdaptError> {
        match self.kind {
            AdapterKind::Source => {
                let outs = model.forward_batch(batch)?;
                if batch.is_empty() {
                    return Err(AdaptError::EmptyBatch);
                }
                Ok(StepReport {
                    t,
                    batch_size: batch.len(),
                    candidates: batch.len(),
                    selected: 0,
                    loss: 0.0,
                    entropy_loss: 0.0,
                    mis_loss: 0.0,
                    balance_loss: 0.0,
                    smoothing: None,
                    lambda_eff: 0.0,
                    updated: false,
                    running_accuracy: None,
                    predictions: outs.iter().map(|o| o.predicted_class()).collect(),
                    selected_indices: Vec::new(),
                })
            }
            AdapterKind::EntropyMin => self.run_step(model, batch, t, Selector::Everything),
            AdapterKind::GatedEntropyMin | AdapterKind::Sumi(_) => self.run_step(model, batch, t, Selector::Gated),
        }
    }

    fn run_step(
        &mut self,
        model: &mut Model,
        batch: &[MultimodalSample],
        t: usize,
        selector: Selector,
    ) -> Result<StepReport, AdaptError> {
        let iter = self.schedule.iter;
        if t == 0 || t > iter {
            return Err(AdaptError::IterationOutOfRange { t, iter });
        }
        if batch.is_empty() {
            return Err(AdaptError::EmptyBatch);
        }
        let cfg = &self.config;
        let mut bg = BatchGraph::new(model, batch)?;
        let mut eval = bg.graph.forward(&bg.bindings(model.params()))?;
        let outs = bg.outputs(&eval);
        let predictions: Vec<usize> = outs.iter().map(|o| o.predicted_class()).collect();
        let entropies: Vec<_> = outs.iter().map(|o| o.entropies).collect();

        let (candidates, smoothing, mask, loss_nodes, lambda_eff) = match selector {
            Selector::Everything => {
                let all: Vec<(usize, f64)> = (0..batch.len()).map(|i| (i, 1.0)).collect();
                let ent = weighted_entropy_node(&mut bg.graph, &bg.nodes, &all).expect("non-empty batch");
                let nodes = LossNodes {
                    total: ent,
                    entropy: Some(ent),
                    mis: None,
                    balance: None,
                };
                (batch.len(), None, SelectionMask::all(batch.len()), nodes, 0.0)
            }
            Selector::Gated => {
                let (h_mask, smoothing) = if cfg.components.iqr {
                    let reps: Vec<&[f64]> = outs.iter().map(|o| o.h.as_slice()).collect();
                    let stats = quartiles(&reps, cfg.quantile_mode)?;
                    let mask = iqr_mask(&reps, &stats, &self.schedule, t, cfg.beta)?;
                    (mask, Some(self.schedule.value(t)?))
                } else {
                    (SelectionMask::all(batch.len()), None)
                };
                let gamma_u = if cfg.components.ua { cfg.gamma_u } else { f64::NEG_INFINITY };
                let gate = ua_mask(&entropies, cfg.gamma_m, gamma_u, cfg.mu, cfg.modality_order);
                let mask = gate.within(&h_mask);
                let nodes = total_loss(&mut bg.graph, &bg.nodes, &entropies, &mask, cfg, t, iter, self.mode);
                let lambda_eff = cfg.effective_lambda(t, iter, self.mode);
                (h_mask.count(), smoothing, mask, nodes, lambda_eff)
            }
        };
        bg.graph.set_output(loss_nodes.total);
        bg.graph.extend(&mut eval, &bg.bindings(model.params()))?;
        let part = |n: Option<crate::numkit::NodeId>| n.map_or(0.0, |id| eval.value(id).item());
        let selected_indices = mask.indices();
        let mut report = StepReport {
            t,
            batch_size: batch.len(),
            candidates,
            selected: selected_indices.len(),
            loss: eval.value(loss_nodes.total).item(),
            entropy_loss: part(loss_nodes.entropy),
            mis_loss: part(loss_nodes.mis),
            balance_loss: part(loss_nodes.balance),
            smoothing,
            lambda_eff,
            updated: false,
            running_accuracy: None,
            predictions,
            selected_indices,
        };
        if report.selected > 0 {
            let grads = bg.graph.gradient(&eval, model.params())?;
            drop(eval);
            self.optimizer.step(model.params_mut(), &grads)?;
            report.updated = true;
        }
        Ok(report)
    }
}

#[derive(Clone, Copy, Debug)]
enum Selector {
    Everything,
    Gated,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// How many of this domain's samples entered the loss.
    pub selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub adapter: AdapterKind,
    pub mode: AdaptMode,
    pub iter: usize,
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub updates: u64,
    /// Mean share of each batch that survived the IQR stage.
    pub candidate_rate: f64,
    /// Mean share of each batch that entered the loss.
    pub selection_rate: f64,
    pub per_domain: BTreeMap<String, DomainStats>,
    pub trace: Vec<StepReport>,
}

/// Adapts `model` in place over `stream` in order, scoring each batch before
/// its update. `iter` defaults to the number of batches.
pub fn run_adaptation(
    model: &mut Model,
    stream: &Dataset,
    kind: AdapterKind,
    config: &AdaptConfig,
    mode: AdaptMode,
) -> Result<RunReport, AdaptError> {
    if stream.is_empty() {
        return Err(AdaptError::EmptyStream);
    }
    let batches = stream.len().div_ceil(config.batch_size.max(1));
    let iter = config.iter.unwrap_or(batches);
    if iter < batches {
        return Err(AdaptError::HorizonTooShort { batches, iter });
    }
    let mut adapter = Adapter::new(kind, config, iter, mode)?;
    let mut per_domain: BTreeMap<String, DomainStats> = BTreeMap::new();
    let mut trace = Vec::with_capacity(batches);
    let mut correct = 0usize;
    let mut seen = 0usize;
    let (mut cand_sum, mut sel_sum) = (0.0, 0.0);
    for (i, chunk) in stream.samples.chunks(config.batch_size).enumerate() {
        let inputs: Vec<MultimodalSample> = chunk.iter().map(|s| s.sample.clone()).collect();
        let mut report = adapter.step(model, &inputs, i + 1)?;
        for (j, s) in chunk.iter().enumerate() {
            let hit = report.predictions[j] == s.label;
            correct += hit as usize;
            let key = s.sample.domain.clone().unwrap_or_else(|| "clean".to_string());
            let d = per_domain.entry(key).or_default();
            d.samples += 1;
            d.correct += hit as usize;
        }
        for &j in &report.selected_indices {
            let key = chunk[j].sample.domain.clone().unwrap_or_else(|| "clean".to_string());
            per_domain.entry(key).or_default().selected += 1;
        }
        seen += chunk.len();
        cand_sum += report.candidates as f64 / chunk.len() as f64;
        sel_sum += report.selected as f64 / chunk.len() as f64;
        report.running_accuracy = Some(correct as f64 / seen as f64);
        trace.push(report);
    }
    for d in per_domain.values_mut() {
        d.accuracy = d.correct as f64 / d.samples as f64;
    }
    Ok(RunReport {
        adapter: kind,
        mode,
        iter,
        samples: seen,
        correct,
        accuracy: correct as f64 / seen as f64,
        updates: adapter.updates(),
        candidate_rate: cand_sum / trace.len() as f64,
        selection_rate: sel_sum / trace.len() as f64,
        per_domain,
        trace,
    })
}

/// Fused-prediction accuracy of `model` on `data`, without adaptation.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in data.samples.chunks(256) {
        let inputs: Vec<MultimodalSample> = chunk.iter().map(|s| s.sample.clone()).collect();
        let outs = model.forward_batch(&inputs)?;
        correct += outs
            .iter()
            .zip(chunk)
            .filter(|(o, s)| o.predicted_class() == s.label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests;
