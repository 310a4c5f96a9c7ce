//! Sample identification: a time-widened Tukey band over fused representations
//! and an entropy gate that uses the unimodal predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Entropies;

/// Tukey fence multiplier.
pub const TUKEY_K: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("iteration {t} is outside [0, {iter}]")]
    IterationOutOfRange { t: usize, iter: usize },
    #[error("smoothing horizon must be at least one iteration")]
    EmptyHorizon,
    #[error("cannot compute quartiles of an empty batch")]
    EmptyBatch,
    #[error("representation {index} has length {found}, expected {expected}")]
    RaggedBatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("stats cover {stats} dimensions, batch has {batch}")]
    StatsMismatch { stats: usize, batch: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    #[default]
    Linear,
    #[serde(alias = "exp")]
    Exponential,
    #[serde(alias = "log")]
    Logarithmic,
}

impl std::str::FromStr for ScheduleFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ScheduleFamily::Linear),
            "exp" | "exponential" => Ok(ScheduleFamily::Exponential),
            "log" | "logarithmic" => Ok(ScheduleFamily::Logarithmic),
            other => Err(format!("unknown schedule `{other}` (linear|exp|log)")),
        }
    }
}

/// Smoothing function `f` over a fixed horizon: `f(0) = 0`, `f(iter) = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothingSchedule {
    pub family: ScheduleFamily,
    pub iter: usize,
}

impl SmoothingSchedule {
    pub fn new(family: ScheduleFamily, iter: usize) -> Result<Self, SelectionError> {
        if iter == 0 {
            return Err(SelectionError::EmptyHorizon);
        }
        Ok(SmoothingSchedule { family, iter })
    }

    pub fn value(&self, t: usize) -> Result<f64, SelectionError> {
        if t > self.iter {
            return Err(SelectionError::IterationOutOfRange { t, iter: self.iter });
        }
        let r = t as f64 / self.iter as f64;
        let f = match self.family {
            ScheduleFamily::Linear => r,
            ScheduleFamily::Exponential => (r * std::f64::consts::LN_2).exp() - 1.0,
            ScheduleFamily::Logarithmic => ((std::f64::consts::E - 1.0) * r + 1.0).ln(),
        };
        Ok(f.clamp(0.0, 1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum QuantileMode {
    /// Per dimension: `Q1 = min + 0.25 (max - min)`, `Q3 = min + 0.75 (max - min)`.
    #[default]
    #[serde(rename = "minmax")]
    MinmaxInterp,
    /// Per dimension: linearly interpolated order statistics at `(n - 1) q`.
    #[serde(rename = "order")]
    OrderStat,
}

impl std::str::FromStr for QuantileMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "minmax" | "minmax-interp" => Ok(QuantileMode::MinmaxInterp),
            "order" | "order-stat" => Ok(QuantileMode::OrderStat),
            other => Err(format!("unknown quantile mode `{other}` (minmax|order)")),
        }
    }
}

/// Per-dimension lower/upper quartiles of a batch of representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuartileStats {
    pub q1: Vec<f64>,
    pub q3: Vec<f64>,
    pub iqr: Vec<f64>,
    /// Column minimum and maximum.
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mode: QuantileMode,
}

impl QuartileStats {
    pub fn dims(&self) -> usize {
        self.q1.len()
    }

    /// Inclusive acceptance interval of dimension `d` at smoothing value `f`.
    ///
    /// In min-max mode the edges are written as `min + c R` and `max - c R`
    /// with `c = 0.25 - 0.75 f`, the same interval as `Q1 - 1.5 f IQR` and
    /// `Q3 + 1.5 f IQR`. This form rounds so that the band contains the whole
    /// column once `c <= 0`, which holds from `f = 1/3` on.
    pub fn band(&self, d: usize, f: f64) -> (f64, f64) {
        match self.mode {
            QuantileMode::MinmaxInterp => {
                let range = self.max[d] - self.min[d];
                let c = 0.25 - 0.75 * f;
                (self.min[d] + c * range, self.max[d] - c * range)
            }
            QuantileMode::OrderStat => {
                let w = TUKEY_K * f * self.iqr[d];
                (self.q1[d] - w, self.q3[d] + w)
            }
        }
    }
}

fn check_batch<V: AsRef<[f64]>>(batch: &[V]) -> Result<usize, SelectionError> {
    let dims = batch.first().ok_or(SelectionError::EmptyBatch)?.as_ref().len();
    for (index, h) in batch.iter().enumerate() {
        if h.as_ref().len() != dims {
            return Err(SelectionError::RaggedBatch {
                index,
                expected: dims,
                found: h.as_ref().len(),
            });
        }
    }
    Ok(dims)
}

pub fn quartiles<V: AsRef<[f64]>>(batch: &[V], mode: QuantileMode) -> Result<QuartileStats, SelectionError> {
    let dims = check_batch(batch)?;
    let mut q1 = Vec::with_capacity(dims);
    let mut q3 = Vec::with_capacity(dims);
    let mut min = Vec::with_capacity(dims);
    let mut max = Vec::with_capacity(dims);
    let mut column = Vec::with_capacity(batch.len());
    for d in 0..dims {
        column.clear();
        column.extend(batch.iter().map(|h| h.as_ref()[d]));
        let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        min.push(lo);
        max.push(hi);
        let (a, b) = match mode {
            QuantileMode::MinmaxInterp => (lo + 0.25 * (hi - lo), lo + 0.75 * (hi - lo)),
            QuantileMode::OrderStat => {
                column.sort_by(f64::total_cmp);
                (interpolated_quantile(&column, 0.25), interpolated_quantile(&column, 0.75))
            }
        };
        q1.push(a);
        q3.push(b);
    }
    let iqr = q1.iter().zip(&q3).map(|(a, b)| b - a).collect();
    Ok(QuartileStats {
        q1,
        q3,
        iqr,
        min,
        max,
        mode,
    })
}

fn interpolated_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fraction of dimensions that must fall inside the band at smoothing value `f`.
pub fn required_fraction(beta: f64, f: f64) -> f64 {
    if f >= 1.0 {
        1.0
    } else {
        beta + (1.0 - beta) * f
    }
}

/// Per-sample outcome of the two selection stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub selected: Vec<bool>,
    /// Fraction of representation dimensions inside the band (IQR stage).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_band_fraction: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropies: Option<Vec<Entropies>>,
}

impl SelectionMask {
    pub fn all(n: usize) -> Self {
        SelectionMask {
            selected: vec![true; n],
            ..Default::default()
        }
    }

    pub fn none(n: usize) -> Self {
        SelectionMask {
            selected: vec![false; n],
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|s| **s).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.then_some(i))
            .collect()
    }

    /// Keeps only samples selected by both masks, carrying diagnostics from both.
    pub fn within(&self, outer: &SelectionMask) -> SelectionMask {
        assert_eq!(self.len(), outer.len());
        SelectionMask {
            selected: self.selected.iter().zip(&outer.selected).map(|(a, b)| *a && *b).collect(),
            in_band_fraction: self.in_band_fraction.clone().or_else(|| outer.in_band_fraction.clone()),
            entropies: self.entropies.clone().or_else(|| outer.entropies.clone()),
        }
    }
}

/// IQR-smoothing mask at iteration `t`.
pub fn iqr_mask<V: AsRef<[f64]>>(
    batch: &[V],
    stats: &QuartileStats,
    schedule: &SmoothingSchedule,
    t: usize,
    beta: f64,
) -> Result<SelectionMask, SelectionError> {
    iqr_mask_at(batch, stats, schedule.value(t)?, beta)
}

/// IQR-smoothing mask for an explicit smoothing value `f`.
pub fn iqr_mask_at<V: AsRef<[f64]>>(
    batch: &[V],
    stats: &QuartileStats,
    f: f64,
    beta: f64,
) -> Result<SelectionMask, SelectionError> {
    let dims = check_batch(batch)?;
    if dims != stats.dims() {
        return Err(SelectionError::StatsMismatch {
            stats: stats.dims(),
            batch: dims,
        });
    }
    let bands: Vec<(f64, f64)> = (0..dims).map(|d| stats.band(d, f)).collect();
    let need = required_fraction(beta, f);
    let fractions: Vec<f64> = batch
        .iter()
        .map(|h| {
            let inside = h
                .as_ref()
                .iter()
                .zip(&bands)
                .filter(|(v, (lo, hi))| lo <= *v && *v <= hi)
                .count();
            inside as f64 / dims as f64
        })
        .collect();
    Ok(SelectionMask {
        selected: fractions.iter().map(|fr| *fr >= need).collect(),
        in_band_fraction: Some(fractions),
        entropies: None,
    })
}

/// Which modality's entropy is scaled by `mu` in the unimodal gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityOrder {
    /// `Ent_u1 + mu * Ent_u2`
    #[default]
    U1First,
    /// `Ent_u2 + mu * Ent_u1`
    U2First,
}

/// Unimodal-assistance gate: low multimodal entropy, non-trivial unimodal entropy.
pub fn ua_mask(entropies: &[Entropies], gamma_m: f64, gamma_u: f64, mu: f64, order: ModalityOrder) -> SelectionMask {
    let selected = entropies
        .iter()
        .map(|e| {
            let (first, second) = match order {
                ModalityOrder::U1First => (e.u1, e.u2),
                ModalityOrder::U2First => (e.u2, e.u1),
            };
            e.multimodal <= gamma_m && first + mu * second >= gamma_u
        })
        .collect();
    SelectionMask {
        selected,
        in_band_fraction: None,
        entropies: Some(entropies.to_vec()),
    }
}
