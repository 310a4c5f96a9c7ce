//! Loss terms: prediction entropy, the mutual-information-sharing divergence,
//! per-sample weights and the gated total objective.
//!
//! Scalar versions work on [`ProbDist`] values and feed selection and
//! reporting; `*_node` versions append the same expressions to a [`Graph`] so
//! they can be differentiated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Entropies, SampleNodes};
use crate::numkit::{Graph, NodeId, LOG_EPS};
use crate::selection::{ModalityOrder, QuantileMode, ScheduleFamily, SelectionMask};

/// Sum-to-one tolerance for [`ProbDist::new`].
pub const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("not a probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("complementary distribution needs at least 2 modalities, got {0}")]
    TooFewModalities(usize),
    #[error("modality index {index} out of range for {count} modalities")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("distributions have different lengths")]
    LengthMismatch,
}

/// Nonnegative vector summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(p: Vec<f64>) -> Result<Self, ObjectiveError> {
        if p.is_empty() {
            return Err(ObjectiveError::InvalidDistribution("empty".into()));
        }
        if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(ObjectiveError::InvalidDistribution(format!("entry {v}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > PROB_TOLERANCE {
            return Err(ObjectiveError::InvalidDistribution(format!("sums to {s}")));
        }
        Ok(ProbDist(p))
    }

    /// Wraps a softmax output without re-validating it.
    pub(crate) fn from_softmax(p: Vec<f64>) -> Self {
        debug_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        ProbDist(p)
    }

    pub fn uniform(classes: usize) -> Self {
        ProbDist(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(classes: usize, k: usize) -> Self {
        let mut p = vec![0.0; classes];
        p[k] = 1.0;
        ProbDist(p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &ProbDist) -> f64 {
    -p.0.iter().map(|v| v * clamped_ln(*v)).sum::<f64>()
}

/// Average of every distribution except the `i`-th.
pub fn complementary(dists: &[ProbDist], i: usize) -> Result<ProbDist, ObjectiveError> {
    let m = dists.len();
    if m < 2 {
        return Err(ObjectiveError::TooFewModalities(m));
    }
    if i >= m {
        return Err(ObjectiveError::IndexOutOfRange { index: i, count: m });
    }
    let c = dists[0].len();
    if dists.iter().any(|d| d.len() != c) {
        return Err(ObjectiveError::LengthMismatch);
    }
    if m == 2 {
        return Ok(dists[1 - i].clone());
    }
    let out = (0..c)
        .map(|k| {
            let others: f64 = dists.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, d)| d.0[k]).sum();
            others / (m - 1) as f64
        })
        .collect();
    Ok(ProbDist(out))
}

/// `KL(p || q)` with clamped logarithms.
pub fn kl_divergence(p: &ProbDist, q: &[f64]) -> f64 {
    p.0.iter()
        .zip(q)
        .map(|(pi, qi)| pi * (clamped_ln(*pi) - clamped_ln(*qi)))
        .sum()
}

/// Divergence of each unimodal prediction from the midpoint of its
/// complementary prediction and the fused prediction.
pub fn mis_loss(p_u1: &ProbDist, p_u2: &ProbDist, p_m: &ProbDist) -> f64 {
    let mid = |a: &ProbDist| -> Vec<f64> { a.0.iter().zip(&p_m.0).map(|(x, y)| 0.5 * (x + y)).collect() };
    kl_divergence(p_u1, &mid(p_u2)) + kl_divergence(p_u2, &mid(p_u1))
}

/// `exp(ent0 - ent)`.
pub fn sample_weight(ent: f64, ent0: f64) -> f64 {
    (ent0 - ent).exp()
}

/// `-sum p ln p` as graph nodes.
pub fn entropy_node(g: &mut Graph, p: NodeId) -> NodeId {
    let lp = g.log(p);
    let plp = g.mul(p, lp);
    let s = g.sum(plp);
    g.neg(s)
}

/// `KL(p || q)` as graph nodes.
pub fn kl_node(g: &mut Graph, p: NodeId, q: NodeId) -> NodeId {
    let lp = g.log(p);
    let lq = g.log(q);
    let diff = g.sub(lp, lq);
    g.dot(p, diff)
}

pub fn mis_node(g: &mut Graph, p_u1: NodeId, p_u2: NodeId, p_m: NodeId) -> NodeId {
    let s1 = g.add(p_u2, p_m);
    let mid1 = g.scale(s1, 0.5);
    let s2 = g.add(p_u1, p_m);
    let mid2 = g.scale(s2, 0.5);
    let a = kl_node(g, p_u1, mid1);
    let b = kl_node(g, p_u2, mid2);
    g.add(a, b)
}

/// `weight * sum_c q_c ln q_c` where `q` is the mean of `p_ms`.
pub fn balance_node(g: &mut Graph, p_ms: &[NodeId], weight: f64) -> Option<NodeId> {
    let total = g.add_all(p_ms)?;
    let q = g.scale(total, 1.0 / p_ms.len() as f64);
    let lq = g.log(q);
    let neg_ent = g.dot(q, lq);
    Some(g.scale(neg_ent, weight))
}

/// Sum of `weight_i * Ent(p_i)` over `(sample, weight)` pairs.
pub fn weighted_entropy_node(g: &mut Graph, nodes: &[SampleNodes], weighted: &[(usize, f64)]) -> Option<NodeId> {
    let terms: Vec<NodeId> = weighted
        .iter()
        .map(|&(i, w)| {
            let e = entropy_node(g, nodes[i].p_m);
            g.scale(e, w)
        })
        .collect();
    g.add_all(&terms)
}

/// Which of the three method components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Components {
    /// Interquartile-range smoothing of the candidate set.
    pub iqr: bool,
    /// Unimodal-entropy condition of the gate. The multimodal entropy
    /// threshold applies either way.
    pub ua: bool,
    /// Mutual-information-sharing term.
    pub mis: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components::ALL
    }
}

impl Components {
    pub const ALL: Components = Components {
        iqr: true,
        ua: true,
        mis: true,
    };
    pub const NONE: Components = Components {
        iqr: false,
        ua: false,
        mis: false,
    };

    /// All 8 on/off combinations, all-off first and all-on last.
    pub fn grid() -> Vec<Components> {
        let mut out = vec![Components::NONE];
        for (iqr, ua, mis) in [
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, false),
            (true, false, true),
            (false, true, true),
        ] {
            out.push(Components { iqr, ua, mis });
        }
        out.push(Components::ALL);
        out
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.iqr, "iqr"), (self.ua, "ua"), (self.mis, "mis")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Whether the stream contains strong shifts (divergence term only early on)
/// or only weak shifts (divergence term throughout).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    Weak,
    Wild,
}

/// Hyperparameters of the adaptation method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Multimodal entropy threshold.
    pub gamma_m: f64,
    /// Threshold on the weighted sum of unimodal entropies.
    pub gamma_u: f64,
    /// Weight of the second modality's entropy in the unimodal sum.
    pub mu: f64,
    /// Weight of the divergence term.
    pub lambda: f64,
    /// Band-fraction floor at `t = 0`.
    pub beta: f64,
    /// Normalization of the sample weight `exp(ent0 - ent)`.
    pub ent0: f64,
    /// Iterations that include the divergence term on wild streams; `None` is `iter / 2`.
    pub t0: Option<usize>,
    /// Total iterations; `None` is the number of batches in the stream.
    pub iter: Option<usize>,
    pub schedule: ScheduleFamily,
    pub quantile_mode: QuantileMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Adds `balance_weight * sum q ln q` over the mean fused prediction.
    pub balance_term: bool,
    /// Placeholder weight, no reference value exists.
    pub balance_weight: f64,
    pub modality_order: ModalityOrder,
    pub components: Components,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig::for_classes(8)
    }
}

impl AdaptConfig {
    /// Defaults with the class-count-dependent thresholds set to `0.4 ln C`.
    pub fn for_classes(classes: usize) -> Self {
        let ln_c = (classes as f64).ln();
        AdaptConfig {
            gamma_m: 0.4 * ln_c,
            gamma_u: (-1.0f64).exp(),
            mu: 1.0,
            lambda: 5.0,
            beta: 0.6,
            ent0: 0.4 * ln_c,
            t0: None,
            iter: None,
            schedule: ScheduleFamily::Linear,
            quantile_mode: QuantileMode::MinmaxInterp,
            learning_rate: 1e-4,
            batch_size: 16,
            balance_term: false,
            balance_weight: 1.0,
            modality_order: ModalityOrder::U1First,
            components: Components::ALL,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let nonneg = [
            ("gamma_m", self.gamma_m),
            ("gamma_u", self.gamma_u),
            ("lambda", self.lambda),
            ("ent0", self.ent0),
            ("mu", self.mu),
        ];
        for (name, v) in nonneg {
            if v.is_nan() || v < 0.0 {
                return Err(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(format!("beta must be in [0, 1], got {}", self.beta));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if let (Some(t0), Some(iter)) = (self.t0, self.iter) {
            if t0 > iter {
                return Err(format!("t0 = {t0} exceeds iter = {iter}"));
            }
        }
        Ok(())
    }

    pub fn t0_for(&self, iter: usize) -> usize {
        self.t0.unwrap_or(iter / 2)
    }

    /// Divergence weight in effect at iteration `t`.
    pub fn effective_lambda(&self, t: usize, iter: usize, mode: AdaptMode) -> f64 {
        if !self.components.mis {
            return 0.0;
        }
        match mode {
            AdaptMode::Weak => self.lambda,
            AdaptMode::Wild if t < self.t0_for(iter) => self.lambda,
            AdaptMode::Wild => 0.0,
        }
    }
}

/// Handles of the objective and its parts inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub entropy: Option<NodeId>,
    pub mis: Option<NodeId>,
    pub balance: Option<NodeId>,
}

/// Sum over selected samples of `alpha * (Ent + lambda_eff * L_mis)`, plus the
/// optional balance term. Weights and the mask enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    nodes: &[SampleNodes],
    entropies: &[Entropies],
    mask: &SelectionMask,
    config: &AdaptConfig,
    t: usize,
    iter: usize,
    mode: AdaptMode,
) -> LossNodes {
    assert_eq!(nodes.len(), mask.len());
    assert_eq!(entropies.len(), mask.len());
    let selected = mask.indices();
    if selected.is_empty() {
        let zero = g.scalar(0.0);
        return LossNodes {
            total: zero,
            entropy: None,
            mis: None,
            balance: None,
        };
    }
    let weights: Vec<(usize, f64)> = selected
        .iter()
        .map(|&i| (i, sample_weight(entropies[i].multimodal, config.ent0)))
        .collect();
    let ent = weighted_entropy_node(g, nodes, &weights).expect("non-empty selection");
    let lambda = config.effective_lambda(t, iter, mode);
    let mis = (lambda != 0.0).then(|| {
        let terms: Vec<NodeId> = weights
            .iter()
            .map(|&(i, w)| {
                let n = &nodes[i];
                let m = mis_node(g, n.p_u1, n.p_u2, n.p_m);
                g.scale(m, w * lambda)
            })
            .collect();
        g.add_all(&terms).expect("non-empty selection")
    });
    let balance = if config.balance_term {
        let p_ms: Vec<NodeId> = selected.iter().map(|&i| nodes[i].p_m).collect();
        balance_node(g, &p_ms, config.balance_weight)
    } else {
        None
    };
    let mut total = ent;
    for extra in [mis, balance].into_iter().flatten() {
        total = g.add(total, extra);
    }
    LossNodes {
        total,
        entropy: Some(ent),
        mis,
        balance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(rng: &mut ChaCha8Rng, c: usize) -> ProbDist {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
        let s: f64 = raw.iter().sum();
        ProbDist::new(raw.into_iter().map(|v| v / s).collect()).unwrap()
    }

    #[test]
    fn entropy_reference_values() {
        assert!((entropy(&ProbDist::uniform(4)) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&ProbDist::one_hot(5, 2)), 0.0);
        // -(0.7 ln 0.7 + 0.3 ln 0.3), 30-digit evaluation: 0.610864302054893...
        let p = ProbDist::new(vec![0.7, 0.3]).unwrap();
        assert!((entropy(&p) - 0.610_864_302_054_893_7).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_maximal_at_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let max = 8f64.ln();
        for _ in 0..1000 {
            let p = random_dist(&mut rng, 8);
            let e = entropy(&p);
            assert!(e <= max + 1e-12);
            let is_uniform = p.as_slice().iter().all(|v| (v - 0.125).abs() < 1e-9);
            assert!(is_uniform || e < max - 1e-9);
        }
        assert!((entropy(&ProbDist::uniform(8)) - max).abs() < 1e-9);
    }

    #[test]
    fn prob_dist_validation() {
        assert!(ProbDist::new(vec![0.5, 0.6]).is_err());
        assert!(ProbDist::new(vec![1.5, -0.5]).is_err());
        assert!(ProbDist::new(vec![]).is_err());
        assert!(ProbDist::new(vec![f64::NAN, 1.0]).is_err());
        assert!(ProbDist::new(vec![0.25; 4]).is_ok());
    }

    #[test]
    fn complementary_of_two_is_the_other() {
        let a = ProbDist::new(vec![0.2, 0.8]).unwrap();
        let b = ProbDist::new(vec![0.6, 0.4]).unwrap();
        let ds = [a.clone(), b.clone()];
        assert_eq!(complementary(&ds, 0).unwrap(), b);
        assert_eq!(complementary(&ds, 1).unwrap(), a);
    }

    #[test]
    fn complementary_of_three_is_the_mean_of_the_others() {
        let a = ProbDist::new(vec![0.2, 0.8]).unwrap();
        let b = ProbDist::new(vec![0.6, 0.4]).unwrap();
        let c = ProbDist::new(vec![0.0, 1.0]).unwrap();
        let out = complementary(&[a, b, c], 0).unwrap();
        assert_eq!(out.as_slice(), &[0.3, 0.7]);
    }

    #[test]
    fn complementary_errors() {
        let a = ProbDist::uniform(3);
        assert_eq!(complementary(&[a.clone()], 0), Err(ObjectiveError::TooFewModalities(1)));
        assert_eq!(
            complementary(&[a.clone(), a], 2),
            Err(ObjectiveError::IndexOutOfRange { index: 2, count: 2 })
        );
    }

    #[test]
    fn mis_reference_values() {
        let p = ProbDist::new(vec![0.1, 0.3, 0.6]).unwrap();
        assert!(mis_loss(&p, &p, &p).abs() <= 1e-12);
        let a = ProbDist::one_hot(2, 0);
        let b = ProbDist::one_hot(2, 1);
        let m = ProbDist::uniform(2);
        // targets (0.25, 0.75) and (0.75, 0.25): 2 * (1 * ln(1 / 0.25))
        assert!((mis_loss(&a, &b, &m) - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sample_weight_reference_values() {
        assert_eq!(sample_weight(0.83, 0.83), 1.0);
        assert!((sample_weight(1.83, 0.83) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((sample_weight(0.83 - 2f64.ln(), 0.83) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sample_weight_is_strictly_decreasing() {
        let grid: Vec<f64> = (0..200).map(|i| i as f64 * 0.01).collect();
        let w: Vec<f64> = grid.iter().map(|e| sample_weight(*e, 0.8)).collect();
        assert!(w.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn effective_lambda_gate() {
        let cfg = AdaptConfig::default();
        assert_eq!(cfg.t0_for(125), 62);
        assert_eq!(cfg.effective_lambda(61, 125, AdaptMode::Wild), 5.0);
        assert_eq!(cfg.effective_lambda(62, 125, AdaptMode::Wild), 0.0);
        assert_eq!(cfg.effective_lambda(124, 125, AdaptMode::Weak), 5.0);
        let off = AdaptConfig {
            components: Components { mis: false, ..Components::ALL },
            ..cfg
        };
        assert_eq!(off.effective_lambda(0, 125, AdaptMode::Weak), 0.0);
    }

    #[test]
    fn default_config_values() {
        let cfg = AdaptConfig::for_classes(8);
        assert!((cfg.gamma_m - 0.4 * 8f64.ln()).abs() < 1e-15);
        assert_eq!(cfg.gamma_m, cfg.ent0);
        assert_eq!(cfg.gamma_u, (-1.0f64).exp());
        assert_eq!((cfg.mu, cfg.lambda, cfg.learning_rate), (1.0, 5.0, 1e-4));
        assert!(!cfg.balance_term);
        cfg.validate().unwrap();
        let bad = AdaptConfig { beta: 1.5, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ablation_grid_has_eight_distinct_rows() {
        let grid = Components::grid();
        assert_eq!(grid.len(), 8);
        assert_eq!(grid[0], Components::NONE);
        assert_eq!(grid[7], Components::ALL);
        let labels: std::collections::BTreeSet<_> = grid.iter().map(Components::label).collect();
        assert_eq!(labels.len(), 8);
    }

    proptest! {
        #[test]
        fn mis_is_nonnegative(seed in 0u64..10_000, c in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, m) = (random_dist(&mut rng, c), random_dist(&mut rng, c), random_dist(&mut rng, c));
            prop_assert!(mis_loss(&a, &b, &m) >= -1e-12);
        }

        #[test]
        fn complementary_is_a_distribution(seed in 0u64..10_000, m in 2usize..6, c in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds: Vec<ProbDist> = (0..m).map(|_| random_dist(&mut rng, c)).collect();
            for i in 0..m {
                let out = complementary(&ds, i).unwrap();
                prop_assert!(ProbDist::new(out.as_slice().to_vec()).is_ok());
            }
        }
    }
}
