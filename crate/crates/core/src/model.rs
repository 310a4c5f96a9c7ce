//! Two-encoder multimodal classifier.
//!
//! Each modality has its own encoder of two `linear -> layer norm -> activation`
//! blocks. The fused head is a single linear layer over the concatenated
//! representations. Unimodal predictions reuse that head with the other
//! representation replaced by zeros.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{Bindings, Evaluation, Graph, NodeId, NumError, ParamRole, ParamSet, Tensor};
use crate::objective::{entropy, ProbDist};

pub const CHECKPOINT_FORMAT: &str = "sumi-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Number of `linear -> norm -> activation` blocks per encoder.
pub const ENCODER_BLOCKS: usize = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("modality {modality} has {found} features, model expects {expected}")]
    DimensionMismatch {
        modality: usize,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dims: [usize; 2],
    pub hidden_dim: usize,
    pub repr_dim: usize,
    pub classes: usize,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_dims: [16, 16],
            hidden_dim: 64,
            repr_dim: 32,
            classes: 8,
            activation: Activation::Relu,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dims.contains(&0) || self.hidden_dim == 0 || self.repr_dim == 0 {
            return Err(ModelError::InvalidSpec("all dimensions must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }
}

/// One test-time input: a feature vector per modality plus an optional domain tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub modalities: [Vec<f64>; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

impl MultimodalSample {
    pub fn new(u1: Vec<f64>, u2: Vec<f64>) -> Self {
        MultimodalSample {
            modalities: [u1, u2],
            domain: None,
        }
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }
}

/// Graph handles of one sample's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SampleNodes {
    pub h_u1: NodeId,
    pub h_u2: NodeId,
    pub h: NodeId,
    pub logits_m: NodeId,
    pub logits_u1: NodeId,
    pub logits_u2: NodeId,
    pub p_m: NodeId,
    pub p_u1: NodeId,
    pub p_u2: NodeId,
}

/// Prediction entropies of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entropies {
    pub multimodal: f64,
    pub u1: f64,
    pub u2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub h_u1: Vec<f64>,
    pub h_u2: Vec<f64>,
    /// `[h_u1, h_u2]`
    pub h: Vec<f64>,
    pub logits_m: Vec<f64>,
    pub logits_u1: Vec<f64>,
    pub logits_u2: Vec<f64>,
    pub p_m: ProbDist,
    pub p_u1: ProbDist,
    pub p_u2: ProbDist,
    pub entropies: Entropies,
}

impl ForwardOutputs {
    /// Argmax of the multimodal prediction, ties going to the lowest class.
    pub fn predicted_class(&self) -> usize {
        argmax(self.p_m.as_slice())
    }

    fn from_eval(eval: &Evaluation, n: &SampleNodes) -> Self {
        let v = |id: NodeId| eval.value(id).data().to_vec();
        let p = |id: NodeId| ProbDist::from_softmax(v(id));
        let (p_m, p_u1, p_u2) = (p(n.p_m), p(n.p_u1), p(n.p_u2));
        let entropies = Entropies {
            multimodal: entropy(&p_m),
            u1: entropy(&p_u1),
            u2: entropy(&p_u2),
        };
        ForwardOutputs {
            h_u1: v(n.h_u1),
            h_u2: v(n.h_u2),
            h: v(n.h),
            logits_m: v(n.logits_m),
            logits_u1: v(n.logits_u1),
            logits_u2: v(n.logits_u2),
            p_m,
            p_u1,
            p_u2,
            entropies,
        }
    }
}

/// First index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
    init_seed: u64,
}

pub fn modality_prefix(modality: usize) -> &'static str {
    match modality {
        0 => "u1",
        1 => "u2",
        _ => panic!("two modalities only"),
    }
}

fn linear_names(modality: usize, block: usize) -> (String, String) {
    let p = modality_prefix(modality);
    (format!("{p}.block{block}.linear.weight"), format!("{p}.block{block}.linear.bias"))
}

fn norm_names(modality: usize, block: usize) -> (String, String) {
    let p = modality_prefix(modality);
    (format!("{p}.block{block}.norm.scale"), format!("{p}.block{block}.norm.shift"))
}

const HEAD_WEIGHT: &str = "head.weight";
const HEAD_BIAS: &str = "head.bias";

impl Model {
    /// Glorot-uniform linear weights, zero biases, unit norm scales and zero shifts.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let linear = |params: &mut ParamSet, rng: &mut ChaCha8Rng, names: (String, String), fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            params.insert(names.0, Tensor::matrix(fan_out, fan_in, w).unwrap(), ParamRole::Frozen);
            params.insert(names.1, Tensor::vector(vec![0.0; fan_out]), ParamRole::Frozen);
        };
        for m in 0..2 {
            for block in 0..ENCODER_BLOCKS {
                let (fan_in, fan_out) = block_dims(&spec, m, block);
                linear(&mut params, &mut rng, linear_names(m, block), fan_in, fan_out);
                let (scale, shift) = norm_names(m, block);
                params.insert(scale, Tensor::vector(vec![1.0; fan_out]), ParamRole::Adaptable);
                params.insert(shift, Tensor::vector(vec![0.0; fan_out]), ParamRole::Adaptable);
            }
        }
        linear(
            &mut params,
            &mut rng,
            (HEAD_WEIGHT.into(), HEAD_BIAS.into()),
            2 * spec.repr_dim,
            spec.classes,
        );
        Ok(Model {
            spec,
            params,
            init_seed: seed,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// All parameters; exactly the normalization scales and shifts are adaptable.
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Same as [`Model::params`]; named for the adaptation call sites.
    pub fn adaptable_params(&self) -> &ParamSet {
        &self.params
    }

    pub fn check_sample(&self, sample: &MultimodalSample) -> Result<(), ModelError> {
        for (m, x) in sample.modalities.iter().enumerate() {
            if x.len() != self.spec.input_dims[m] {
                return Err(ModelError::DimensionMismatch {
                    modality: m + 1,
                    expected: self.spec.input_dims[m],
                    found: x.len(),
                });
            }
        }
        Ok(())
    }

    fn encoder(&self, g: &mut Graph, modality: usize, x: NodeId) -> NodeId {
        let mut cur = x;
        for block in 0..ENCODER_BLOCKS {
            let (w, b) = linear_names(modality, block);
            let (s, t) = norm_names(modality, block);
            let (w, b, s, t) = (g.input(&w), g.input(&b), g.input(&s), g.input(&t));
            let z = g.matvec(w, cur);
            let z = g.add(z, b);
            let n = g.layer_norm(z, s, t);
            cur = match self.spec.activation {
                Activation::Relu => g.relu(n),
                Activation::Tanh => g.tanh(n),
            };
        }
        cur
    }

    fn head(&self, g: &mut Graph, h: NodeId) -> NodeId {
        let (w, b) = (g.input(HEAD_WEIGHT), g.input(HEAD_BIAS));
        let z = g.matvec(w, h);
        g.add(z, b)
    }

    /// Appends one sample's forward pass to `g`. Parameters are graph inputs
    /// named after their [`ParamSet`] entries.
    pub fn build(&self, g: &mut Graph, x_u1: NodeId, x_u2: NodeId) -> SampleNodes {
        let h_u1 = self.encoder(g, 0, x_u1);
        let h_u2 = self.encoder(g, 1, x_u2);
        let h = g.concat(h_u1, h_u2);
        let logits_m = self.head(g, h);
        let zeros = g.constant(Tensor::zeros(crate::numkit::Shape::Vector(self.spec.repr_dim)));
        let only_u1 = g.concat(h_u1, zeros);
        let only_u2 = g.concat(zeros, h_u2);
        let logits_u1 = self.head(g, only_u1);
        let logits_u2 = self.head(g, only_u2);
        SampleNodes {
            h_u1,
            h_u2,
            h,
            logits_m,
            logits_u1,
            logits_u2,
            p_m: g.softmax(logits_m),
            p_u1: g.softmax(logits_u1),
            p_u2: g.softmax(logits_u2),
        }
    }

    pub fn forward(&self, sample: &MultimodalSample) -> Result<ForwardOutputs, ModelError> {
        Ok(self.forward_batch(std::slice::from_ref(sample))?.remove(0))
    }

    pub fn forward_batch(&self, samples: &[MultimodalSample]) -> Result<Vec<ForwardOutputs>, ModelError> {
        let batch = BatchGraph::new(self, samples)?;
        let eval = batch.graph.forward(&batch.bindings(&self.params))?;
        Ok(batch.outputs(&eval))
    }

    /// Multimodal logits with the `u2` representation replaced by `h_u2`.
    pub fn logits_with_representations(&self, h_u1: &[f64], h_u2: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let a = g.input("h_u1");
        let b = g.input("h_u2");
        let h = g.concat(a, b);
        let out = self.head(&mut g, h);
        g.set_output(out);
        let (ta, tb) = (Tensor::vector(h_u1.to_vec()), Tensor::vector(h_u2.to_vec()));
        let mut bind = Bindings::new();
        bind.bind_params(&self.params).bind("h_u1", &ta).bind("h_u2", &tb);
        Ok(g.evaluate(&bind)?.into_data())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            init_seed: self.init_seed,
            params: self.params.clone(),
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| ModelError::Format(e.to_string()))?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| ModelError::Format(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let fresh = Model::new(ckpt.spec.clone(), ckpt.init_seed)?;
        let same_layout = fresh.params.len() == ckpt.params.len()
            && fresh.params.iter().all(|(name, p)| {
                ckpt.params.role(name) == Some(p.role) && ckpt.params.shape_of(name) == Some(p.value.shape())
            });
        if !same_layout {
            return Err(ModelError::Format("parameter layout does not match the model spec".into()));
        }
        Ok(Model {
            spec: ckpt.spec,
            params: ckpt.params,
            init_seed: ckpt.init_seed,
        })
    }
}

fn block_dims(spec: &ModelSpec, modality: usize, block: usize) -> (usize, usize) {
    let fan_in = if block == 0 { spec.input_dims[modality] } else { spec.hidden_dim };
    let fan_out = if block + 1 == ENCODER_BLOCKS { spec.repr_dim } else { spec.hidden_dim };
    (fan_in, fan_out)
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    spec: ModelSpec,
    init_seed: u64,
    params: ParamSet,
}

/// A batch of samples laid out in one graph, with their input tensors.
pub struct BatchGraph {
    pub graph: Graph,
    pub nodes: Vec<SampleNodes>,
    inputs: Vec<(String, Tensor)>,
}

impl BatchGraph {
    pub fn new(model: &Model, samples: &[MultimodalSample]) -> Result<Self, ModelError> {
        let mut graph = Graph::new();
        let mut nodes = Vec::with_capacity(samples.len());
        let mut inputs = Vec::with_capacity(2 * samples.len());
        for (i, s) in samples.iter().enumerate() {
            model.check_sample(s)?;
            let names = [format!("x{i}.u1"), format!("x{i}.u2")];
            let x1 = graph.input(&names[0]);
            let x2 = graph.input(&names[1]);
            nodes.push(model.build(&mut graph, x1, x2));
            for (name, x) in names.into_iter().zip(&s.modalities) {
                inputs.push((name, Tensor::vector(x.clone())));
            }
        }
        Ok(BatchGraph { graph, nodes, inputs })
    }

    pub fn bindings<'a>(&'a self, params: &'a ParamSet) -> Bindings<'a> {
        let mut b = Bindings::new();
        b.bind_params(params);
        for (name, t) in &self.inputs {
            b.bind(name.clone(), t);
        }
        b
    }

    pub fn outputs(&self, eval: &Evaluation) -> Vec<ForwardOutputs> {
        self.nodes.iter().map(|n| ForwardOutputs::from_eval(eval, n)).collect()
    }
}
