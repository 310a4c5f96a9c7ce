//! Dense 64-bit numerics with reverse-mode differentiation over a small,
//! fixed operator set.

mod fd;
mod graph;
mod params;
mod tensor;

pub use fd::{finite_diff_gradient, max_relative_error, relative_error};
pub use graph::{softmax, Bindings, Evaluation, Graph, NodeId, Op, LAYER_NORM_EPS, LOG_EPS};
pub use params::{Param, ParamRole, ParamSet};
pub use tensor::{Shape, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("graph has no designated output")]
    NoOutput,
    #[error("output node {node} has shape {shape}, expected a scalar")]
    NonScalarOutput { node: usize, shape: Shape },
    #[error("node {node} ({op}) is not differentiable but depends on adaptable parameter `{param}`")]
    NonDifferentiable {
        node: usize,
        op: &'static str,
        param: String,
    },
    #[error("evaluation does not match the graph it is used with")]
    StaleEvaluation,
    #[error("parameter `{0}` is frozen")]
    FrozenParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{name}` has shape {expected}, got {found}")]
    ParameterShape {
        name: String,
        expected: Shape,
        found: Shape,
    },
}
