//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of operator nodes; node ids are handed
//! out in construction order, so the node list is already a topological order.
//! Free inputs are named and bound at evaluation time, which keeps evaluation
//! a pure function of `(graph, bindings)`.

use std::collections::{BTreeMap, HashMap};

use super::{NumError, ParamSet, Shape, Tensor};

/// Clamp applied to logarithm arguments.
pub const LOG_EPS: f64 = 1e-12;
/// Variance guard inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Const(Tensor),
    /// Matrix `[r x c]` times vector `[c]`.
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    LayerNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    Softmax(NodeId),
    /// `ln(max(x, LOG_EPS))`, elementwise.
    Log(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Dot(NodeId, NodeId),
    Concat(NodeId, NodeId),
    /// Identity forward, zero gradient.
    Detach(NodeId),
    /// `1` where `x >= threshold`, else `0`. Not differentiable.
    Indicator(NodeId, f64),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::MatVec(..) => "matvec",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Dot(..) => "dot",
            Op::Concat(..) => "concat",
            Op::Detach(_) => "detach",
            Op::Indicator(..) => "indicator",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Const(_) => vec![],
            Op::MatVec(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Dot(a, b)
            | Op::Concat(a, b) => vec![*a, *b],
            Op::LayerNorm { x, scale, shift } => vec![*x, *scale, *shift],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Detach(a)
            | Op::Indicator(a, _) => vec![*a],
        }
    }
}

/// Name → tensor map for the free inputs of a graph.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    map: HashMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    /// Binds every parameter under its own name.
    pub fn bind_params(&mut self, params: &'a ParamSet) -> &mut Self {
        for (name, p) in params.iter() {
            self.map.insert(name.to_string(), &p.value);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// Cached forward values, one per node in graph order.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    inputs: HashMap<String, NodeId>,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0]
    }

    fn push(&mut self, op: Op) -> NodeId {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// Named free input. Declaring the same name twice returns the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        self.push(Op::MatVec(w, x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.push(Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        self.push(Op::LayerNorm { x, scale, shift })
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Dot(a, b))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Concat(a, b))
    }

    pub fn detach(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Detach(a))
    }

    pub fn indicator(&mut self, a: NodeId, threshold: f64) -> NodeId {
        self.push(Op::Indicator(a, threshold))
    }

    /// Sum of a non-empty list of same-shaped nodes.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Option<NodeId> {
        let (&first, rest) = terms.split_first()?;
        Some(rest.iter().fold(first, |acc, &t| self.add(acc, t)))
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Forward value of the designated output.
    pub fn evaluate(&self, bindings: &Bindings<'_>) -> Result<Tensor, NumError> {
        let out = self.output.ok_or(NumError::NoOutput)?;
        let eval = self.forward(bindings)?;
        Ok(eval.values[out.0].clone())
    }

    /// Forward pass over every node, keeping all intermediate values.
    pub fn forward(&self, bindings: &Bindings<'_>) -> Result<Evaluation, NumError> {
        let mut eval = Evaluation {
            values: Vec::with_capacity(self.nodes.len()),
        };
        self.extend(&mut eval, bindings)?;
        Ok(eval)
    }

    /// Evaluates nodes appended since `eval` was produced.
    pub fn extend(&self, eval: &mut Evaluation, bindings: &Bindings<'_>) -> Result<(), NumError> {
        if eval.values.len() > self.nodes.len() {
            return Err(NumError::StaleEvaluation);
        }
        for idx in eval.values.len()..self.nodes.len() {
            let v = self.eval_node(idx, &eval.values, bindings)?;
            eval.values.push(v);
        }
        Ok(())
    }

    fn eval_node(&self, idx: usize, vals: &[Tensor], bindings: &Bindings<'_>) -> Result<Tensor, NumError> {
        let op = &self.nodes[idx];
        let mismatch = |detail: String| NumError::ShapeMismatch {
            node: idx,
            op: op.kind(),
            detail,
        };
        let v = |id: NodeId| &vals[id.0];
        let out = match op {
            Op::Input(name) => bindings
                .get(name)
                .ok_or_else(|| NumError::UnboundInput(name.clone()))?
                .clone(),
            Op::Const(t) => t.clone(),
            Op::MatVec(w, x) => {
                let (w, x) = (v(*w), v(*x));
                let Shape::Matrix(rows, cols) = w.shape() else {
                    return Err(mismatch(format!("left operand {} is not a matrix", w.shape())));
                };
                if x.shape() != Shape::Vector(cols) {
                    return Err(mismatch(format!("cannot multiply {} by {}", w.shape(), x.shape())));
                }
                let xd = x.data();
                let out = w
                    .data()
                    .chunks_exact(cols)
                    .map(|row| row.iter().zip(xd).map(|(a, b)| a * b).sum())
                    .collect::<Vec<f64>>();
                debug_assert_eq!(out.len(), rows);
                Tensor::vector(out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(*a), v(*b));
                if a.shape() != b.shape() {
                    return Err(mismatch(format!("operands {} and {} differ", a.shape(), b.shape())));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                map2(a, b, f)
            }
            Op::Scale(a, k) => map1(v(*a), |x| x * k),
            Op::Relu(a) => map1(v(*a), |x| if x > 0.0 { x } else { 0.0 }),
            Op::Tanh(a) => map1(v(*a), f64::tanh),
            Op::LayerNorm { x, scale, shift } => {
                let (x, g, b) = (v(*x), v(*scale), v(*shift));
                let Shape::Vector(n) = x.shape() else {
                    return Err(mismatch(format!("input {} is not a vector", x.shape())));
                };
                if n == 0 || g.shape() != x.shape() || b.shape() != x.shape() {
                    return Err(mismatch(format!(
                        "input {}, scale {}, shift {}",
                        x.shape(),
                        g.shape(),
                        b.shape()
                    )));
                }
                let (xhat, _) = normalize(x.data());
                Tensor::vector(
                    xhat.iter()
                        .zip(g.data().iter().zip(b.data()))
                        .map(|(h, (g, b))| g * h + b)
                        .collect(),
                )
            }
            Op::Softmax(a) => {
                let a = v(*a);
                if !matches!(a.shape(), Shape::Vector(n) if n > 0) {
                    return Err(mismatch(format!("softmax needs a non-empty vector, got {}", a.shape())));
                }
                Tensor::vector(softmax(a.data()))
            }
            Op::Log(a) => map1(v(*a), |x| x.max(LOG_EPS).ln()),
            Op::Exp(a) => map1(v(*a), f64::exp),
            Op::Sum(a) => Tensor::scalar(v(*a).data().iter().sum()),
            Op::Mean(a) => {
                let a = v(*a);
                if a.is_empty() {
                    return Err(mismatch("mean of an empty tensor".into()));
                }
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            Op::Dot(a, b) => {
                let (a, b) = (v(*a), v(*b));
                if a.shape() != b.shape() {
                    return Err(mismatch(format!("operands {} and {} differ", a.shape(), b.shape())));
                }
                Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
            }
            Op::Concat(a, b) => {
                let (a, b) = (v(*a), v(*b));
                if !matches!(a.shape(), Shape::Vector(_)) || !matches!(b.shape(), Shape::Vector(_)) {
                    return Err(mismatch(format!("cannot concatenate {} and {}", a.shape(), b.shape())));
                }
                let mut d = a.data().to_vec();
                d.extend_from_slice(b.data());
                Tensor::vector(d)
            }
            Op::Detach(a) => v(*a).clone(),
            Op::Indicator(a, th) => map1(v(*a), |x| if x >= *th { 1.0 } else { 0.0 }),
        };
        Ok(out)
    }

    /// Gradient of the scalar output with respect to every adaptable parameter of `wrt`.
    ///
    /// Adaptable parameters that do not appear in the graph get a zero tensor;
    /// frozen parameters get no entry.
    pub fn gradient(&self, eval: &Evaluation, wrt: &ParamSet) -> Result<BTreeMap<String, Tensor>, NumError> {
        let out = self.output.ok_or(NumError::NoOutput)?;
        if eval.values.len() != self.nodes.len() {
            return Err(NumError::StaleEvaluation);
        }
        let out_shape = eval.values[out.0].shape();
        if !out_shape.is_scalar() {
            return Err(NumError::NonScalarOutput {
                node: out.0,
                shape: out_shape,
            });
        }

        let n = out.0 + 1;
        // Nodes that depend on some adaptable parameter.
        let mut requires = vec![false; n];
        for idx in 0..n {
            requires[idx] = match &self.nodes[idx] {
                Op::Input(name) => wrt.is_adaptable(name),
                Op::Const(_) | Op::Detach(_) => false,
                op => op.inputs().iter().any(|i| requires[i.0]),
            };
        }
        // Nodes the output depends on.
        let mut live = vec![false; n];
        live[out.0] = true;
        for idx in (0..n).rev() {
            if live[idx] {
                for i in self.nodes[idx].inputs() {
                    live[i.0] = true;
                }
            }
        }
        for idx in 0..n {
            if live[idx] && requires[idx] {
                if let Op::Indicator(..) = self.nodes[idx] {
                    return Err(NumError::NonDifferentiable {
                        node: idx,
                        op: self.nodes[idx].kind(),
                        param: self.upstream_adaptable(idx, wrt).unwrap_or_default(),
                    });
                }
            }
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[out.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            if !requires[idx] {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.backprop_node(idx, &g, &eval.values, &requires, &mut adj);
            // Inputs keep their adjoint for collection below.
            if let Op::Input(_) = self.nodes[idx] {
                adj[idx] = Some(g);
            }
        }

        let mut grads = BTreeMap::new();
        for (name, value) in wrt.adaptable() {
            let g = self
                .input_id(name)
                .filter(|id| id.0 < n)
                .and_then(|id| adj[id.0].clone())
                .and_then(|d| Tensor::vector(d).reshaped(value.shape()))
                .unwrap_or_else(|| Tensor::zeros(value.shape()));
            grads.insert(name.to_string(), g);
        }
        Ok(grads)
    }

    fn upstream_adaptable(&self, idx: usize, wrt: &ParamSet) -> Option<String> {
        let mut stack = vec![idx];
        let mut seen = vec![false; idx + 1];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            match &self.nodes[i] {
                Op::Input(name) if wrt.is_adaptable(name) => return Some(name.clone()),
                Op::Detach(_) => {}
                op => stack.extend(op.inputs().iter().map(|n| n.0)),
            }
        }
        None
    }

    fn backprop_node(&self, idx: usize, g: &[f64], vals: &[Tensor], requires: &[bool], adj: &mut [Option<Vec<f64>>]) {
        let mut acc = |id: NodeId, contrib: Vec<f64>| {
            if !requires[id.0] {
                return;
            }
            match &mut adj[id.0] {
                Some(a) => a.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                slot => *slot = Some(contrib),
            }
        };
        let v = |id: NodeId| vals[id.0].data();
        match &self.nodes[idx] {
            Op::Input(_) | Op::Const(_) | Op::Detach(_) | Op::Indicator(..) => {}
            Op::MatVec(w, x) => {
                let Shape::Matrix(_, cols) = vals[w.0].shape() else { unreachable!() };
                if requires[w.0] {
                    let xd = v(*x);
                    let mut dw = Vec::with_capacity(g.len() * cols);
                    for gi in g {
                        dw.extend(xd.iter().map(|xj| gi * xj));
                    }
                    acc(*w, dw);
                }
                if requires[x.0] {
                    let mut dx = vec![0.0; cols];
                    for (row, gi) in v(*w).chunks_exact(cols).zip(g) {
                        dx.iter_mut().zip(row).for_each(|(d, wij)| *d += wij * gi);
                    }
                    acc(*x, dx);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (v(*a), v(*b));
                acc(*a, g.iter().zip(bd).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(ad).map(|(g, a)| g * a).collect());
            }
            Op::Scale(a, k) => acc(*a, g.iter().map(|g| g * k).collect()),
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(v(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Tanh(a) => acc(
                *a,
                g.iter()
                    .zip(vals[idx].data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect(),
            ),
            Op::LayerNorm { x, scale, shift } => {
                let (xhat, inv_std) = normalize(v(*x));
                let gamma = v(*scale);
                if requires[scale.0] {
                    acc(*scale, g.iter().zip(&xhat).map(|(g, h)| g * h).collect());
                }
                if requires[shift.0] {
                    acc(*shift, g.to_vec());
                }
                if requires[x.0] {
                    let nf = xhat.len() as f64;
                    let dxhat: Vec<f64> = g.iter().zip(gamma).map(|(g, s)| g * s).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / nf;
                    let mean_dh = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / nf;
                    acc(
                        *x,
                        dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(d, h)| inv_std * (d - mean_d - h * mean_dh))
                            .collect(),
                    );
                }
            }
            Op::Softmax(a) => {
                let y = vals[idx].data();
                let gy: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                acc(*a, g.iter().zip(y).map(|(g, y)| y * (g - gy)).collect());
            }
            Op::Log(a) => acc(
                *a,
                g.iter()
                    .zip(v(*a))
                    .map(|(g, x)| if *x > LOG_EPS { g / x } else { 0.0 })
                    .collect(),
            ),
            Op::Exp(a) => acc(*a, g.iter().zip(vals[idx].data()).map(|(g, y)| g * y).collect()),
            Op::Sum(a) => acc(*a, vec![g[0]; vals[a.0].len()]),
            Op::Mean(a) => {
                let len = vals[a.0].len();
                acc(*a, vec![g[0] / len as f64; len]);
            }
            Op::Dot(a, b) => {
                let (ad, bd) = (v(*a), v(*b));
                acc(*a, bd.iter().map(|b| g[0] * b).collect());
                acc(*b, ad.iter().map(|a| g[0] * a).collect());
            }
            Op::Concat(a, b) => {
                let split = vals[a.0].len();
                acc(*a, g[..split].to_vec());
                acc(*b, g[split..].to_vec());
            }
        }
    }
}

impl Tensor {
    fn reshaped(self, shape: Shape) -> Option<Tensor> {
        if self.len() != shape.len() {
            return None;
        }
        match shape {
            Shape::Vector(_) => Some(Tensor::vector(self.into_data())),
            Shape::Matrix(r, c) => Tensor::matrix(r, c, self.into_data()),
        }
    }
}

fn map1(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = a.clone();
    out.data_mut().iter_mut().for_each(|x| *x = f(*x));
    out
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x = f(*x, *y));
    out
}

/// Standardized values and `1 / sqrt(var + eps)` (population variance).
fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// Max-subtracted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
