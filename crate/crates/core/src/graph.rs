//! Computation graphs with reverse-mode differentiation.
//!
//! A [`ComputationGraph`] is an immutable list of nodes in topological
//! order: a node may only reference nodes created before it. Values live
//! in an [`Evaluation`], so one graph can be evaluated many times (and
//! concurrently) with different bindings and parameter stores.
//!
//! ```
//! use nnlm::graph::{GraphBuilder, Mode, ParamStore, Bindings};
//! use nnlm::Tensor;
//!
//! let mut g = GraphBuilder::new();
//! let x = g.param("x");
//! let sq = g.mul(x, x);
//! let loss = g.sum(sq);
//! g.set_loss(loss);
//! let graph = g.finish();
//!
//! let mut params = ParamStore::new();
//! params.insert("x", Tensor::scalar(3.0));
//! let eval = graph.forward(&params, &Bindings::new(), Mode::Inference).unwrap();
//! let grads = graph.backward(&eval).unwrap();
//! assert_eq!(grads["x"].data(), &[6.0]);
//! ```

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Matrices are `rows × features`; rank-1 tensors
/// count as a single row where an operation works row-wise.
#[derive(Debug, Clone)]
pub enum Op {
    /// Leaf supplied through [`Bindings`].
    Input(String),
    /// Trainable leaf looked up in the [`ParamStore`].
    Parameter(String),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Adds a rank-1 bias to every row.
    AddBias(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Row-wise softmax.
    Softmax(NodeId),
    /// Selects rows of `table` by the integer ids held in `ids`.
    Gather {
        table: NodeId,
        ids: NodeId,
    },
    /// Concatenation along the feature axis.
    Concat(Vec<NodeId>),
    SliceCols {
        input: NodeId,
        start: usize,
        len: usize,
    },
    /// Inverted dropout; identity outside [`Mode::Train`].
    Dropout {
        input: NodeId,
        rate: f64,
    },
    /// `Σ_r weights[r] · −log softmax(logits[r])[targets[r]]`, a scalar.
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: NodeId,
        weights: NodeId,
    },
    /// Sum of all elements, a scalar.
    Sum(NodeId),
    AddN(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Parameter(_) => "parameter",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::Gather { .. } => "gather",
            Op::Concat(_) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
            Op::AddN(_) => "add_n",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Parameter(_) | Op::Constant(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Sigmoid(a) | Op::Tanh(a) | Op::Softmax(a) | Op::Sum(a) => vec![*a],
            Op::Gather { table, ids } => vec![*table, *ids],
            Op::Concat(xs) | Op::AddN(xs) => xs.clone(),
            Op::SliceCols { input, .. } | Op::Dropout { input, .. } => vec![*input],
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
            } => vec![*logits, *targets, *weights],
        }
    }

    /// Inputs through which gradients flow.
    fn differentiable_inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Gather { table, .. } => vec![*table],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            other => other.inputs(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// Named trainable tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Values for [`Op::Input`] leaves, keyed by input name.
pub type Bindings = BTreeMap<String, Tensor>;

/// `∂loss/∂parameter` for every parameter referenced by a graph.
pub type GradientMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout is the identity.
    Inference,
    /// Dropout masks are drawn from a ChaCha8 stream seeded with `seed`,
    /// in node order.
    Train { seed: u64 },
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    loss: Option<NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for input in op.inputs() {
            assert!(
                input.0 < self.nodes.len(),
                "node {} referenced before it was created",
                input.0
            );
        }
        self.nodes.push(Node { op, label: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Label a node for diagnostics.
    pub fn label(&mut self, node: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[node.0].label = Some(label.into());
        node
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        let name = name.into();
        if let Some(&id) = self.inputs.get(&name) {
            return id;
        }
        let id = self.push(Op::Input(name.clone()));
        self.nodes[id.0].label = Some(name.clone());
        self.inputs.insert(name, id);
        id
    }

    /// A trainable parameter; repeated calls with one name share a node.
    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        let name = name.into();
        if let Some(&id) = self.params.get(&name) {
            return id;
        }
        let id = self.push(Op::Parameter(name.clone()));
        self.nodes[id.0].label = Some(name.clone());
        self.params.insert(name, id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
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

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(x, bias))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn gather(&mut self, table: NodeId, ids: NodeId) -> NodeId {
        self.push(Op::Gather { table, ids })
    }

    pub fn concat(&mut self, xs: Vec<NodeId>) -> NodeId {
        assert!(!xs.is_empty(), "concat needs at least one input");
        if xs.len() == 1 {
            return xs[0];
        }
        self.push(Op::Concat(xs))
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols { input, start, len })
    }

    pub fn dropout(&mut self, input: NodeId, rate: f64) -> NodeId {
        self.push(Op::Dropout { input, rate })
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId, weights: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy {
            logits,
            targets,
            weights,
        })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn add_n(&mut self, xs: Vec<NodeId>) -> NodeId {
        assert!(!xs.is_empty(), "add_n needs at least one input");
        if xs.len() == 1 {
            return xs[0];
        }
        self.push(Op::AddN(xs))
    }

    pub fn output(&mut self, name: impl Into<String>, node: NodeId) {
        self.outputs.insert(name.into(), node);
    }

    pub fn set_loss(&mut self, node: NodeId) {
        self.loss = Some(node);
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn finish(self) -> ComputationGraph {
        let mut requires_grad = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            requires_grad[i] = match &node.op {
                Op::Parameter(_) => true,
                op => op.differentiable_inputs().iter().any(|j| requires_grad[j.0]),
            };
        }
        ComputationGraph {
            nodes: self.nodes,
            params: self.params,
            inputs: self.inputs,
            outputs: self.outputs,
            loss: self.loss,
            requires_grad,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComputationGraph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    loss: Option<NodeId>,
    requires_grad: Vec<bool>,
}

/// Per-evaluation workspace holding every node's value.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
    /// Dropout masks and cross-entropy probabilities, per node.
    aux: Vec<Option<Vec<f64>>>,
    outputs: BTreeMap<String, NodeId>,
    loss: Option<NodeId>,
}

impl Evaluation {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.get(name).map(|id| &self.values[id.0])
    }

    pub fn outputs(&self) -> BTreeMap<String, Tensor> {
        self.outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.values[id.0].clone()))
            .collect()
    }

    pub fn loss(&self) -> Option<f64> {
        self.loss.map(|id| self.values[id.0].data()[0])
    }
}

impl ComputationGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &String> {
        self.inputs.keys()
    }

    pub fn loss_node(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.label {
            Some(label) => format!("'{label}' (#{} {})", id.0, node.op.name()),
            None => format!("#{} {}", id.0, node.op.name()),
        }
    }

    fn shape_error(&self, id: NodeId, message: String) -> Error {
        Error::Node {
            node: self.describe(id),
            message,
        }
    }

    /// Evaluates every node.
    pub fn forward(&self, params: &ParamStore, bindings: &Bindings, mode: Mode) -> Result<Evaluation> {
        let mut rng = match mode {
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Mode::Inference => None,
        };
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut aux: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let (value, extra) = self.eval_node(id, &node.op, &values, params, bindings, rng.as_mut())?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: self.describe(id),
                });
            }
            values.push(value);
            aux.push(extra);
        }
        if let Some(loss) = self.loss {
            if values[loss.0].len() != 1 {
                return Err(self.shape_error(
                    loss,
                    format!("loss must be a scalar, got shape {:?}", values[loss.0].shape()),
                ));
            }
        }
        Ok(Evaluation {
            values,
            aux,
            outputs: self.outputs.clone(),
            loss: self.loss,
        })
    }

    fn eval_node(
        &self,
        id: NodeId,
        op: &Op,
        values: &[Tensor],
        params: &ParamStore,
        bindings: &Bindings,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Option<Vec<f64>>)> {
        let v = |n: &NodeId| &values[n.0];
        let out = match op {
            Op::Input(name) => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| self.shape_error(id, format!("no binding for input '{name}'")))?,
            Op::Parameter(name) => params
                .get(name)
                .cloned()
                .ok_or_else(|| self.shape_error(id, format!("parameter '{name}' missing from store")))?,
            Op::Constant(t) => t.clone(),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(self.shape_error(id, format!("cannot multiply {:?} by {:?}", a.shape(), b.shape())));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Tensor::new(vec![m, n], tensor::matmul(a.data(), b.data(), m, k, n))?
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(a), v(b));
                if !a.same_shape(b) {
                    return Err(
                        self.shape_error(id, format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()))
                    );
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::AddBias(x, bias) => {
                let (x, bias) = (v(x), v(bias));
                let cols = x.cols();
                if bias.shape() != [cols] {
                    return Err(self.shape_error(
                        id,
                        format!("bias {:?} does not match rows of {:?}", bias.shape(), x.shape()),
                    ));
                }
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(cols) {
                    for (o, b) in row.iter_mut().zip(bias.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Sigmoid(x) => v(x).map(tensor::sigmoid),
            Op::Tanh(x) => v(x).map(f64::tanh),
            Op::Softmax(x) => {
                let x = v(x);
                let data = x.data().chunks(x.cols()).flat_map(tensor::softmax).collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
            Op::Gather { table, ids } => {
                let (table, ids) = (v(table), v(ids));
                if table.shape().len() != 2 {
                    return Err(self.shape_error(id, format!("gather table must be a matrix, got {:?}", table.shape())));
                }
                let rows = table.shape()[0];
                let width = table.shape()[1];
                let mut data = Vec::with_capacity(ids.len() * width);
                for &raw in ids.data() {
                    let row = index_value(raw, rows).map_err(|m| self.shape_error(id, m))?;
                    data.extend_from_slice(table.row_slice(row));
                }
                Tensor::new(vec![ids.len(), width], data)?
            }
            Op::Concat(xs) => {
                let rows = v(&xs[0]).rows();
                let mut widths = Vec::with_capacity(xs.len());
                for x in xs {
                    let t = v(x);
                    if t.rows() != rows {
                        return Err(self.shape_error(
                            id,
                            format!(
                                "concatenated inputs have different row counts: {:?} vs {:?}",
                                v(&xs[0]).shape(),
                                t.shape()
                            ),
                        ));
                    }
                    widths.push(t.cols());
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for x in xs {
                        data.extend_from_slice(v(x).row_slice(r));
                    }
                }
                Tensor::new(vec![rows, total], data)?
            }
            Op::SliceCols { input, start, len } => {
                let x = v(input);
                let (rows, cols) = x.as_matrix_dims();
                if start + len > cols || *len == 0 {
                    return Err(self.shape_error(
                        id,
                        format!("column slice {start}..{} out of range for {:?}", start + len, x.shape()),
                    ));
                }
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    data.extend_from_slice(&x.row_slice(r)[*start..start + len]);
                }
                Tensor::new(vec![rows, *len], data)?
            }
            Op::Dropout { input, rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(self.shape_error(id, format!("dropout rate {rate} outside [0, 1)")));
                }
                let x = v(input);
                match rng {
                    None => x.clone(),
                    Some(rng) => {
                        let scale = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..x.len())
                            .map(|_| if rng.random::<f64>() >= *rate { scale } else { 0.0 })
                            .collect();
                        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
                        return Ok((Tensor::new(x.shape().to_vec(), data)?, Some(mask)));
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let (logits, targets, weights) = (v(logits), v(targets), v(weights));
                let (rows, cols) = logits.as_matrix_dims();
                if targets.len() != rows || weights.len() != rows {
                    return Err(self.shape_error(
                        id,
                        format!(
                            "logits {:?} need {rows} targets and weights, got {} and {}",
                            logits.shape(),
                            targets.len(),
                            weights.len()
                        ),
                    ));
                }
                let mut probs = Vec::with_capacity(rows * cols);
                let mut total = 0.0;
                for r in 0..rows {
                    let target = index_value(targets.data()[r], cols).map_err(|m| self.shape_error(id, m))?;
                    let logp = tensor::log_softmax(logits.row_slice(r));
                    total -= weights.data()[r] * logp[target];
                    probs.extend(logp.iter().map(|lp| lp.exp()));
                }
                return Ok((Tensor::scalar(total), Some(probs)));
            }
            Op::Sum(x) => Tensor::scalar(v(x).sum()),
            Op::AddN(xs) => {
                let mut out = v(&xs[0]).clone();
                for x in &xs[1..] {
                    let t = v(x);
                    if !t.same_shape(&out) {
                        return Err(self.shape_error(
                            id,
                            format!("operand shapes differ: {:?} vs {:?}", out.shape(), t.shape()),
                        ));
                    }
                    out.add_assign(t);
                }
                out
            }
        };
        Ok((out, None))
    }

    /// Reverse-mode gradients of the loss with respect to every parameter
    /// referenced by the graph. Parameters the loss does not depend on get
    /// zero tensors.
    pub fn backward(&self, eval: &Evaluation) -> Result<GradientMap> {
        let loss = self
            .loss
            .ok_or_else(|| Error::Graph("no loss node designated".into()))?;
        if eval.values.len() != self.nodes.len() {
            return Err(Error::Graph(format!(
                "forward values missing: evaluation holds {} values for {} nodes",
                eval.values.len(),
                self.nodes.len()
            )));
        }
        let values = &eval.values;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(values[loss.0].shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            let op = &self.nodes[i].op;
            let needs = |n: &NodeId| self.requires_grad[n.0];
            match op {
                Op::Input(_) | Op::Constant(_) => {}
                Op::Parameter(_) => {
                    grads[i] = Some(grad);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&values[a.0], &values[b.0]);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if needs(a) {
                        let da = tensor::matmul_a_bt(grad.data(), tb.data(), m, n, k);
                        accumulate(&mut grads, *a, Tensor::new(vec![m, k], da)?);
                    }
                    if needs(b) {
                        let db = tensor::matmul_at_b(ta.data(), grad.data(), m, k, n);
                        accumulate(&mut grads, *b, Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads, *a, grad.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads, *b, grad);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads, *a, grad.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads, *b, grad.map(|g| -g));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads, *a, elementwise(&grad, &values[b.0], |g, y| g * y));
                    }
                    if needs(b) {
                        accumulate(&mut grads, *b, elementwise(&grad, &values[a.0], |g, x| g * x));
                    }
                }
                Op::AddBias(x, bias) => {
                    if needs(bias) {
                        let cols = grad.cols();
                        let mut db = vec![0.0; cols];
                        for row in grad.data().chunks(cols) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        accumulate(&mut grads, *bias, Tensor::vector(db));
                    }
                    if needs(x) {
                        accumulate(&mut grads, *x, grad);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &values[i];
                    accumulate(&mut grads, *x, elementwise(&grad, y, |g, s| g * s * (1.0 - s)));
                }
                Op::Tanh(x) => {
                    let y = &values[i];
                    accumulate(&mut grads, *x, elementwise(&grad, y, |g, t| g * (1.0 - t * t)));
                }
                Op::Softmax(x) => {
                    let y = &values[i];
                    let cols = y.cols();
                    let mut dx = Vec::with_capacity(y.len());
                    for (p, g) in y.data().chunks(cols).zip(grad.data().chunks(cols)) {
                        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                        dx.extend(p.iter().zip(g).map(|(pj, gj)| pj * (gj - dot)));
                    }
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::Gather { table, ids } => {
                    let shape = values[table.0].shape().to_vec();
                    let width = shape[1];
                    let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    let dst = slot.data_mut();
                    for (r, &raw) in values[ids.0].data().iter().enumerate() {
                        let row = raw as usize;
                        let src = &grad.data()[r * width..(r + 1) * width];
                        for (d, s) in dst[row * width..(row + 1) * width].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Op::Concat(xs) => {
                    let rows = grad.rows();
                    let total = grad.cols();
                    let mut offset = 0;
                    for x in xs {
                        let t = &values[x.0];
                        let w = t.cols();
                        if needs(x) {
                            let mut dx = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                dx.extend_from_slice(&grad.data()[r * total + offset..r * total + offset + w]);
                            }
                            accumulate(&mut grads, *x, Tensor::new(t.shape().to_vec(), dx)?);
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { input, start, len } => {
                    let shape = values[input.0].shape().to_vec();
                    let cols = values[input.0].cols();
                    let slot = grads[input.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    let dst = slot.data_mut();
                    for (r, g) in grad.data().chunks(*len).enumerate() {
                        for (d, s) in dst[r * cols + start..r * cols + start + len].iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
                Op::Dropout { input, .. } => {
                    let dx = match &eval.aux[i] {
                        Some(mask) => {
                            let data = grad.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                            Tensor::new(grad.shape().to_vec(), data)?
                        }
                        None => grad,
                    };
                    accumulate(&mut grads, *input, dx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    weights,
                } => {
                    let g = grad.data()[0];
                    let probs = eval.aux[i]
                        .as_ref()
                        .ok_or_else(|| Error::Graph("cross-entropy probabilities missing".into()))?;
                    let t = &values[logits.0];
                    let cols = t.cols();
                    let mut dx = probs.clone();
                    for (r, row) in dx.chunks_mut(cols).enumerate() {
                        let w = values[weights.0].data()[r];
                        let target = values[targets.0].data()[r] as usize;
                        row[target] -= 1.0;
                        for d in row.iter_mut() {
                            *d *= g * w;
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(t.shape().to_vec(), dx)?);
                }
                Op::Sum(x) => {
                    let g = grad.data()[0];
                    accumulate(&mut grads, *x, Tensor::filled(values[x.0].shape(), g));
                }
                Op::AddN(xs) => {
                    for x in xs {
                        if needs(x) {
                            accumulate(&mut grads, *x, grad.clone());
                        }
                    }
                }
            }
        }

        let mut out = GradientMap::new();
        for (name, id) in &self.params {
            let grad = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(values[id.0].shape()));
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], node: NodeId, grad: Tensor) {
    match &mut grads[node.0] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => *slot = Some(grad),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("operands share a shape")
}

fn index_value(raw: f64, bound: usize) -> std::result::Result<usize, String> {
    if raw < 0.0 || raw.fract() != 0.0 || raw >= bound as f64 {
        return Err(format!("index {raw} out of range 0..{bound}"));
    }
    Ok(raw as usize)
}

/// Evaluates the graph and returns its designated outputs by name.
pub fn forward_eval(
    graph: &ComputationGraph,
    params: &ParamStore,
    bindings: &Bindings,
    mode: Mode,
) -> Result<BTreeMap<String, Tensor>> {
    Ok(graph.forward(params, bindings, mode)?.outputs())
}

/// Compares the analytic gradient of `param` against central differences
/// and returns the maximum over elements of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// The numeric derivative is the Richardson extrapolation
/// `(4 D(step/2) − D(step)) / 3` of central differences
/// `D(h) = (L(θ+h) − L(θ−h)) / 2h`, accurate to O(step⁴).
pub fn finite_difference_check(
    graph: &ComputationGraph,
    params: &ParamStore,
    bindings: &Bindings,
    mode: Mode,
    param: &str,
    step: f64,
) -> Result<f64> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive and finite, got {step}"
        )));
    }
    if !graph.params.contains_key(param) {
        return Err(Error::InvalidArgument(format!(
            "'{param}' is not a parameter of the graph"
        )));
    }
    let eval = graph.forward(params, bindings, mode)?;
    let analytic = graph.backward(&eval)?.remove(param).expect("parameter present");

    let loss_at = |store: &ParamStore| -> Result<f64> {
        let loss = graph
            .forward(store, bindings, mode)?
            .loss()
            .ok_or_else(|| Error::Graph("no loss node designated".into()))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                node: "loss (finite-difference perturbation)".into(),
            });
        }
        Ok(loss)
    };

    let mut store = params.clone();
    let mut worst: f64 = 0.0;
    for k in 0..analytic.len() {
        let original = store.get(param).expect("parameter present").data()[k];
        let mut central = |h: f64| -> Result<f64> {
            store.get_mut(param).unwrap().data_mut()[k] = original + h;
            let plus = loss_at(&store)?;
            store.get_mut(param).unwrap().data_mut()[k] = original - h;
            let minus = loss_at(&store)?;
            store.get_mut(param).unwrap().data_mut()[k] = original;
            Ok((plus - minus) / (2.0 * h))
        };
        let coarse = central(step)?;
        let fine = central(step / 2.0)?;
        let numeric = (4.0 * fine - coarse) / 3.0;
        let a = analytic.data()[k];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_single(
        build: impl FnOnce(&mut GraphBuilder) -> NodeId,
        params: &ParamStore,
        bindings: &Bindings,
    ) -> Tensor {
        let mut g = GraphBuilder::new();
        let out = build(&mut g);
        g.output("y", out);
        let graph = g.finish();
        forward_eval(&graph, params, bindings, Mode::Inference).unwrap()["y"].clone()
    }

    #[test]
    fn identity_matmul() {
        let mut params = ParamStore::new();
        params.insert("A", Tensor::identity(2));
        let mut bindings = Bindings::new();
        bindings.insert("x".into(), Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let y = eval_single(
            |g| {
                let a = g.param("A");
                let x = g.input("x");
                g.matmul(a, x)
            },
            &params,
            &bindings,
        );
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = eval_single(
            |g| {
                let z = g.constant(Tensor::zeros(&[3]));
                g.softmax(z)
            },
            &ParamStore::new(),
            &Bindings::new(),
        );
        for p in y.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_of_zero() {
        let y = eval_single(
            |g| {
                let z = g.constant(Tensor::scalar(0.0));
                g.sigmoid(z)
            },
            &ParamStore::new(),
            &Bindings::new(),
        );
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut g = GraphBuilder::new();
        let x = g.param("x");
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        g.set_loss(loss);
        let graph = g.finish();
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(3.0));
        let eval = graph.forward(&params, &Bindings::new(), Mode::Inference).unwrap();
        assert_eq!(eval.loss(), Some(9.0));
        assert_eq!(graph.backward(&eval).unwrap()["x"].data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_gradient_vanishes_at_certain_target() {
        // logits so extreme that softmax rounds to exactly one-hot
        let mut g = GraphBuilder::new();
        let logits = g.param("logits");
        let t = g.constant(Tensor::vector(vec![1.0]));
        let w = g.constant(Tensor::vector(vec![1.0]));
        let loss = g.softmax_cross_entropy(logits, t, w);
        g.set_loss(loss);
        let graph = g.finish();
        let mut params = ParamStore::new();
        params.insert("logits", Tensor::row(vec![-800.0, 800.0, -800.0]));
        let eval = graph.forward(&params, &Bindings::new(), Mode::Inference).unwrap();
        assert_eq!(eval.loss(), Some(0.0));
        let grad = &graph.backward(&eval).unwrap()["logits"];
        assert!(grad.data().iter().all(|&d| d == 0.0), "{grad:?}");
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut g = GraphBuilder::new();
        let used = g.param("used");
        let unused = g.param("unused");
        let _dead = g.tanh(unused);
        let loss = g.sum(used);
        g.set_loss(loss);
        let graph = g.finish();
        let mut params = ParamStore::new();
        params.insert("used", Tensor::vector(vec![1.0, 2.0]));
        params.insert("unused", Tensor::vector(vec![5.0, 6.0, 7.0]));
        let eval = graph.forward(&params, &Bindings::new(), Mode::Inference).unwrap();
        let grads = graph.backward(&eval).unwrap();
        assert_eq!(grads["unused"], Tensor::zeros(&[3]));
        assert_eq!(grads["used"].data(), &[1.0, 1.0]);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = GraphBuilder::new();
        let a = g.param("a");
        let b = g.param("b");
        let c = g.add(a, b);
        g.label(c, "sum_ab");
        let graph = g.finish();
        let mut params = ParamStore::new();
        params.insert("a", Tensor::vector(vec![1.0, 2.0]));
        params.insert("b", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = graph.forward(&params, &Bindings::new(), Mode::Inference).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("sum_ab") && msg.contains("[2]") && msg.contains("[3]"),
            "{msg}"
        );
    }

    #[test]
    fn non_finite_value_names_first_node() {
        let mut g = GraphBuilder::new();
        let a = g.param("a");
        let b = g.mul(a, a);
        g.label(b, "square");
        let c = g.mul(b, b);
        g.label(c, "fourth");
        let graph = g.finish();
        let mut params = ParamStore::new();
        params.insert("a", Tensor::scalar(1e200));
        let err = graph.forward(&params, &Bindings::new(), Mode::Inference).unwrap_err();
        assert!(err.to_string().contains("square"), "{err}");
    }

    #[test]
    fn backward_requires_loss() {
        let mut g = GraphBuilder::new();
        let a = g.param("a");
        g.output("a", a);
        let graph = g.finish();
        let mut params = ParamStore::new();
        params.insert("a", Tensor::scalar(1.0));
        let eval = graph.forward(&params, &Bindings::new(), Mode::Inference).unwrap();
        assert!(matches!(graph.backward(&eval), Err(Error::Graph(_))));
    }

    #[test]
    fn linear_map_finite_differences_are_exact() {
        let mut g = GraphBuilder::new();
        let w = g.param("w");
        let x = g.input("x");
        let y = g.matmul(x, w);
        let loss = g.sum(y);
        g.set_loss(loss);
        let graph = g.finish();
        let mut params = ParamStore::new();
        params.insert("w", Tensor::matrix(3, 1, vec![0.3, -1.7, 2.5]).unwrap());
        let mut bindings = Bindings::new();
        bindings.insert("x".into(), Tensor::row(vec![1.5, -0.25, 4.0]));
        let err = finite_difference_check(&graph, &params, &bindings, Mode::Inference, "w", 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
        assert!(matches!(
            finite_difference_check(&graph, &params, &bindings, Mode::Inference, "w", 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn dropout_is_identity_in_inference_and_deterministic_in_training() {
        let mut g = GraphBuilder::new();
        let x = g.input("x");
        let d = g.dropout(x, 0.5);
        g.output("d", d);
        let graph = g.finish();
        let mut bindings = Bindings::new();
        let input = Tensor::vector((0..64).map(|i| i as f64 + 1.0).collect());
        bindings.insert("x".into(), input.clone());
        let params = ParamStore::new();
        let inference = forward_eval(&graph, &params, &bindings, Mode::Inference).unwrap();
        assert_eq!(inference["d"], input);
        let a = forward_eval(&graph, &params, &bindings, Mode::Train { seed: 7 }).unwrap();
        let b = forward_eval(&graph, &params, &bindings, Mode::Train { seed: 7 }).unwrap();
        assert_eq!(a, b);
        assert!(a["d"].data().contains(&0.0));
    }
}
