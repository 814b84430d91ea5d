//! Layer semantics.
//!
//! The `*_nodes` functions add a layer's computation to a
//! [`GraphBuilder`]; [`Network`](crate::network::Network) unrolls them
//! over time. The remaining functions evaluate one layer on plain vectors
//! by building a small graph from the same node builders.
//!
//! Weight layouts (`in` is the concatenated input width, `H` the layer
//! size):
//!
//! | layer      | parameters                                              |
//! |------------|---------------------------------------------------------|
//! | projection | `E: rows × H`                                           |
//! | lstm       | `W: in × 4H`, `U: H × 4H`, `b: 4H`, gates `i, f, o, ĉ`   |
//! | gru        | `W: in × 3H`, `U: H × 2H`, `Uh: H × H`, `b: 3H` (`z, r, ĥ`) |
//! | tanh       | `W: in × H`, `b: H`                                     |
//! | softmax    | `W: in × classes`, `b: classes`                         |

use std::collections::BTreeMap;

use crate::classes::ClassMap;
use crate::error::{Error, Result};
use crate::graph::{Bindings, GraphBuilder, Mode, NodeId, ParamStore};
use crate::tensor::{self, Tensor};

/// Hidden state of one recurrent layer; `c` is the LSTM cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Option<Vec<f64>>,
}

impl RecurrentState {
    pub fn zeros(size: usize, with_cell: bool) -> Self {
        RecurrentState {
            h: vec![0.0; size],
            c: with_cell.then(|| vec![0.0; size]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub w: NodeId,
    pub u: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct GruNodes {
    pub w: NodeId,
    pub u: NodeId,
    pub uh: NodeId,
    pub b: NodeId,
}

pub fn projection_nodes(g: &mut GraphBuilder, table: NodeId, ids: NodeId) -> NodeId {
    g.gather(table, ids)
}

/// `x · W + b`.
pub fn affine_nodes(g: &mut GraphBuilder, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let xw = g.matmul(x, w);
    g.add_bias(xw, b)
}

pub fn tanh_nodes(g: &mut GraphBuilder, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let pre = affine_nodes(g, x, w, b);
    g.tanh(pre)
}

/// One LSTM step; returns `(h', C')`.
pub fn lstm_nodes(
    g: &mut GraphBuilder,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    size: usize,
    p: LstmNodes,
) -> (NodeId, NodeId) {
    let xw = g.matmul(x, p.w);
    let hu = g.matmul(h, p.u);
    let sum = g.add(xw, hu);
    let pre = g.add_bias(sum, p.b);
    let gate = |g: &mut GraphBuilder, k: usize| g.slice_cols(pre, k * size, size);
    let (i, f, o, cand) = (gate(g, 0), gate(g, 1), gate(g, 2), gate(g, 3));
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let o = g.sigmoid(o);
    let cand = g.tanh(cand);
    let keep = g.mul(f, c);
    let write = g.mul(i, cand);
    let c_next = g.add(keep, write);
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed);
    (h_next, c_next)
}

/// One GRU step; returns `h'`.
pub fn gru_nodes(g: &mut GraphBuilder, x: NodeId, h: NodeId, size: usize, p: GruNodes) -> NodeId {
    let xw = affine_nodes(g, x, p.w, p.b);
    let hu = g.matmul(h, p.u);
    let xz = g.slice_cols(xw, 0, size);
    let xr = g.slice_cols(xw, size, size);
    let xh = g.slice_cols(xw, 2 * size, size);
    let hz = g.slice_cols(hu, 0, size);
    let hr = g.slice_cols(hu, size, size);
    let z = g.add(xz, hz);
    let z = g.sigmoid(z);
    let r = g.add(xr, hr);
    let r = g.sigmoid(r);
    let rh = g.mul(r, h);
    let rhu = g.matmul(rh, p.uh);
    let cand = g.add(xh, rhu);
    let cand = g.tanh(cand);
    // h + z ⊙ (ĥ − h) = (1 − z) ⊙ h + z ⊙ ĥ
    let diff = g.sub(cand, h);
    let step = g.mul(z, diff);
    g.add(h, step)
}

fn row(x: &[f64]) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::Shape("input vector is empty".into()));
    }
    Ok(Tensor::row(x.to_vec()))
}

fn check_dims(what: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::Shape(format!(
            "{what} has shape {:?}, expected {:?}",
            t.shape(),
            expected
        )));
    }
    Ok(())
}

fn eval_one(g: GraphBuilder, params: ParamStore, bindings: Bindings, mode: Mode) -> Result<BTreeMap<String, Tensor>> {
    let graph = g.finish();
    Ok(graph.forward(&params, &bindings, mode)?.outputs())
}

/// Rows of `table` selected by `ids`.
pub fn projection_forward(ids: &[usize], table: &Tensor) -> Result<Vec<Vec<f64>>> {
    if table.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "projection table must be a matrix, got {:?}",
            table.shape()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= table.rows()) {
        return Err(Error::InvalidArgument(format!(
            "id {bad} out of range for a projection with {} rows",
            table.rows()
        )));
    }
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = GraphBuilder::new();
    let e = g.param("E");
    let id_node = g.input("ids");
    let out = projection_nodes(&mut g, e, id_node);
    g.output("y", out);
    let mut params = ParamStore::new();
    params.insert("E", table.clone());
    let mut bindings = Bindings::new();
    bindings.insert("ids".into(), Tensor::vector(ids.iter().map(|&i| i as f64).collect()));
    let y = eval_one(g, params, bindings, Mode::Inference)?.remove("y").unwrap();
    Ok((0..y.rows()).map(|r| y.row_slice(r).to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, size: usize) -> Self {
        LstmParams {
            w: Tensor::zeros(&[input, 4 * size]),
            u: Tensor::zeros(&[size, 4 * size]),
            b: Tensor::zeros(&[4 * size]),
        }
    }
}

pub fn lstm_step(x: &[f64], state: &RecurrentState, p: &LstmParams) -> Result<RecurrentState> {
    let size = state.h.len();
    let cell = state
        .c
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("LSTM state needs a cell vector".into()))?;
    if cell.len() != size || size == 0 {
        return Err(Error::Shape(format!("hidden size {size} but cell size {}", cell.len())));
    }
    check_dims("W", &p.w, &[x.len(), 4 * size])?;
    check_dims("U", &p.u, &[size, 4 * size])?;
    check_dims("b", &p.b, &[4 * size])?;
    let mut g = GraphBuilder::new();
    let nodes = LstmNodes {
        w: g.param("W"),
        u: g.param("U"),
        b: g.param("b"),
    };
    let (xn, hn, cn) = (g.input("x"), g.input("h"), g.input("c"));
    let (h, c) = lstm_nodes(&mut g, xn, hn, cn, size, nodes);
    g.output("h", h);
    g.output("c", c);
    let mut params = ParamStore::new();
    params.insert("W", p.w.clone());
    params.insert("U", p.u.clone());
    params.insert("b", p.b.clone());
    let mut bindings = Bindings::new();
    bindings.insert("x".into(), row(x)?);
    bindings.insert("h".into(), row(&state.h)?);
    bindings.insert("c".into(), row(cell)?);
    let mut out = eval_one(g, params, bindings, Mode::Inference)?;
    Ok(RecurrentState {
        h: out.remove("h").unwrap().into_data(),
        c: Some(out.remove("c").unwrap().into_data()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w: Tensor,
    pub u: Tensor,
    pub uh: Tensor,
    pub b: Tensor,
}

impl GruParams {
    pub fn zeros(input: usize, size: usize) -> Self {
        GruParams {
            w: Tensor::zeros(&[input, 3 * size]),
            u: Tensor::zeros(&[size, 2 * size]),
            uh: Tensor::zeros(&[size, size]),
            b: Tensor::zeros(&[3 * size]),
        }
    }
}

pub fn gru_step(x: &[f64], state: &RecurrentState, p: &GruParams) -> Result<RecurrentState> {
    let size = state.h.len();
    if size == 0 {
        return Err(Error::Shape("GRU state is empty".into()));
    }
    check_dims("W", &p.w, &[x.len(), 3 * size])?;
    check_dims("U", &p.u, &[size, 2 * size])?;
    check_dims("Uh", &p.uh, &[size, size])?;
    check_dims("b", &p.b, &[3 * size])?;
    let mut g = GraphBuilder::new();
    let nodes = GruNodes {
        w: g.param("W"),
        u: g.param("U"),
        uh: g.param("Uh"),
        b: g.param("b"),
    };
    let (xn, hn) = (g.input("x"), g.input("h"));
    let h = gru_nodes(&mut g, xn, hn, size, nodes);
    g.output("h", h);
    let mut params = ParamStore::new();
    params.insert("W", p.w.clone());
    params.insert("U", p.u.clone());
    params.insert("Uh", p.uh.clone());
    params.insert("b", p.b.clone());
    let mut bindings = Bindings::new();
    bindings.insert("x".into(), row(x)?);
    bindings.insert("h".into(), row(&state.h)?);
    let mut out = eval_one(g, params, bindings, Mode::Inference)?;
    Ok(RecurrentState {
        h: out.remove("h").unwrap().into_data(),
        c: None,
    })
}

/// Weights of an affine layer (`tanh` hidden layers and the class softmax).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub w: Tensor,
    pub b: Tensor,
}

fn dense_forward(x: &[f64], p: &DenseParams, squash: bool) -> Result<Vec<f64>> {
    if p.w.shape().len() != 2 {
        return Err(Error::Shape(format!("W must be a matrix, got {:?}", p.w.shape())));
    }
    check_dims("W", &p.w, &[x.len(), p.w.cols()])?;
    check_dims("b", &p.b, &[p.w.cols()])?;
    let mut g = GraphBuilder::new();
    let (w, b, xn) = (g.param("W"), g.param("b"), g.input("x"));
    let y = if squash {
        tanh_nodes(&mut g, xn, w, b)
    } else {
        affine_nodes(&mut g, xn, w, b)
    };
    g.output("y", y);
    let mut params = ParamStore::new();
    params.insert("W", p.w.clone());
    params.insert("b", p.b.clone());
    let mut bindings = Bindings::new();
    bindings.insert("x".into(), row(x)?);
    Ok(eval_one(g, params, bindings, Mode::Inference)?
        .remove("y")
        .unwrap()
        .into_data())
}

/// `tanh(x · W + b)`.
pub fn tanh_layer_forward(x: &[f64], p: &DenseParams) -> Result<Vec<f64>> {
    dense_forward(x, p, true)
}

/// Inverted dropout: identity under [`Mode::Inference`]; in training each
/// element is zeroed with probability `rate` and survivors are scaled by
/// `1 / (1 − rate)`.
pub fn dropout_forward(x: &[f64], rate: f64, mode: Mode) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = GraphBuilder::new();
    let xn = g.input("x");
    let y = g.dropout(xn, rate);
    g.output("y", y);
    let mut bindings = Bindings::new();
    bindings.insert("x".into(), Tensor::vector(x.to_vec()));
    Ok(eval_one(g, ParamStore::new(), bindings, mode)?
        .remove("y")
        .unwrap()
        .into_data())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSoftmaxOutput {
    /// `P(c | history)` for every class.
    pub class_probs: Vec<f64>,
    /// `log P(c(w) | history) + log P(w | c(w))` for the target word.
    pub log_prob: Option<f64>,
}

/// Class distribution for hidden vector `h`, and the factored word
/// log-probability of `target` when given.
pub fn class_softmax_forward(
    h: &[f64],
    p: &DenseParams,
    classes: &ClassMap,
    target: Option<usize>,
) -> Result<ClassSoftmaxOutput> {
    if p.w.shape().len() == 2 && p.w.cols() != classes.num_classes() {
        return Err(Error::Shape(format!(
            "softmax produces {} logits for {} classes",
            p.w.cols(),
            classes.num_classes()
        )));
    }
    if let Some(w) = target {
        if w >= classes.num_words() {
            return Err(Error::InvalidArgument(format!(
                "word id {w} outside the vocabulary of {} words",
                classes.num_words()
            )));
        }
    }
    let logits = dense_forward(h, p, false)?;
    let log_probs = tensor::log_softmax(&logits);
    Ok(ClassSoftmaxOutput {
        class_probs: log_probs.iter().map(|lp| lp.exp()).collect(),
        log_prob: target.map(|w| log_probs[classes.class_of(w)] + classes.membership(w).ln()),
    })
}
