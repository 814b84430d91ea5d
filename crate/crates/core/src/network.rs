//! Networks instantiated from architecture descriptions.
//!
//! A [`Network`] owns its description, vocabulary, class map and
//! parameters. Computation graphs are unrolled on demand for a given
//! number of time steps; the batch size is taken from the bindings.
//!
//! Graph inputs: `ids.{layer}.{t}` for every input layer, `targets.{t}`
//! and `weights.{t}` for the loss, `{layer}.h0` and `{layer}.c0` for the
//! initial recurrent state. Outputs: `logits.{t}` per step and the final
//! state as `{layer}.h` and `{layer}.c`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{self, LayerKind, LayerSpec, NetworkDescription};
use crate::classes::ClassMap;
use crate::error::{Error, Result};
use crate::graph::{Bindings, ComputationGraph, GradientMap, GraphBuilder, Mode, NodeId, ParamStore};
use crate::layers::{self, GruNodes, LstmNodes, RecurrentState};
use crate::tensor::{self, Precision, Tensor};
use crate::vocab::{self, Vocabulary};

/// Upper bound on the number of elements in one parameter tensor.
pub const MAX_PARAMETER_ELEMENTS: usize = 1 << 31;

/// Recurrent state of every recurrent layer, by layer name.
pub type NetworkState = BTreeMap<String, RecurrentState>;

#[derive(Debug, Clone)]
pub struct Network {
    arch_text: String,
    desc: NetworkDescription,
    vocab: Vocabulary,
    classes: ClassMap,
    params: ParamStore,
    widths: BTreeMap<String, usize>,
    precision: Precision,
}

/// One training or scoring sequence of word ids: `targets[t]` is
/// predicted after reading `inputs[..=t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Segment {
    /// `<s> w_1 … w_n` predicting `w_1 … w_n </s>`.
    pub fn framed(words: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(words.len() + 1);
        inputs.push(vocab::START_ID);
        inputs.extend_from_slice(words);
        let mut targets = words.to_vec();
        targets.push(vocab::END_ID);
        Segment { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Splits into consecutive pieces of at most `max_len` steps.
    pub fn windows(&self, max_len: usize) -> Vec<Segment> {
        self.inputs
            .chunks(max_len)
            .zip(self.targets.chunks(max_len))
            .map(|(i, t)| Segment {
                inputs: i.to_vec(),
                targets: t.to_vec(),
            })
            .collect()
    }
}

/// Segments padded to a common length. Padding has zero loss weight; the
/// remaining weights are `1 / N` for `N` real tokens, so the loss is the
/// mean per-token cross-entropy.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    rows: usize,
    steps: usize,
    /// Step-major: `inputs[t * rows + r]`.
    inputs: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<f64>,
    tokens: usize,
}

impl SequenceBatch {
    pub fn new(segments: &[Segment]) -> Result<Self> {
        if segments.is_empty()
            || segments
                .iter()
                .any(|s| s.is_empty() || s.inputs.len() != s.targets.len())
        {
            return Err(Error::InvalidArgument(
                "a batch needs non-empty segments with one target per input".into(),
            ));
        }
        let rows = segments.len();
        let steps = segments.iter().map(Segment::len).max().unwrap();
        let tokens: usize = segments.iter().map(Segment::len).sum();
        let mut inputs = vec![vocab::START_ID; rows * steps];
        let mut targets = vec![vocab::START_ID; rows * steps];
        let mut weights = vec![0.0; rows * steps];
        let w = 1.0 / tokens as f64;
        for (r, seg) in segments.iter().enumerate() {
            for t in 0..seg.len() {
                inputs[t * rows + r] = seg.inputs[t];
                targets[t * rows + r] = seg.targets[t];
                weights[t * rows + r] = w;
            }
        }
        Ok(SequenceBatch {
            rows,
            steps,
            inputs,
            targets,
            weights,
            tokens,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of real (unpadded) tokens.
    pub fn tokens(&self) -> usize {
        self.tokens
    }
}

fn checked_shape(layer: &LayerSpec, dims: &[usize]) -> Result<Vec<usize>> {
    let total = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match total {
        Some(n) if n > 0 && n <= MAX_PARAMETER_ELEMENTS => Ok(dims.to_vec()),
        _ => Err(Error::InvalidArgument(format!(
            "layer '{}' (line {}): parameter of shape {dims:?} exceeds the size limit",
            layer.name, layer.line
        ))),
    }
}

fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let (rows, cols) = (shape[0], shape[1]);
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape checked")
}

impl Network {
    /// Parses, validates and instantiates `arch_text`, which is kept
    /// verbatim.
    pub fn from_text(
        arch_text: &str,
        vocab: Vocabulary,
        classes: Option<ClassMap>,
        seed: u64,
        precision: Precision,
    ) -> Result<Self> {
        let desc = arch::parse_and_validate(arch_text)?;
        Network::build(arch_text.to_string(), desc, vocab, classes, seed, precision)
    }

    /// Instantiates a validated description.
    pub fn from_description(
        desc: &NetworkDescription,
        vocab: Vocabulary,
        classes: Option<ClassMap>,
        seed: u64,
        precision: Precision,
    ) -> Result<Self> {
        let violations = arch::validate_description(desc);
        if !violations.is_empty() {
            return Err(Error::InvalidDescription(violations));
        }
        Network::build(
            arch::serialize_description(desc),
            desc.clone(),
            vocab,
            classes,
            seed,
            precision,
        )
    }

    fn build(
        arch_text: String,
        desc: NetworkDescription,
        vocab: Vocabulary,
        classes: Option<ClassMap>,
        seed: u64,
        precision: Precision,
    ) -> Result<Self> {
        let classes = match classes {
            Some(c) => c,
            None if desc.uses_class_input() => {
                return Err(Error::InvalidArgument("a class_input layer needs a class map".into()))
            }
            None => ClassMap::identity(&vocab),
        };
        if classes.num_words() != vocab.len() {
            return Err(Error::InvalidArgument(format!(
                "class map covers {} words, vocabulary has {}",
                classes.num_words(),
                vocab.len()
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut widths: BTreeMap<String, usize> = BTreeMap::new();
        let num_classes = classes.num_classes();
        for layer in &desc.layers {
            let input_width: usize = layer.inputs.iter().map(|n| widths[n]).sum();
            let width = match layer.kind {
                LayerKind::ClassInput => num_classes,
                LayerKind::WordInput => vocab.len(),
                LayerKind::Projection => {
                    let size = layer.size.expect("validated");
                    let rows = widths[&layer.inputs[0]];
                    let shape = checked_shape(layer, &[rows, size])?;
                    params.insert(format!("{}.E", layer.name), init_uniform(&mut rng, &shape));
                    size
                }
                LayerKind::Lstm => {
                    let size = layer.size.expect("validated");
                    let w = checked_shape(layer, &[input_width, 4 * size])?;
                    let u = checked_shape(layer, &[size, 4 * size])?;
                    params.insert(format!("{}.W", layer.name), init_uniform(&mut rng, &w));
                    params.insert(format!("{}.U", layer.name), init_uniform(&mut rng, &u));
                    let mut b = Tensor::zeros(&[4 * size]);
                    b.data_mut()[size..2 * size].iter_mut().for_each(|x| *x = 1.0);
                    params.insert(format!("{}.b", layer.name), b);
                    size
                }
                LayerKind::Gru => {
                    let size = layer.size.expect("validated");
                    let w = checked_shape(layer, &[input_width, 3 * size])?;
                    let u = checked_shape(layer, &[size, 2 * size])?;
                    let uh = checked_shape(layer, &[size, size])?;
                    params.insert(format!("{}.W", layer.name), init_uniform(&mut rng, &w));
                    params.insert(format!("{}.U", layer.name), init_uniform(&mut rng, &u));
                    params.insert(format!("{}.Uh", layer.name), init_uniform(&mut rng, &uh));
                    params.insert(format!("{}.b", layer.name), Tensor::zeros(&[3 * size]));
                    size
                }
                LayerKind::Tanh | LayerKind::Softmax => {
                    let size = if layer.kind == LayerKind::Softmax {
                        if let Some(s) = layer.size.filter(|&s| s != num_classes) {
                            return Err(Error::InvalidArgument(format!(
                                "softmax layer '{}' (line {}) declares size {s} but the model has {num_classes} classes",
                                layer.name, layer.line
                            )));
                        }
                        num_classes
                    } else {
                        layer.size.expect("validated")
                    };
                    let w = checked_shape(layer, &[input_width, size])?;
                    params.insert(format!("{}.W", layer.name), init_uniform(&mut rng, &w));
                    params.insert(format!("{}.b", layer.name), Tensor::zeros(&[size]));
                    size
                }
                LayerKind::Dropout => {
                    if let Some(s) = layer.size.filter(|&s| s != input_width) {
                        return Err(Error::InvalidArgument(format!(
                            "dropout layer '{}' (line {}) declares size {s} but its input is {input_width} wide",
                            layer.name, layer.line
                        )));
                    }
                    input_width
                }
            };
            widths.insert(layer.name.clone(), width);
        }
        for (_, t) in params.iter_mut() {
            t.round_to(precision);
        }
        Ok(Network {
            arch_text,
            desc,
            vocab,
            classes,
            params,
            widths,
            precision,
        })
    }

    pub fn arch_text(&self) -> &str {
        &self.arch_text
    }

    pub fn description(&self) -> &NetworkDescription {
        &self.desc
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn classes(&self) -> &ClassMap {
        &self.classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Direct parameter access. Values written here are used as given;
    /// call [`Network::round_params`] to restore the storage precision.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameters; names and shapes must match.
    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        let same = params.len() == self.params.len()
            && self
                .params
                .iter()
                .all(|(name, t)| params.get(name).is_some_and(|p| p.same_shape(t)));
        if !same {
            return Err(Error::InvalidArgument(
                "parameter names or shapes do not match the architecture".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn round_params(&mut self) {
        let precision = self.precision;
        for (_, t) in self.params.iter_mut() {
            t.round_to(precision);
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn num_classes(&self) -> usize {
        self.classes.num_classes()
    }

    /// Output width of a layer.
    pub fn layer_width(&self, name: &str) -> Option<usize> {
        self.widths.get(name).copied()
    }

    fn recurrent_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.desc.layers.iter().filter(|l| l.kind.is_recurrent())
    }

    fn input_index(&self, kind: LayerKind, word: usize) -> usize {
        match kind {
            LayerKind::ClassInput => self.classes.class_of(word),
            _ => word,
        }
    }

    /// Unrolled graph over `steps` time steps, with the mean
    /// cross-entropy loss when `with_loss` is set.
    pub fn unrolled_graph(&self, steps: usize, with_loss: bool) -> ComputationGraph {
        let mut g = GraphBuilder::new();
        let mut state: BTreeMap<&str, (NodeId, Option<NodeId>)> = BTreeMap::new();
        for layer in self.recurrent_layers() {
            let h = g.input(format!("{}.h0", layer.name));
            let c = (layer.kind == LayerKind::Lstm).then(|| g.input(format!("{}.c0", layer.name)));
            state.insert(&layer.name, (h, c));
        }
        let mut losses = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut out: BTreeMap<&str, NodeId> = BTreeMap::new();
            for layer in &self.desc.layers {
                let name = layer.name.as_str();
                let param = |g: &mut GraphBuilder, p: &str| g.param(format!("{name}.{p}"));
                let x = if layer.kind.is_input() {
                    None
                } else {
                    Some(g.concat(layer.inputs.iter().map(|i| out[i.as_str()]).collect()))
                };
                let node = match layer.kind {
                    LayerKind::ClassInput | LayerKind::WordInput => g.input(format!("ids.{name}.{t}")),
                    LayerKind::Projection => {
                        let e = param(&mut g, "E");
                        layers::projection_nodes(&mut g, e, x.unwrap())
                    }
                    LayerKind::Lstm => {
                        let nodes = LstmNodes {
                            w: param(&mut g, "W"),
                            u: param(&mut g, "U"),
                            b: param(&mut g, "b"),
                        };
                        let (h, c) = state[name];
                        let size = self.widths[name];
                        let (h, c) = layers::lstm_nodes(&mut g, x.unwrap(), h, c.unwrap(), size, nodes);
                        state.insert(name, (h, Some(c)));
                        h
                    }
                    LayerKind::Gru => {
                        let nodes = GruNodes {
                            w: param(&mut g, "W"),
                            u: param(&mut g, "U"),
                            uh: param(&mut g, "Uh"),
                            b: param(&mut g, "b"),
                        };
                        let size = self.widths[name];
                        let h = layers::gru_nodes(&mut g, x.unwrap(), state[name].0, size, nodes);
                        state.insert(name, (h, None));
                        h
                    }
                    LayerKind::Tanh => {
                        let (w, b) = (param(&mut g, "W"), param(&mut g, "b"));
                        layers::tanh_nodes(&mut g, x.unwrap(), w, b)
                    }
                    LayerKind::Dropout => g.dropout(x.unwrap(), layer.dropout_rate.expect("validated")),
                    LayerKind::Softmax => {
                        let (w, b) = (param(&mut g, "W"), param(&mut g, "b"));
                        layers::affine_nodes(&mut g, x.unwrap(), w, b)
                    }
                };
                if !layer.kind.is_input() {
                    g.label(node, format!("{name}@{t}"));
                }
                out.insert(name, node);
            }
            let logits = out[self.desc.output_layer().name.as_str()];
            g.output(format!("logits.{t}"), logits);
            if with_loss {
                let targets = g.input(format!("targets.{t}"));
                let weights = g.input(format!("weights.{t}"));
                losses.push(g.softmax_cross_entropy(logits, targets, weights));
            }
        }
        for (name, (h, c)) in state {
            g.output(format!("{name}.h"), h);
            if let Some(c) = c {
                g.output(format!("{name}.c"), c);
            }
        }
        if with_loss && !losses.is_empty() {
            let loss = g.add_n(losses);
            g.set_loss(loss);
        }
        g.finish()
    }

    fn state_bindings(&self, bindings: &mut Bindings, rows: usize, initial: Option<&NetworkState>) -> Result<()> {
        for layer in self.recurrent_layers() {
            let size = self.widths[&layer.name];
            let (h, c) = match initial.and_then(|s| s.get(&layer.name)) {
                Some(state) => {
                    if rows != 1 || state.h.len() != size {
                        return Err(Error::Shape(format!("state for layer '{}' does not fit", layer.name)));
                    }
                    (Tensor::row(state.h.clone()), state.c.clone().map(Tensor::row))
                }
                None => (Tensor::zeros(&[rows, size]), Some(Tensor::zeros(&[rows, size]))),
            };
            bindings.insert(format!("{}.h0", layer.name), h);
            if layer.kind == LayerKind::Lstm {
                let c = c.ok_or_else(|| Error::Shape(format!("missing cell state for layer '{}'", layer.name)))?;
                bindings.insert(format!("{}.c0", layer.name), c);
            }
        }
        Ok(())
    }

    fn id_bindings(&self, bindings: &mut Bindings, batch: &SequenceBatch, with_loss: bool) -> Result<()> {
        let rows = batch.rows;
        if let Some(&bad) = batch
            .inputs
            .iter()
            .chain(&batch.targets)
            .find(|&&w| w >= self.vocab.len())
        {
            return Err(Error::InvalidArgument(format!("word id {bad} outside the vocabulary")));
        }
        for t in 0..batch.steps {
            let range = t * rows..(t + 1) * rows;
            for layer in self.desc.input_layers() {
                let ids = batch.inputs[range.clone()]
                    .iter()
                    .map(|&w| self.input_index(layer.kind, w) as f64)
                    .collect();
                bindings.insert(format!("ids.{}.{t}", layer.name), Tensor::vector(ids));
            }
            if with_loss {
                let targets = batch.targets[range.clone()]
                    .iter()
                    .map(|&w| self.classes.class_of(w) as f64)
                    .collect();
                bindings.insert(format!("targets.{t}"), Tensor::vector(targets));
                bindings.insert(format!("weights.{t}"), Tensor::vector(batch.weights[range].to_vec()));
            }
        }
        Ok(())
    }

    /// Graph and bindings computing the mean class cross-entropy of a
    /// batch from zero initial state.
    pub fn training_problem(&self, batch: &SequenceBatch) -> Result<(ComputationGraph, Bindings)> {
        let graph = self.unrolled_graph(batch.steps, true);
        let mut bindings = Bindings::new();
        self.id_bindings(&mut bindings, batch, true)?;
        self.state_bindings(&mut bindings, batch.rows, None)?;
        Ok((graph, bindings))
    }

    /// Mean class cross-entropy of the batch and its gradients.
    pub fn loss_and_gradients(&self, batch: &SequenceBatch, mode: Mode) -> Result<(f64, GradientMap)> {
        let (graph, bindings) = self.training_problem(batch)?;
        let eval = graph.forward(&self.params, &bindings, mode)?;
        let loss = eval.loss().expect("loss node set");
        let grads = graph.backward(&eval)?;
        Ok((loss, grads))
    }

    /// Class log-probabilities at every step of equal-length rows of word
    /// ids, from zero state, without dropout. Result: `[row][t][class]`.
    fn class_log_probs_batch(&self, rows: &[&[usize]]) -> Result<Vec<Vec<Vec<f64>>>> {
        let steps = rows[0].len();
        let segments: Vec<Segment> = rows
            .iter()
            .map(|r| Segment {
                inputs: r.to_vec(),
                targets: r.to_vec(),
            })
            .collect();
        let batch = SequenceBatch::new(&segments)?;
        let graph = self.unrolled_graph(steps, false);
        let mut bindings = Bindings::new();
        self.id_bindings(&mut bindings, &batch, false)?;
        self.state_bindings(&mut bindings, rows.len(), None)?;
        let eval = graph.forward(&self.params, &bindings, Mode::Inference)?;
        let mut out = vec![Vec::with_capacity(steps); rows.len()];
        for t in 0..steps {
            let logits = eval.output(&format!("logits.{t}")).expect("logits output");
            for (r, row_out) in out.iter_mut().enumerate() {
                row_out.push(tensor::log_softmax(logits.row_slice(r)));
            }
        }
        Ok(out)
    }

    /// `log P(target | history)` for every position of every segment,
    /// each segment starting from zero state. Segments are grouped by
    /// length and evaluated in batches of at most `batch_rows`.
    pub fn segment_log_probs(&self, segments: &[Segment], batch_rows: usize) -> Result<Vec<Vec<f64>>> {
        let mut order: Vec<usize> = (0..segments.len()).collect();
        order.sort_by_key(|&i| (segments[i].len(), i));
        let mut result = vec![Vec::new(); segments.len()];
        let mut start = 0;
        while start < order.len() {
            let len = segments[order[start]].len();
            let mut end = start;
            while end < order.len() && end - start < batch_rows.max(1) && segments[order[end]].len() == len {
                end += 1;
            }
            let group = &order[start..end];
            if len == 0 {
                start = end;
                continue;
            }
            let rows: Vec<&[usize]> = group.iter().map(|&i| segments[i].inputs.as_slice()).collect();
            let class_lp = self.class_log_probs_batch(&rows)?;
            for (k, &i) in group.iter().enumerate() {
                result[i] = segments[i]
                    .targets
                    .iter()
                    .enumerate()
                    .map(|(t, &w)| class_lp[k][t][self.classes.class_of(w)] + self.classes.membership(w).ln())
                    .collect();
            }
            start = end;
        }
        Ok(result)
    }

    /// `P(c | <s> history)` over classes.
    pub fn class_distribution(&self, history: &[usize]) -> Result<Vec<f64>> {
        let mut inputs = vec![vocab::START_ID];
        inputs.extend_from_slice(history);
        let lp = self.class_log_probs_batch(&[&inputs])?;
        Ok(lp[0]
            .last()
            .expect("at least one step")
            .iter()
            .map(|x| x.exp())
            .collect())
    }

    /// `P(w | <s> history)` over the whole vocabulary.
    pub fn word_distribution(&self, history: &[usize]) -> Result<Vec<f64>> {
        let class_probs = self.class_distribution(history)?;
        Ok((0..self.vocab.len())
            .map(|w| class_probs[self.classes.class_of(w)] * self.classes.membership(w))
            .collect())
    }

    /// All-zero recurrent state.
    pub fn initial_state(&self) -> NetworkState {
        self.recurrent_layers()
            .map(|l| {
                let size = self.widths[&l.name];
                (l.name.clone(), RecurrentState::zeros(size, l.kind == LayerKind::Lstm))
            })
            .collect()
    }

    /// Reads one word; returns the class distribution for the next
    /// position and the new state.
    pub fn step(&self, state: &NetworkState, word: usize) -> Result<(Vec<f64>, NetworkState)> {
        let batch = SequenceBatch::new(&[Segment {
            inputs: vec![word],
            targets: vec![word],
        }])?;
        let graph = self.unrolled_graph(1, false);
        let mut bindings = Bindings::new();
        self.id_bindings(&mut bindings, &batch, false)?;
        self.state_bindings(&mut bindings, 1, Some(state))?;
        let eval = graph.forward(&self.params, &bindings, Mode::Inference)?;
        let probs = tensor::softmax(eval.output("logits.0").expect("logits").data());
        let next = self
            .recurrent_layers()
            .map(|l| {
                let h = eval
                    .output(&format!("{}.h", l.name))
                    .expect("state output")
                    .data()
                    .to_vec();
                let c = eval.output(&format!("{}.c", l.name)).map(|c| c.data().to_vec());
                (l.name.clone(), RecurrentState { h, c })
            })
            .collect();
        Ok((probs, next))
    }
}

/// Instantiates `desc` for `vocab`; `classes` is required for class
/// inputs and defaults to one class per word otherwise.
pub fn instantiate_network(
    desc: &NetworkDescription,
    vocab: Vocabulary,
    classes: Option<ClassMap>,
    seed: u64,
) -> Result<Network> {
    Network::from_description(desc, vocab, classes, seed, Precision::Double)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::parse_corpus;

    const SMALL: &str = "input type=class name=x\n\
        layer type=projection name=p input=x size=3\n\
        layer type=lstm name=h input=p size=4\n\
        layer type=softmax name=out input=h\n";

    fn small() -> Network {
        let corpus = parse_corpus("a b c\nb c a a");
        let vocab = Vocabulary::build(&corpus, None).unwrap();
        let classes = ClassMap::from_counts(vec![0, 1, 2, 3, 3, 4], vocab.counts()).unwrap();
        Network::from_text(SMALL, vocab, Some(classes), 7, Precision::Double).unwrap()
    }

    #[test]
    fn parameter_shapes() {
        let net = small();
        let p = net.params();
        assert_eq!(p.get("p.E").unwrap().shape(), &[5, 3]);
        assert_eq!(p.get("h.W").unwrap().shape(), &[3, 16]);
        assert_eq!(p.get("h.U").unwrap().shape(), &[4, 16]);
        assert_eq!(&p.get("h.b").unwrap().data()[4..8], &[1.0; 4]);
        assert_eq!(p.get("out.W").unwrap().shape(), &[4, 5]);
        assert_eq!(p.get("out.b").unwrap().shape(), &[5]);
    }

    #[test]
    fn class_input_needs_classes() {
        let vocab = Vocabulary::build(&parse_corpus("a b"), None).unwrap();
        assert!(Network::from_text(SMALL, vocab, None, 1, Precision::Double).is_err());
    }

    #[test]
    fn word_distribution_sums_to_one() {
        let net = small();
        for history in [vec![], vec![3, 4], vec![5, 5, 2]] {
            let total: f64 = net.word_distribution(&history).unwrap().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stepping_matches_unrolled_distribution() {
        let net = small();
        let history = [3, 5, 4];
        let mut state = net.initial_state();
        let mut probs = Vec::new();
        for &w in [vocab::START_ID].iter().chain(&history) {
            let (p, s) = net.step(&state, w).unwrap();
            probs = p;
            state = s;
        }
        let direct = net.class_distribution(&history).unwrap();
        for (a, b) in probs.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn segment_windows() {
        let seg = Segment::framed(&[3, 4, 5]);
        assert_eq!(seg.inputs, vec![0, 3, 4, 5]);
        assert_eq!(seg.targets, vec![3, 4, 5, 1]);
        let parts = seg.windows(3);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[1].inputs, vec![5]);
        assert_eq!(parts[1].targets, vec![1]);
    }

    #[test]
    fn batched_and_single_scores_agree() {
        let net = small();
        let segs = vec![
            Segment::framed(&[3, 4]),
            Segment::framed(&[4, 5]),
            Segment::framed(&[5]),
        ];
        let together = net.segment_log_probs(&segs, 8).unwrap();
        for (i, seg) in segs.iter().enumerate() {
            let alone = net.segment_log_probs(std::slice::from_ref(seg), 1).unwrap();
            assert_eq!(alone[0], together[i]);
        }
    }
}
