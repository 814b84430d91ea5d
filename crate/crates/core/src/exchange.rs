//! Word clustering by the exchange algorithm.
//!
//! The objective is the maximum-likelihood log-probability of a class
//! bigram model `P(c(w_t) | c(w_{t-1})) · P(w_t | c(w_t))` on the training
//! sequences, computed from counts:
//!
//! ```text
//! F = Σ_{c1,c2} f(N(c1,c2)) − Σ_c f(Npred(c)) − Σ_c f(Nsucc(c)) + Σ_w f(Nsucc(w))
//! ```
//!
//! with `f(x) = x ln x`. `Npred(c)` counts class `c` in predecessor
//! position and `Nsucc(c)` in successor position; for words inside a
//! sentence the two coincide, so the class terms reduce to
//! `−2 Σ_c N(c) ln N(c)` everywhere except at sentence boundaries.
//!
//! Moving a word between classes only changes the rows and columns of
//! the two classes involved, so move deltas are computed from the word's
//! neighbour-class counts without a full recount.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classes::ClassMap;
use crate::error::{Error, Result};
use crate::vocab::{self, Corpus, Vocabulary, NUM_RESERVED};

/// Improvements at or below this are not accepted as moves.
const MIN_GAIN: f64 = 1e-9;

#[inline]
fn xlogx(x: i64) -> f64 {
    if x <= 0 {
        0.0
    } else {
        let x = x as f64;
        x * x.ln()
    }
}

/// Count tables for the class bigram objective under one class assignment.
#[derive(Debug, Clone)]
pub struct BigramStats {
    num_classes: usize,
    class_of: Vec<usize>,
    /// Words that may change class.
    movable: Vec<bool>,
    /// Classes that may receive moved words.
    open_class: Vec<bool>,
    class_size: Vec<usize>,
    /// `succ[u]` lists `(v, N(u, v))`.
    succ: Vec<Vec<(usize, i64)>>,
    /// `pred[v]` lists `(u, N(u, v))`.
    pred: Vec<Vec<(usize, i64)>>,
    self_loops: Vec<i64>,
    word_pred: Vec<i64>,
    word_succ: Vec<i64>,
    word_total: Vec<i64>,
    /// Row-major `num_classes × num_classes`.
    class_bigram: Vec<i64>,
    class_pred: Vec<i64>,
    class_succ: Vec<i64>,
    /// Scratch buffers indexed by class.
    scratch_a: Vec<i64>,
    scratch_b: Vec<i64>,
}

/// Result of one sweep over the movable words.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassOutcome {
    pub moves: usize,
    pub delta: f64,
}

impl PassOutcome {
    pub fn improved(&self) -> bool {
        self.moves > 0
    }
}

impl BigramStats {
    /// Counts bigrams of the given id sequences as they are (no framing).
    /// Words marked unmovable keep their class, and the classes holding
    /// them never receive other words.
    pub fn from_sequences(
        sequences: &[Vec<usize>],
        num_words: usize,
        class_of: Vec<usize>,
        movable: Vec<bool>,
    ) -> Result<Self> {
        if class_of.len() != num_words || movable.len() != num_words {
            return Err(Error::InvalidArgument(format!(
                "class assignment covers {} words, movable flags {}, vocabulary {num_words}",
                class_of.len(),
                movable.len()
            )));
        }
        let num_classes = class_of.iter().max().map_or(0, |&c| c + 1);
        let mut pairs: std::collections::HashMap<(usize, usize), i64> = std::collections::HashMap::new();
        let mut word_total = vec![0i64; num_words];
        for seq in sequences {
            for &w in seq {
                if w >= num_words {
                    return Err(Error::InvalidArgument(format!(
                        "word id {w} outside vocabulary of {num_words}"
                    )));
                }
                word_total[w] += 1;
            }
            for pair in seq.windows(2) {
                *pairs.entry((pair[0], pair[1])).or_default() += 1;
            }
        }
        let mut succ = vec![Vec::new(); num_words];
        let mut pred = vec![Vec::new(); num_words];
        let mut self_loops = vec![0i64; num_words];
        let mut word_pred = vec![0i64; num_words];
        let mut word_succ = vec![0i64; num_words];
        let mut sorted: Vec<((usize, usize), i64)> = pairs.into_iter().collect();
        sorted.sort_unstable();
        for ((u, v), n) in sorted {
            succ[u].push((v, n));
            pred[v].push((u, n));
            word_pred[u] += n;
            word_succ[v] += n;
            if u == v {
                self_loops[u] = n;
            }
        }

        let mut class_size = vec![0usize; num_classes];
        let mut open_class = vec![true; num_classes];
        for (w, &c) in class_of.iter().enumerate() {
            class_size[c] += 1;
            if !movable[w] {
                open_class[c] = false;
            }
        }
        if let Some(c) = class_size.iter().position(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("class {c} has no members")));
        }

        let mut stats = BigramStats {
            num_classes,
            class_of,
            movable,
            open_class,
            class_size,
            succ,
            pred,
            self_loops,
            word_pred,
            word_succ,
            word_total,
            class_bigram: vec![0; num_classes * num_classes],
            class_pred: vec![0; num_classes],
            class_succ: vec![0; num_classes],
            scratch_a: vec![0; num_classes],
            scratch_b: vec![0; num_classes],
        };
        stats.recount_classes();
        Ok(stats)
    }

    /// Frames every sentence as `<s> w_1 … w_n </s>`; reserved tokens are
    /// unmovable.
    pub fn from_sentences(sentences: &[Vec<usize>], num_words: usize, classes: &ClassMap) -> Result<Self> {
        let framed: Vec<Vec<usize>> = sentences
            .iter()
            .map(|s| {
                let mut f = Vec::with_capacity(s.len() + 2);
                f.push(vocab::START_ID);
                f.extend_from_slice(s);
                f.push(vocab::END_ID);
                f
            })
            .collect();
        let movable = (0..num_words).map(|w| !vocab::is_reserved(w)).collect();
        BigramStats::from_sequences(&framed, num_words, classes.assignments().to_vec(), movable)
    }

    fn recount_classes(&mut self) {
        let c = self.num_classes;
        self.class_bigram.iter_mut().for_each(|x| *x = 0);
        self.class_pred.iter_mut().for_each(|x| *x = 0);
        self.class_succ.iter_mut().for_each(|x| *x = 0);
        for (u, row) in self.succ.iter().enumerate() {
            let cu = self.class_of[u];
            for &(v, n) in row {
                self.class_bigram[cu * c + self.class_of[v]] += n;
            }
            self.class_pred[cu] += self.word_pred[u];
            self.class_succ[cu] += self.word_succ[u];
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_of(&self, word: usize) -> usize {
        self.class_of[word]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.class_of
    }

    pub fn class_bigram(&self, c1: usize, c2: usize) -> i64 {
        self.class_bigram[c1 * self.num_classes + c2]
    }

    pub fn class_pred_count(&self, c: usize) -> i64 {
        self.class_pred[c]
    }

    pub fn class_succ_count(&self, c: usize) -> i64 {
        self.class_succ[c]
    }

    pub fn word_count(&self, w: usize) -> i64 {
        self.word_total[w]
    }

    /// Checks that row sums of the class bigram table equal predecessor
    /// counts and column sums equal successor counts.
    pub fn check_consistency(&self) -> Result<()> {
        let c = self.num_classes;
        for i in 0..c {
            let row: i64 = (0..c).map(|j| self.class_bigram[i * c + j]).sum();
            let col: i64 = (0..c).map(|j| self.class_bigram[j * c + i]).sum();
            if row != self.class_pred[i] || col != self.class_succ[i] {
                return Err(Error::InvalidArgument(format!(
                    "inconsistent marginals for class {i}: row {row} vs {}, column {col} vs {}",
                    self.class_pred[i], self.class_succ[i]
                )));
            }
        }
        Ok(())
    }

    /// Fills the scratch buffers with the class counts of `word`'s
    /// successors (`a`) and predecessors (`b`); returns the touched classes.
    fn neighbour_classes(&mut self, word: usize) -> (Vec<usize>, Vec<usize>) {
        let mut a_classes = Vec::new();
        for &(v, n) in &self.succ[word] {
            let c = self.class_of[v];
            if self.scratch_a[c] == 0 {
                a_classes.push(c);
            }
            self.scratch_a[c] += n;
        }
        let mut b_classes = Vec::new();
        for &(u, n) in &self.pred[word] {
            let c = self.class_of[u];
            if self.scratch_b[c] == 0 {
                b_classes.push(c);
            }
            self.scratch_b[c] += n;
        }
        (a_classes, b_classes)
    }

    fn clear_scratch(&mut self, a_classes: &[usize], b_classes: &[usize]) {
        for &c in a_classes {
            self.scratch_a[c] = 0;
        }
        for &c in b_classes {
            self.scratch_b[c] = 0;
        }
    }

    /// Cell changes caused by moving `word` from its class to `to`, given
    /// filled scratch buffers.
    fn move_changes(
        &self,
        word: usize,
        to: usize,
        a_classes: &[usize],
        b_classes: &[usize],
    ) -> Vec<(usize, usize, i64)> {
        let from = self.class_of[word];
        let (a, b) = (&self.scratch_a, &self.scratch_b);
        let n = self.self_loops[word];
        let mut changes = Vec::with_capacity(2 * (a_classes.len() + b_classes.len()) + 4);
        for &c in a_classes {
            if c != from && c != to {
                changes.push((from, c, -a[c]));
                changes.push((to, c, a[c]));
            }
        }
        for &c in b_classes {
            if c != from && c != to {
                changes.push((c, from, -b[c]));
                changes.push((c, to, b[c]));
            }
        }
        changes.push((from, from, -a[from] - b[from] + n));
        changes.push((from, to, -a[to] + b[from] - n));
        changes.push((to, from, -b[to] + a[from] - n));
        changes.push((to, to, a[to] + b[to] + n));
        changes
    }

    fn delta_for(&self, word: usize, to: usize, a_classes: &[usize], b_classes: &[usize]) -> f64 {
        let from = self.class_of[word];
        let c = self.num_classes;
        let mut delta = 0.0;
        for (i, j, d) in self.move_changes(word, to, a_classes, b_classes) {
            if d != 0 {
                let old = self.class_bigram[i * c + j];
                delta += xlogx(old + d) - xlogx(old);
            }
        }
        let (p, s) = (self.word_pred[word], self.word_succ[word]);
        delta -= xlogx(self.class_pred[from] - p) - xlogx(self.class_pred[from]);
        delta -= xlogx(self.class_pred[to] + p) - xlogx(self.class_pred[to]);
        delta -= xlogx(self.class_succ[from] - s) - xlogx(self.class_succ[from]);
        delta -= xlogx(self.class_succ[to] + s) - xlogx(self.class_succ[to]);
        delta
    }

    /// Objective change from moving `word` into class `to`, computed
    /// incrementally.
    pub fn move_delta(&mut self, word: usize, to: usize) -> f64 {
        if to == self.class_of[word] {
            return 0.0;
        }
        let (a_classes, b_classes) = self.neighbour_classes(word);
        let delta = self.delta_for(word, to, &a_classes, &b_classes);
        self.clear_scratch(&a_classes, &b_classes);
        delta
    }

    /// Moves `word` into class `to`, updating all counts incrementally.
    pub fn apply_move(&mut self, word: usize, to: usize) {
        let from = self.class_of[word];
        if from == to {
            return;
        }
        let (a_classes, b_classes) = self.neighbour_classes(word);
        let c = self.num_classes;
        for (i, j, d) in self.move_changes(word, to, &a_classes, &b_classes) {
            self.class_bigram[i * c + j] += d;
        }
        self.clear_scratch(&a_classes, &b_classes);
        let (p, s) = (self.word_pred[word], self.word_succ[word]);
        self.class_pred[from] -= p;
        self.class_pred[to] += p;
        self.class_succ[from] -= s;
        self.class_succ[to] += s;
        self.class_size[from] -= 1;
        self.class_size[to] += 1;
        self.class_of[word] = to;
    }

    /// Best strictly improving move for `word`, if any.
    fn best_move(&mut self, word: usize) -> Option<(usize, f64)> {
        let from = self.class_of[word];
        if !self.movable[word] || self.class_size[from] <= 1 {
            return None;
        }
        let (a_classes, b_classes) = self.neighbour_classes(word);
        let mut best: Option<(usize, f64)> = None;
        for to in 0..self.num_classes {
            if to == from || !self.open_class[to] {
                continue;
            }
            let delta = self.delta_for(word, to, &a_classes, &b_classes);
            if delta > MIN_GAIN && best.is_none_or(|(_, d)| delta > d) {
                best = Some((to, delta));
            }
        }
        self.clear_scratch(&a_classes, &b_classes);
        best
    }

    /// Movable words, most frequent first (ties by id).
    fn visit_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.class_of.len()).filter(|&w| self.movable[w]).collect();
        order.sort_by(|&x, &y| self.word_total[y].cmp(&self.word_total[x]).then(x.cmp(&y)));
        order
    }
}

/// Closed-form class bigram log-likelihood of `stats`.
pub fn class_bigram_loglik(stats: &BigramStats) -> Result<f64> {
    stats.check_consistency()?;
    let bigram: f64 = stats.class_bigram.iter().map(|&n| xlogx(n)).sum();
    let pred: f64 = stats.class_pred.iter().map(|&n| xlogx(n)).sum();
    let succ: f64 = stats.class_succ.iter().map(|&n| xlogx(n)).sum();
    let words: f64 = stats.word_succ.iter().map(|&n| xlogx(n)).sum();
    Ok(bigram - pred - succ + words)
}

/// Visits every movable word once and applies its best strictly
/// improving move. A word alone in its class is never moved.
pub fn exchange_pass(stats: &mut BigramStats) -> PassOutcome {
    let mut outcome = PassOutcome { moves: 0, delta: 0.0 };
    for word in stats.visit_order() {
        if let Some((to, delta)) = stats.best_move(word) {
            stats.apply_move(word, to);
            outcome.moves += 1;
            outcome.delta += delta;
        }
    }
    outcome
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// The i-th most frequent word goes to regular class `i mod n`.
    #[default]
    FrequencyStriped,
    /// Striping over a seeded random permutation.
    Random,
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "striped" | "frequency-striped" => Ok(InitScheme::FrequencyStriped),
            "random" => Ok(InitScheme::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown initialization scheme '{other}'"
            ))),
        }
    }
}

/// Reserved tokens get singleton classes 0, 1, 2; the regular words are
/// spread over classes `3 .. 3 + num_classes`. Membership probabilities
/// come from the vocabulary counts.
pub fn initialize_classes(vocab: &Vocabulary, num_classes: usize, scheme: InitScheme, seed: u64) -> Result<ClassMap> {
    let regular = vocab.num_regular();
    if num_classes == 0 || num_classes > regular {
        return Err(Error::InvalidArgument(format!(
            "number of classes must be between 1 and the {regular} regular words, got {num_classes}"
        )));
    }
    let mut order: Vec<usize> = (NUM_RESERVED..vocab.len()).collect();
    match scheme {
        InitScheme::FrequencyStriped => {
            order.sort_by(|&x, &y| vocab.count(y).cmp(&vocab.count(x)).then(x.cmp(&y)));
        }
        InitScheme::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
        }
    }
    let mut class_of: Vec<usize> = (0..vocab.len()).collect();
    for (rank, &w) in order.iter().enumerate() {
        class_of[w] = NUM_RESERVED + rank % num_classes;
    }
    ClassMap::from_counts(class_of, vocab.counts())
}

#[derive(Debug, Clone)]
pub struct ExchangeOptions {
    pub num_classes: usize,
    pub max_passes: usize,
    pub scheme: InitScheme,
    pub seed: u64,
}

impl Default for ExchangeOptions {
    fn default() -> Self {
        ExchangeOptions {
            num_classes: 2000,
            max_passes: 10,
            scheme: InitScheme::FrequencyStriped,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExchangeResult {
    pub classes: ClassMap,
    /// Objective after initialization and after every pass.
    pub trace: Vec<f64>,
    /// Passes that moved at least one word.
    pub passes_with_moves: usize,
}

/// Clusters the vocabulary words of `corpus`. Membership probabilities
/// of the result are relative frequencies within each class.
pub fn run_exchange(vocab: &Vocabulary, corpus: &Corpus, options: &ExchangeOptions) -> Result<ExchangeResult> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let initial = initialize_classes(vocab, options.num_classes, options.scheme, options.seed)?;
    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| vocab.encode(s))
        .collect();
    let mut stats = BigramStats::from_sentences(&sentences, vocab.len(), &initial)?;
    let mut trace = vec![class_bigram_loglik(&stats)?];
    info!("exchange: initial log-likelihood {:.6}", trace[0]);
    let mut passes_with_moves = 0;
    for pass in 1..=options.max_passes {
        let outcome = exchange_pass(&mut stats);
        let ll = class_bigram_loglik(&stats)?;
        trace.push(ll);
        info!(
            "exchange: pass {pass}: {} moves, log-likelihood {ll:.6} (+{:.6})",
            outcome.moves, outcome.delta
        );
        if !outcome.improved() {
            break;
        }
        passes_with_moves += 1;
    }
    let classes = ClassMap::from_counts(stats.assignments().to_vec(), vocab.counts())?;
    Ok(ExchangeResult {
        classes,
        trace,
        passes_with_moves,
    })
}
