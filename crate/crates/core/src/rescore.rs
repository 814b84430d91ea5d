//! N-best rescoring by log-linear interpolation of language model scores.
//!
//! For each hypothesis the language model score is
//!
//! ```text
//! lm = (1 − λ) · s_bo · log P_bo + λ · s_nn · log P_nn
//! ```
//!
//! and the hypothesis is ranked by `acoustic + lm`. All scores are
//! natural logarithms.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::score::{score_sentences, UnkPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct NBestHypothesis {
    pub utterance: String,
    pub acoustic: f64,
    pub backoff: f64,
    pub tokens: Vec<String>,
    /// Position in the input list of its utterance, from 0.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NBestList {
    pub utterance: String,
    pub hypotheses: Vec<NBestHypothesis>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationParams {
    pub lambda: f64,
    pub s_bo: f64,
    pub s_nn: f64,
}

impl Default for InterpolationParams {
    fn default() -> Self {
        InterpolationParams {
            lambda: 0.5,
            s_bo: 1.0,
            s_nn: 1.0,
        }
    }
}

impl InterpolationParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.s_bo > 0.0 && self.s_bo.is_finite()) || !(self.s_nn > 0.0 && self.s_nn.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale factors must be positive, got s_bo = {}, s_nn = {}",
                self.s_bo, self.s_nn
            )));
        }
        Ok(())
    }

    /// Interpolated language model score.
    pub fn combine(&self, log_bo: f64, log_nn: f64) -> f64 {
        (1.0 - self.lambda) * self.s_bo * log_bo + self.lambda * self.s_nn * log_nn
    }
}

fn parse_float(line: usize, what: &str, field: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(line, format!("invalid {what} '{field}'")))
}

/// Parses `utt_id acoustic backoff w1 … wN` lines and groups them by
/// utterance, keeping the order of first appearance.
pub fn parse_nbest(text: &str) -> Result<Vec<NBestList>> {
    let mut lists: Vec<NBestList> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 4 {
            return Err(Error::parse(
                line,
                "expected utt_id acoustic_logprob backoff_lm_logprob followed by at least one word",
            ));
        }
        let acoustic = parse_float(line, "acoustic log-probability", fields[1])?;
        let backoff = parse_float(line, "back-off log-probability", fields[2])?;
        let utterance = fields[0].to_string();
        let k = *index.entry(utterance.clone()).or_insert_with(|| {
            lists.push(NBestList {
                utterance: utterance.clone(),
                hypotheses: Vec::new(),
            });
            lists.len() - 1
        });
        let rank = lists[k].hypotheses.len();
        lists[k].hypotheses.push(NBestHypothesis {
            utterance,
            acoustic,
            backoff,
            tokens: fields[3..].iter().map(|s| s.to_string()).collect(),
            rank,
        });
    }
    Ok(lists)
}

pub fn read_nbest(path: impl AsRef<Path>) -> Result<Vec<NBestList>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_nbest(&text).map_err(|e| e.in_file(path))
}

/// Parses `utt_id w1 … wN` reference lines.
pub fn parse_references(text: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut refs = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let mut fields = raw.split_whitespace();
        let Some(id) = fields.next() else { continue };
        if refs
            .insert(id.to_string(), fields.map(str::to_string).collect())
            .is_some()
        {
            return Err(Error::parse(i + 1, format!("utterance '{id}' has two references")));
        }
    }
    Ok(refs)
}

pub fn read_references(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<String>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_references(&text).map_err(|e| e.in_file(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RescoredHypothesis {
    pub hypothesis: NBestHypothesis,
    pub nnlm: f64,
    pub lm: f64,
    pub total: f64,
}

/// Neural network log-probabilities of every hypothesis, `[list][hyp]`.
pub fn nnlm_scores(lists: &[NBestList], network: &Network, policy: UnkPolicy) -> Result<Vec<Vec<f64>>> {
    if let Some(empty) = lists.iter().find(|l| l.hypotheses.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "utterance '{}' has no hypotheses",
            empty.utterance
        )));
    }
    let sentences: Vec<Vec<String>> = lists
        .iter()
        .flat_map(|l| l.hypotheses.iter().map(|h| h.tokens.clone()))
        .collect();
    let mut scores = score_sentences(network, &sentences, policy)?
        .into_iter()
        .map(|r| r.total);
    Ok(lists
        .iter()
        .map(|l| l.hypotheses.iter().map(|_| scores.next().unwrap()).collect())
        .collect())
}

/// Ranks each list by total score, descending; ties keep input order.
pub fn rerank(
    lists: &[NBestList],
    nnlm: &[Vec<f64>],
    params: &InterpolationParams,
) -> Result<Vec<Vec<RescoredHypothesis>>> {
    params.validate()?;
    lists
        .iter()
        .zip(nnlm)
        .map(|(list, scores)| {
            if list.hypotheses.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "utterance '{}' has no hypotheses",
                    list.utterance
                )));
            }
            let mut out: Vec<RescoredHypothesis> = list
                .hypotheses
                .iter()
                .zip(scores)
                .map(|(h, &nn)| {
                    let lm = params.combine(h.backoff, nn);
                    RescoredHypothesis {
                        hypothesis: h.clone(),
                        nnlm: nn,
                        lm,
                        total: h.acoustic + lm,
                    }
                })
                .collect();
            out.sort_by(|a, b| b.total.total_cmp(&a.total));
            Ok(out)
        })
        .collect()
}

pub fn rescore_nbest(
    lists: &[NBestList],
    network: &Network,
    params: &InterpolationParams,
    policy: UnkPolicy,
) -> Result<Vec<Vec<RescoredHypothesis>>> {
    params.validate()?;
    let nnlm = nnlm_scores(lists, network, policy)?;
    rerank(lists, &nnlm, params)
}

/// Word-level Levenshtein distance.
pub fn word_errors(hypothesis: &[String], reference: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hypothesis.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Candidate values for λ and `s_nn`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lambdas: Vec<f64>,
    pub s_nn: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lambdas: (0..=10).map(|k| k as f64 / 10.0).collect(),
            s_nn: vec![1.0],
        }
    }
}

fn parse_values(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("invalid grid values '{spec}'"));
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [start, end, step] => {
            let (start, end, step): (f64, f64, f64) = (
                start.trim().parse().map_err(|_| bad())?,
                end.trim().parse().map_err(|_| bad())?,
                step.trim().parse().map_err(|_| bad())?,
            );
            if !(step > 0.0) || end < start {
                return Err(bad());
            }
            let n = ((end - start) / step + 1e-9).floor() as usize;
            Ok((0..=n)
                .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
                .collect())
        }
        [list] => list
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect(),
        _ => Err(bad()),
    }
}

impl std::str::FromStr for GridSpec {
    type Err = Error;

    /// `lambda=START:END:STEP;s_nn=V1,V2,…`; either part may use either
    /// form, and an omitted part keeps its default.
    fn from_str(s: &str) -> Result<Self> {
        let mut grid = GridSpec::default();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("grid part '{part}' is not key=values")))?;
            match key.trim() {
                "lambda" => grid.lambdas = parse_values(values)?,
                "s_nn" => grid.s_nn = parse_values(values)?,
                other => return Err(Error::InvalidArgument(format!("unknown grid parameter '{other}'"))),
            }
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningResult {
    pub params: InterpolationParams,
    pub word_errors: usize,
    pub reference_words: usize,
}

impl TuningResult {
    pub fn word_error_rate(&self) -> f64 {
        self.word_errors as f64 / self.reference_words.max(1) as f64
    }
}

/// Total word errors of the top hypotheses under `params`.
pub fn count_errors(
    lists: &[NBestList],
    nnlm: &[Vec<f64>],
    references: &BTreeMap<String, Vec<String>>,
    params: &InterpolationParams,
) -> Result<usize> {
    let ranked = rerank(lists, nnlm, params)?;
    let mut errors = 0;
    for (list, ranked) in lists.iter().zip(&ranked) {
        let reference = references
            .get(&list.utterance)
            .ok_or_else(|| Error::InvalidArgument(format!("no reference for utterance '{}'", list.utterance)))?;
        errors += word_errors(&ranked[0].hypothesis.tokens, reference);
    }
    Ok(errors)
}

/// Grid search over `(λ, s_nn)` with `s_bo` fixed, minimizing word
/// errors of the top hypotheses. Ties go to the smaller λ, then the
/// smaller `s_nn`.
pub fn optimize_interpolation_with_scores(
    lists: &[NBestList],
    nnlm: &[Vec<f64>],
    references: &BTreeMap<String, Vec<String>>,
    grid: &GridSpec,
    s_bo: f64,
) -> Result<TuningResult> {
    let mut lambdas = grid.lambdas.clone();
    let mut scales = grid.s_nn.clone();
    if lambdas.is_empty() || scales.is_empty() {
        return Err(Error::InvalidArgument("interpolation grid is empty".into()));
    }
    lambdas.sort_by(f64::total_cmp);
    scales.sort_by(f64::total_cmp);
    let reference_words = lists
        .iter()
        .filter_map(|l| references.get(&l.utterance))
        .map(Vec::len)
        .sum();
    let mut best: Option<TuningResult> = None;
    for &lambda in &lambdas {
        for &s_nn in &scales {
            let params = InterpolationParams { lambda, s_bo, s_nn };
            let errors = count_errors(lists, nnlm, references, &params)?;
            if best.as_ref().is_none_or(|b| errors < b.word_errors) {
                best = Some(TuningResult {
                    params,
                    word_errors: errors,
                    reference_words,
                });
            }
        }
    }
    Ok(best.expect("grid is non-empty"))
}

pub fn optimize_interpolation(
    lists: &[NBestList],
    references: &BTreeMap<String, Vec<String>>,
    network: &Network,
    grid: &GridSpec,
    s_bo: f64,
    policy: UnkPolicy,
) -> Result<TuningResult> {
    if grid.lambdas.is_empty() || grid.s_nn.is_empty() {
        return Err(Error::InvalidArgument("interpolation grid is empty".into()));
    }
    let nnlm = nnlm_scores(lists, network, policy)?;
    optimize_interpolation_with_scores(lists, &nnlm, references, grid, s_bo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn interpolation_arithmetic() {
        let p = InterpolationParams {
            lambda: 0.5,
            s_bo: 1.0,
            s_nn: 1.0,
        };
        assert!((p.combine(-10.0, -8.0) + 9.0).abs() < 1e-12);
        assert!(InterpolationParams { lambda: 1.5, ..p }.validate().is_err());
    }

    #[test]
    fn nbest_grouping_and_errors() {
        let lists = parse_nbest("u1 -1 -2 a b\nu2 -1 -1 c\nu1 -3 -1 a c\n").unwrap();
        assert_eq!(lists.len(), 2);
        assert_eq!(lists[0].hypotheses.len(), 2);
        assert_eq!(lists[0].hypotheses[1].rank, 1);
        let err = parse_nbest("u1 -1 -2 a\nu1 x -2 a\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_nbest("u1 -1 -2\n").is_err());
    }

    #[test]
    fn levenshtein() {
        assert_eq!(word_errors(&words("a b c"), &words("a b c")), 0);
        assert_eq!(word_errors(&words("a x c"), &words("a b c")), 1);
        assert_eq!(word_errors(&words(""), &words("a b")), 2);
        assert_eq!(word_errors(&words("a b c d"), &words("b c")), 2);
    }

    #[test]
    fn stable_ties() {
        let lists = parse_nbest("u 0 -1 a\nu 0 -1 b\nu 0 -1 c\n").unwrap();
        let nn = vec![vec![-1.0, -1.0, -1.0]];
        let ranked = rerank(&lists, &nn, &InterpolationParams::default()).unwrap();
        let order: Vec<usize> = ranked[0].iter().map(|r| r.hypothesis.rank).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn grid_parsing() {
        let g: GridSpec = "lambda=0:1:0.25;s_nn=0.5,2".parse().unwrap();
        assert_eq!(g.lambdas, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.s_nn, vec![0.5, 2.0]);
        assert!("lambda=1:0:0.1".parse::<GridSpec>().is_err());
        assert!("mu=1".parse::<GridSpec>().is_err());
    }

    #[test]
    fn tuning_prefers_small_lambda_on_ties() {
        let lists = parse_nbest("u 0 -1 a b\nu 0 -5 a c\n").unwrap();
        let refs = parse_references("u a b\n").unwrap();
        let nn = vec![vec![-1.0, -1.0]];
        let result = optimize_interpolation_with_scores(&lists, &nn, &refs, &GridSpec::default(), 1.0).unwrap();
        assert_eq!(result.params.lambda, 0.0);
        assert_eq!(result.word_errors, 0);
        let single = GridSpec {
            lambdas: vec![0.3],
            s_nn: vec![2.0],
        };
        let r = optimize_interpolation_with_scores(&lists, &nn, &refs, &single, 1.0).unwrap();
        assert_eq!((r.params.lambda, r.params.s_nn), (0.3, 2.0));
        let empty = GridSpec {
            lambdas: vec![],
            s_nn: vec![1.0],
        };
        assert!(optimize_interpolation_with_scores(&lists, &nn, &refs, &empty, 1.0).is_err());
    }
}
