//! Sentence scoring and perplexity.
//!
//! Scores are natural logarithms. Each sentence is framed as
//! `<s> w_1 … w_n </s>` and every position after `<s>` is predicted,
//! including `</s>`.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{Network, Segment};
use crate::vocab::{self, Corpus};

/// Sentences evaluated together in one forward pass.
pub const SCORE_BATCH_ROWS: usize = 64;

/// Treatment of positions whose target is `<unk>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnkPolicy {
    /// `<unk>` is scored like any other word.
    #[default]
    Include,
    /// `<unk>` targets contribute neither probability nor count; the
    /// history still advances through them.
    Exclude,
}

impl UnkPolicy {
    /// Maps an unknown-word penalty to a policy; only `0` (exclude) is
    /// supported.
    pub fn from_penalty(penalty: f64) -> Result<Self> {
        if penalty == 0.0 {
            Ok(UnkPolicy::Exclude)
        } else {
            Err(Error::InvalidArgument(format!(
                "unsupported unknown-word penalty {penalty} (only 0 is supported)"
            )))
        }
    }
}

impl FromStr for UnkPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "include" => Ok(UnkPolicy::Include),
            "exclude" => Ok(UnkPolicy::Exclude),
            other => Err(Error::InvalidArgument(format!("unknown policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenScore {
    pub word: usize,
    pub log_prob: f64,
    pub counted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResult {
    /// Sum of counted per-token log-probabilities.
    pub total: f64,
    pub tokens: Vec<TokenScore>,
    pub counted: usize,
}

impl ScoreResult {
    fn from_log_probs(targets: &[usize], log_probs: &[f64], policy: UnkPolicy) -> Self {
        let tokens: Vec<TokenScore> = targets
            .iter()
            .zip(log_probs)
            .map(|(&word, &log_prob)| TokenScore {
                word,
                log_prob,
                counted: !(policy == UnkPolicy::Exclude && word == vocab::UNK_ID),
            })
            .collect();
        let counted = tokens.iter().filter(|t| t.counted).count();
        let total = tokens.iter().filter(|t| t.counted).map(|t| t.log_prob).sum();
        ScoreResult { total, tokens, counted }
    }
}

/// Scores many sentences at once.
pub fn score_sentences(network: &Network, sentences: &[Vec<String>], policy: UnkPolicy) -> Result<Vec<ScoreResult>> {
    let segments: Vec<Segment> = sentences
        .iter()
        .map(|s| Segment::framed(&network.vocab().encode(s)))
        .collect();
    let log_probs = network.segment_log_probs(&segments, SCORE_BATCH_ROWS)?;
    Ok(segments
        .iter()
        .zip(&log_probs)
        .map(|(seg, lp)| ScoreResult::from_log_probs(&seg.targets, lp, policy))
        .collect())
}

pub fn score_sentence(network: &Network, tokens: &[String], policy: UnkPolicy) -> Result<ScoreResult> {
    Ok(score_sentences(network, std::slice::from_ref(&tokens.to_vec()), policy)?.remove(0))
}

/// `exp(−Σ total / Σ counted)` over per-sentence results.
pub fn perplexity_of(results: &[ScoreResult]) -> Result<f64> {
    let count: usize = results.iter().map(|r| r.counted).sum();
    if count == 0 {
        return Err(Error::InvalidArgument("no tokens to compute perplexity over".into()));
    }
    let total: f64 = results.iter().map(|r| r.total).sum();
    Ok((-total / count as f64).exp())
}

pub fn corpus_perplexity(network: &Network, corpus: &Corpus, policy: UnkPolicy) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    perplexity_of(&score_sentences(network, corpus, policy)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::ClassMap;
    use crate::tensor::Precision;
    use crate::vocab::{parse_corpus, Vocabulary};

    const ARCH: &str = "input type=word name=x\n\
        layer type=projection name=p input=x size=2\n\
        layer type=tanh name=t input=p size=3\n\
        layer type=softmax name=out input=t\n";

    fn network_with(classes: Option<ClassMap>, vocab: Vocabulary) -> Network {
        Network::from_text(ARCH, vocab, classes, 3, Precision::Double).unwrap()
    }

    #[test]
    fn single_class_model_scores_memberships() {
        let vocab = Vocabulary::from_words([0, 0, 0], [("a".to_string(), 2)]).unwrap();
        // <s>, </s>, <unk>, a all in one class
        let classes = ClassMap::new(vec![0, 0, 0, 0], vec![0.0, 0.25, 0.25, 0.5]).unwrap();
        let net = network_with(Some(classes), vocab);
        let r = score_sentence(&net, &["a".to_string()], UnkPolicy::Include).unwrap();
        assert_eq!(r.counted, 2);
        assert!((r.total - (0.5f64.ln() + 0.25f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn unknown_only_sentence_counts_end_marker() {
        let vocab = Vocabulary::build(&parse_corpus("a b"), None).unwrap();
        let net = network_with(None, vocab);
        let s: Vec<String> = vec!["zz".into(), "yy".into()];
        let r = score_sentence(&net, &s, UnkPolicy::Exclude).unwrap();
        assert_eq!(r.counted, 1);
        assert_eq!(r.total, r.tokens.last().unwrap().log_prob);
        assert_eq!(score_sentence(&net, &s, UnkPolicy::Include).unwrap().counted, 3);
    }

    #[test]
    fn penalty_mapping() {
        assert_eq!(UnkPolicy::from_penalty(0.0).unwrap(), UnkPolicy::Exclude);
        assert!(UnkPolicy::from_penalty(-5.0).is_err());
    }

    #[test]
    fn perplexity_needs_tokens() {
        assert!(perplexity_of(&[]).is_err());
    }
}
