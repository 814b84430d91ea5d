//! Vocabularies and corpus reading.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const SENTENCE_START: &str = "<s>";
pub const SENTENCE_END: &str = "</s>";
pub const UNKNOWN: &str = "<unk>";

/// Reserved ids; every vocabulary starts with these three entries.
pub const START_ID: usize = 0;
pub const END_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const NUM_RESERVED: usize = 3;

pub fn is_reserved(id: usize) -> bool {
    id < NUM_RESERVED
}

/// One sentence per entry, already split into tokens.
pub type Corpus = Vec<Vec<String>>;

/// Splits text into sentences, one per non-blank line. Explicit `<s>` and
/// `</s>` tokens are dropped since framing is added internally.
pub fn parse_corpus(text: &str) -> Corpus {
    text.lines()
        .map(|line| {
            line.split_whitespace()
                .filter(|t| *t != SENTENCE_START && *t != SENTENCE_END)
                .map(str::to_string)
                .collect::<Vec<_>>()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_corpus(&text))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from `(word, count)` pairs for the regular words.
    /// Reserved tokens are placed first with the given counts.
    pub fn from_words(reserved_counts: [u64; 3], words: impl IntoIterator<Item = (String, u64)>) -> Result<Self> {
        let mut all = vec![
            (SENTENCE_START.to_string(), reserved_counts[0]),
            (SENTENCE_END.to_string(), reserved_counts[1]),
            (UNKNOWN.to_string(), reserved_counts[2]),
        ];
        all.extend(words);
        let mut index = HashMap::with_capacity(all.len());
        for (i, (w, _)) in all.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "word '{w}' appears twice in the vocabulary"
                )));
            }
        }
        let (words, counts) = all.into_iter().unzip();
        Ok(Vocabulary { words, counts, index })
    }

    /// Counts words, ranks them by descending frequency (ties go to the
    /// earlier first occurrence), and keeps the top `max_size − 3` when a
    /// limit is given; the rest map to `<unk>`.
    pub fn build(corpus: &[Vec<String>], max_size: Option<usize>) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut literal_unk = 0u64;
        let mut sentences = 0u64;
        for sentence in corpus {
            if sentence.is_empty() {
                continue;
            }
            sentences += 1;
            for token in sentence {
                match token.as_str() {
                    UNKNOWN => literal_unk += 1,
                    SENTENCE_START | SENTENCE_END => {}
                    t => {
                        let c = counts.entry(t).or_insert_with(|| {
                            order.push(t.to_string());
                            0
                        });
                        *c += 1;
                    }
                }
            }
        }
        if sentences == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = order
            .into_iter()
            .map(|w| {
                let c = counts[w.as_str()];
                (w, c)
            })
            .collect();
        ranked.sort_by_key(|e| std::cmp::Reverse(e.1));

        let mut unk = literal_unk;
        if let Some(limit) = max_size {
            if limit < NUM_RESERVED {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary size limit {limit} is smaller than the {NUM_RESERVED} reserved tokens"
                )));
            }
            let keep = limit - NUM_RESERVED;
            if ranked.len() > keep {
                unk += ranked[keep..].iter().map(|(_, c)| c).sum::<u64>();
                ranked.truncate(keep);
            }
        }
        Vocabulary::from_words([sentences, sentences, unk], ranked)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of non-reserved words.
    pub fn num_regular(&self) -> usize {
        self.words.len() - NUM_RESERVED
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> usize {
        self.id(word).unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Token ids for a sentence, unknown words mapped to `<unk>`.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    /// Replaces counts with those observed in `corpus`; reserved starts
    /// and ends count sentences.
    pub fn recount(&mut self, corpus: &[Vec<String>]) {
        let mut counts = vec![0u64; self.words.len()];
        for sentence in corpus.iter().filter(|s| !s.is_empty()) {
            counts[START_ID] += 1;
            counts[END_ID] += 1;
            for t in sentence {
                counts[self.id_or_unk(t)] += 1;
            }
        }
        self.counts = counts;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(text: &str) -> Corpus {
        parse_corpus(text)
    }

    #[test]
    fn counts_and_reserved_tokens() {
        let v = Vocabulary::build(&corpus("a b a"), None).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.word(START_ID), "<s>");
        assert_eq!(v.word(END_ID), "</s>");
        assert_eq!(v.word(UNK_ID), "<unk>");
        assert_eq!(v.count(v.id("a").unwrap()), 2);
        assert_eq!(v.count(v.id("b").unwrap()), 1);
        assert_eq!(v.id("a"), Some(3));
    }

    #[test]
    fn size_limit_maps_rest_to_unk() {
        let v = Vocabulary::build(&corpus("a b a"), Some(4)).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.id("a").is_some());
        assert_eq!(v.id("b"), None);
        assert_eq!(v.id_or_unk("b"), UNK_ID);
        assert_eq!(v.count(UNK_ID), 1);
    }

    #[test]
    fn ties_go_to_first_occurrence() {
        let v = Vocabulary::build(&corpus("y x\nx y z"), Some(4)).unwrap();
        assert!(v.id("y").is_some());
        assert!(v.id("x").is_none());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            Vocabulary::build(&corpus("\n  \n"), None),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn explicit_boundaries_are_dropped() {
        assert_eq!(corpus("<s> a b </s>\n\n c"), vec![vec!["a", "b"], vec!["c"]]);
    }
}
