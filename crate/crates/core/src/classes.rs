//! Word classes and the class file format.
//!
//! Every word belongs to exactly one class and carries a membership
//! probability `P(w | c)`; the probabilities of each class sum to one.
//! Class files hold one `word<TAB>class_id<TAB>probability` line per word,
//! sorted by class and then by descending probability.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vocab::{self, Vocabulary, NUM_RESERVED};

const SUM_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    class_of: Vec<usize>,
    membership: Vec<f64>,
    members: Vec<Vec<usize>>,
}

impl ClassMap {
    /// `class_of[w]` is the class of word id `w`; class ids must be dense.
    /// Membership probabilities must sum to one per class (within 1e-10).
    pub fn new(class_of: Vec<usize>, membership: Vec<f64>) -> Result<Self> {
        if class_of.len() != membership.len() {
            return Err(Error::InvalidArgument(format!(
                "{} class assignments but {} membership probabilities",
                class_of.len(),
                membership.len()
            )));
        }
        let mut map = ClassMap {
            class_of,
            membership,
            members: Vec::new(),
        };
        map.rebuild_members()?;
        for (c, members) in map.members.iter().enumerate() {
            let total: f64 = members.iter().map(|&w| map.membership[w]).sum();
            if (total - 1.0).abs() > SUM_TOLERANCE || members.iter().any(|&w| !(map.membership[w] >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "membership probabilities of class {c} sum to {total}, not 1"
                )));
            }
        }
        Ok(map)
    }

    /// Membership probabilities proportional to `counts`; a class whose
    /// members all have zero count gets a uniform distribution.
    pub fn from_counts(class_of: Vec<usize>, counts: &[u64]) -> Result<Self> {
        let num_classes = class_of.iter().max().map_or(0, |&c| c + 1);
        let mut totals = vec![0u64; num_classes];
        let mut sizes = vec![0usize; num_classes];
        for (w, &c) in class_of.iter().enumerate() {
            totals[c] += counts[w];
            sizes[c] += 1;
        }
        let membership = class_of
            .iter()
            .enumerate()
            .map(|(w, &c)| {
                if totals[c] == 0 {
                    1.0 / sizes[c] as f64
                } else {
                    counts[w] as f64 / totals[c] as f64
                }
            })
            .collect();
        let mut map = ClassMap {
            class_of,
            membership,
            members: Vec::new(),
        };
        map.rebuild_members()?;
        Ok(map)
    }

    /// Each word in its own class; reduces the class softmax to a plain
    /// softmax over the vocabulary.
    pub fn identity(vocab: &Vocabulary) -> Self {
        let n = vocab.len();
        ClassMap {
            class_of: (0..n).collect(),
            membership: vec![1.0; n],
            members: (0..n).map(|w| vec![w]).collect(),
        }
    }

    pub(crate) fn rebuild_members(&mut self) -> Result<()> {
        let num_classes = self.class_of.iter().max().map_or(0, |&c| c + 1);
        let mut members = vec![Vec::new(); num_classes];
        for (w, &c) in self.class_of.iter().enumerate() {
            members[c].push(w);
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("class {c} has no members")));
        }
        self.members = members;
        Ok(())
    }

    /// Rescales classes whose probabilities do not already sum to one.
    fn normalize(&mut self) {
        for members in &self.members {
            let total: f64 = members.iter().map(|&w| self.membership[w]).sum();
            if total > 0.0 && (total - 1.0).abs() > SUM_TOLERANCE {
                for &w in members {
                    self.membership[w] /= total;
                }
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    pub fn num_words(&self) -> usize {
        self.class_of.len()
    }

    pub fn class_of(&self, word: usize) -> usize {
        self.class_of[word]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.class_of
    }

    pub fn members(&self, class: usize) -> &[usize] {
        &self.members[class]
    }

    pub fn membership(&self, word: usize) -> f64 {
        self.membership[word]
    }

    pub fn memberships(&self) -> &[f64] {
        &self.membership
    }

    pub fn is_identity(&self) -> bool {
        self.members.iter().all(|m| m.len() == 1)
    }

    /// The class file text for this map.
    pub fn to_class_file(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for (c, members) in self.members.iter().enumerate() {
            let mut sorted = members.clone();
            sorted.sort_by(|&a, &b| {
                self.membership[b]
                    .partial_cmp(&self.membership[a])
                    .expect("finite probabilities")
                    .then(a.cmp(&b))
            });
            for w in sorted {
                writeln!(out, "{}\t{}\t{}", vocab.word(w), c, self.membership[w]).unwrap();
            }
        }
        out
    }

    pub fn write_class_file(&self, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_class_file(vocab)).map_err(|e| Error::io(path, e))
    }
}

/// Parses class file text into a vocabulary (reserved tokens first, then
/// words in file order) and its class map. Reserved tokens missing from
/// the file get singleton classes. Class ids are renumbered densely in
/// ascending order; probabilities are renormalized per class.
pub fn parse_class_file(text: &str) -> Result<(Vocabulary, ClassMap)> {
    let mut entries: Vec<(String, usize, f64, usize)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(line, "expected word<TAB>class_id<TAB>probability"));
        }
        let word = fields[0].trim();
        if word.is_empty() || word.contains(char::is_whitespace) {
            return Err(Error::parse(line, format!("invalid word '{}'", fields[0])));
        }
        let class: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(line, format!("invalid class id '{}'", fields[1])))?;
        let prob: f64 = fields[2]
            .trim()
            .parse()
            .ok()
            .filter(|p: &f64| p.is_finite() && *p >= 0.0)
            .ok_or_else(|| Error::parse(line, format!("invalid probability '{}'", fields[2])))?;
        if !seen.insert(word.to_string()) {
            return Err(Error::parse(line, format!("word '{word}' listed twice")));
        }
        entries.push((word.to_string(), class, prob, line));
    }
    if entries.is_empty() {
        return Err(Error::parse(1, "class file lists no words"));
    }

    let dense: BTreeMap<usize, usize> = entries
        .iter()
        .map(|e| e.1)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, i))
        .collect();
    let mut next_class = dense.len();

    let reserved = [vocab::SENTENCE_START, vocab::SENTENCE_END, vocab::UNKNOWN];
    let mut reserved_entries: [Option<(usize, f64)>; 3] = [None; 3];
    let mut regular = Vec::new();
    for (word, class, prob, _) in &entries {
        match reserved.iter().position(|r| r == word) {
            Some(i) => reserved_entries[i] = Some((dense[class], *prob)),
            None => regular.push((word.clone(), dense[class], *prob)),
        }
    }

    let mut class_of = Vec::with_capacity(NUM_RESERVED + regular.len());
    let mut membership = Vec::with_capacity(NUM_RESERVED + regular.len());
    for entry in reserved_entries {
        let (c, p) = entry.unwrap_or_else(|| {
            next_class += 1;
            (next_class - 1, 1.0)
        });
        class_of.push(c);
        membership.push(p);
    }
    for (_, c, p) in &regular {
        class_of.push(*c);
        membership.push(*p);
    }
    let vocab = Vocabulary::from_words([0, 0, 0], regular.into_iter().map(|(w, _, _)| (w, 0)))?;

    let mut map = ClassMap {
        class_of,
        membership,
        members: Vec::new(),
    };
    map.rebuild_members()?;
    for (c, members) in map.members.iter().enumerate() {
        let total: f64 = members.iter().map(|&w| map.membership[w]).sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument(format!("class {c} has zero total probability")));
        }
    }
    map.normalize();
    Ok((vocab, map))
}

pub fn read_class_file(path: impl AsRef<Path>) -> Result<(Vocabulary, ClassMap)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_class_file(&text).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::parse_corpus;

    #[test]
    fn from_counts_normalizes_per_class() {
        let map = ClassMap::from_counts(vec![0, 0, 1, 1, 1], &[1, 3, 2, 2, 0]).unwrap();
        assert_eq!(map.num_classes(), 2);
        assert_eq!(map.membership(0), 0.25);
        assert_eq!(map.membership(1), 0.75);
        assert_eq!(map.membership(2), 0.5);
        assert_eq!(map.membership(4), 0.0);
    }

    #[test]
    fn zero_count_class_is_uniform() {
        let map = ClassMap::from_counts(vec![0, 1, 1], &[4, 0, 0]).unwrap();
        assert_eq!(map.membership(1), 0.5);
    }

    #[test]
    fn empty_class_is_rejected() {
        assert!(ClassMap::new(vec![0, 2], vec![1.0, 1.0]).is_err());
        assert!(ClassMap::new(vec![0, 0], vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn class_file_round_trip() {
        let vocab = Vocabulary::build(&parse_corpus("a b c a a b"), None).unwrap();
        let class_of = vec![0, 1, 2, 3, 3, 4];
        let map = ClassMap::from_counts(class_of, vocab.counts()).unwrap();
        let text = map.to_class_file(&vocab);
        let first_regular = text.lines().nth(3).unwrap();
        assert!(first_regular.starts_with("a\t3\t"), "{text}");
        let (vocab2, map2) = parse_class_file(&text).unwrap();
        assert_eq!(vocab2.words(), vocab.words());
        assert_eq!(map2.assignments(), map.assignments());
        assert_eq!(map2.memberships(), map.memberships());
    }

    #[test]
    fn class_file_without_reserved_tokens() {
        let (vocab, map) = parse_class_file("x\t7\t0.5\ny\t7\t0.5\nz\t9\t1\n").unwrap();
        assert_eq!(vocab.len(), 6);
        assert_eq!(map.num_classes(), 5);
        assert_eq!(map.class_of(vocab.id("x").unwrap()), 0);
        assert_eq!(map.class_of(vocab.id("z").unwrap()), 1);
        assert_eq!(map.members(map.class_of(vocab::START_ID)).len(), 1);
    }

    #[test]
    fn malformed_class_file_reports_line() {
        let err = parse_class_file("x\t0\t1\ny 0 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
