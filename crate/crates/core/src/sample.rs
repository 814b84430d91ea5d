//! Text generation by ancestral sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::network::Network;
use crate::vocab;

/// Index drawn from an unnormalized distribution, or `None` when all
/// weights are zero.
fn draw(rng: &mut ChaCha8Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = Some(i);
        if u < w {
            return Some(i);
        }
        u -= w;
    }
    last
}

/// Samples one sentence of word ids: a class from the network, then a
/// word from that class's membership distribution, until `</s>` or
/// `max_tokens` words. `<s>` is never generated.
pub fn sample_ids(network: &Network, rng: &mut ChaCha8Rng, max_tokens: usize) -> Result<Vec<usize>> {
    let classes = network.classes();
    let start_class = classes.class_of(vocab::START_ID);
    let mut words = Vec::new();
    let mut state = network.initial_state();
    let mut previous = vocab::START_ID;
    while words.len() < max_tokens {
        let (mut class_probs, next) = network.step(&state, previous)?;
        state = next;
        if classes.members(start_class).len() == 1 {
            class_probs[start_class] = 0.0;
        }
        let Some(class) = draw(rng, &class_probs) else {
            break;
        };
        let members = classes.members(class);
        let weights: Vec<f64> = members
            .iter()
            .map(|&w| {
                if w == vocab::START_ID {
                    0.0
                } else {
                    classes.membership(w)
                }
            })
            .collect();
        let Some(k) = draw(rng, &weights) else {
            break;
        };
        let word = members[k];
        if word == vocab::END_ID {
            break;
        }
        words.push(word);
        previous = word;
    }
    Ok(words)
}

/// `count` sampled sentences, deterministic in `seed`.
pub fn sample_text(network: &Network, seed: u64, max_tokens: usize, count: usize) -> Result<Vec<Vec<String>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let ids = sample_ids(network, &mut rng, max_tokens)?;
            Ok(ids.into_iter().map(|w| network.vocab().word(w).to_string()).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use crate::vocab::{parse_corpus, Vocabulary};

    fn net() -> Network {
        let vocab = Vocabulary::build(&parse_corpus("a b c"), None).unwrap();
        let arch = "input type=word name=x\nlayer type=projection name=p input=x size=2\n\
                    layer type=gru name=g input=p size=3\nlayer type=softmax name=o input=g\n";
        Network::from_text(arch, vocab, None, 11, Precision::Double).unwrap()
    }

    #[test]
    fn zero_tokens_gives_empty_sentences() {
        let out = sample_text(&net(), 1, 0, 3).unwrap();
        assert_eq!(out, vec![Vec::<String>::new(); 3]);
    }

    #[test]
    fn same_seed_same_text() {
        let n = net();
        let a = sample_text(&n, 5, 20, 10).unwrap();
        assert_eq!(a, sample_text(&n, 5, 20, 10).unwrap());
        assert!(a.iter().flatten().all(|w| w != "<s>" && w != "</s>"));
        assert!(a.iter().all(|s| s.len() <= 20));
    }
}
