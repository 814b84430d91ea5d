//! Training with development-set validation, learning-rate annealing and
//! early stopping.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Mode, ParamStore};
use crate::network::{Network, Segment, SequenceBatch};
use crate::optim::{self, OptimizerConfig, OptimizerState};
use crate::score::{corpus_perplexity, UnkPolicy};
use crate::vocab::Corpus;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// Sequences per batch.
    pub batch_size: usize,
    /// Longer sentences are cut into pieces of this many steps, each
    /// starting from zero state.
    pub max_sequence_length: usize,
    pub optimizer: OptimizerConfig,
    /// Batches between validations; `None` validates once per epoch.
    pub validation_interval: Option<usize>,
    pub patience: usize,
    pub annealing_factor: f64,
    /// Relative improvement a validation needs to count as progress.
    pub min_improvement: f64,
    pub max_epochs: usize,
    pub max_batches: Option<usize>,
    pub seed: u64,
    pub unk_policy: UnkPolicy,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 16,
            max_sequence_length: 100,
            optimizer: OptimizerConfig::default(),
            validation_interval: None,
            patience: 2,
            annealing_factor: 0.5,
            min_improvement: 0.001,
            max_epochs: 10,
            max_batches: None,
            seed: 1,
            unk_policy: UnkPolicy::Include,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.max_sequence_length == 0 || self.max_epochs == 0 {
            return bad("batch size, sequence length and epoch limit must be positive".into());
        }
        if self.validation_interval == Some(0) || self.max_batches == Some(0) {
            return bad("validation interval and batch limit must be positive".into());
        }
        if !(self.annealing_factor > 0.0 && self.annealing_factor < 1.0) {
            return bad(format!("annealing factor {} outside (0, 1)", self.annealing_factor));
        }
        if !(self.min_improvement >= 0.0) {
            return bad(format!("minimum improvement {} is negative", self.min_improvement));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub batch: usize,
    pub perplexity: f64,
    pub learning_rate_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    MaxBatches,
    Diverged { batch: usize },
}

#[derive(Debug, Clone)]
pub struct TrainingState {
    pub epoch: usize,
    /// Updates applied so far.
    pub batches: usize,
    pub learning_rate_scale: f64,
    pub best_perplexity: Option<f64>,
    /// Parameters of the best validation; `None` after loading from a
    /// model file, whose parameters are the best ones.
    pub best_params: Option<ParamStore>,
    pub failures: usize,
    pub history: Vec<ValidationRecord>,
    pub stop_reason: Option<StopReason>,
    pub optimizer: OptimizerState,
}

impl TrainingState {
    pub fn new(config: &TrainingConfig) -> Self {
        TrainingState {
            epoch: 0,
            batches: 0,
            learning_rate_scale: 1.0,
            best_perplexity: None,
            best_params: None,
            failures: 0,
            history: Vec::new(),
            stop_reason: None,
            optimizer: OptimizerState::new(config.optimizer.algorithm),
        }
    }

    pub fn diverged(&self) -> bool {
        matches!(self.stop_reason, Some(StopReason::Diverged { .. }))
    }
}

fn mix(seed: u64, k: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Framed training sequences, cut to `max_len` steps.
pub fn training_segments(network: &Network, corpus: &Corpus, max_len: usize) -> Vec<Segment> {
    corpus
        .iter()
        .filter(|s| !s.is_empty())
        .flat_map(|s| Segment::framed(&network.vocab().encode(s)).windows(max_len))
        .collect()
}

/// Batches for one epoch: segments are shuffled, grouped by length into
/// batches, and the batch order is shuffled.
pub fn epoch_batches(segments: &[Segment], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64));
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| segments[i].len());
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(&mut rng);
    batches
}

enum Outcome {
    Continue,
    Stop(StopReason),
}

struct Trainer<'a> {
    network: &'a mut Network,
    dev: &'a Corpus,
    config: &'a TrainingConfig,
    state: TrainingState,
}

impl Trainer<'_> {
    fn validate(&mut self) -> Result<Outcome> {
        let ppl = corpus_perplexity(self.network, self.dev, self.config.unk_policy)?;
        let state = &mut self.state;
        state.history.push(ValidationRecord {
            epoch: state.epoch,
            batch: state.batches,
            perplexity: ppl,
            learning_rate_scale: state.learning_rate_scale,
        });
        let previous = state.best_perplexity;
        if ppl.is_finite() && previous.is_none_or(|best| ppl < best) {
            state.best_perplexity = Some(ppl);
            state.best_params = Some(self.network.params().clone());
        }
        let improved =
            ppl.is_finite() && previous.is_none_or(|best| (best - ppl) / best >= self.config.min_improvement);
        if improved {
            state.failures = 0;
        } else {
            state.failures += 1;
            if self.config.optimizer.algorithm.anneals() {
                state.learning_rate_scale *= self.config.annealing_factor;
            }
        }
        info!(
            "validation: epoch {} batch {} dev perplexity {:.6} best {:.6} failures {} learning rate scale {}",
            state.epoch,
            state.batches,
            ppl,
            state.best_perplexity.unwrap_or(f64::INFINITY),
            state.failures,
            state.learning_rate_scale
        );
        if state.failures > self.config.patience {
            return Ok(Outcome::Stop(StopReason::Patience));
        }
        Ok(Outcome::Continue)
    }

    fn update(&mut self, batch: &SequenceBatch) -> Result<Option<f64>> {
        let mode = Mode::Train {
            seed: mix(self.config.seed ^ 0x5EED, self.state.batches as u64),
        };
        let (loss, grads) = match self.network.loss_and_gradients(batch, mode) {
            Ok(r) => r,
            Err(Error::NonFinite { node }) => {
                warn!("non-finite value at {node}");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Ok(None);
        }
        let grads = match self.config.optimizer.clip_norm {
            Some(max_norm) => match optim::clip_gradients(&grads, max_norm) {
                Ok(g) => g,
                Err(Error::NonFiniteGradient(_)) => return Ok(None),
                Err(e) => return Err(e),
            },
            None => grads,
        };
        let mut step_config = self.config.optimizer;
        step_config.learning_rate *= self.state.learning_rate_scale;
        optim::optimizer_step(
            self.network.params_mut(),
            &grads,
            &step_config,
            &mut self.state.optimizer,
        )?;
        self.network.round_params();
        if self.network.params().iter().any(|(_, t)| !t.is_finite()) {
            return Ok(None);
        }
        Ok(Some(loss))
    }

    fn run(&mut self, segments: &[Segment]) -> Result<StopReason> {
        let per_epoch = segments.len().div_ceil(self.config.batch_size);
        let interval = self.config.validation_interval.unwrap_or(per_epoch);
        let mut last_validated = None;
        for epoch in 1..=self.config.max_epochs {
            self.state.epoch = epoch;
            let mut loss_sum = 0.0;
            let mut loss_count = 0usize;
            for indices in epoch_batches(segments, self.config.batch_size, self.config.seed, epoch) {
                let group: Vec<Segment> = indices.iter().map(|&i| segments[i].clone()).collect();
                let batch = SequenceBatch::new(&group)?;
                match self.update(&batch)? {
                    Some(loss) => {
                        loss_sum += loss;
                        loss_count += 1;
                    }
                    None => {
                        return Ok(StopReason::Diverged {
                            batch: self.state.batches + 1,
                        })
                    }
                }
                self.state.batches += 1;
                if self.state.batches.is_multiple_of(interval) {
                    last_validated = Some(self.state.batches);
                    if let Outcome::Stop(reason) = self.validate()? {
                        return Ok(reason);
                    }
                }
                if self.config.max_batches.is_some_and(|m| self.state.batches >= m) {
                    if last_validated != Some(self.state.batches) {
                        self.validate()?;
                    }
                    return Ok(StopReason::MaxBatches);
                }
            }
            info!(
                "epoch {epoch}: {} batches, mean training cross-entropy {:.6}",
                loss_count,
                loss_sum / loss_count.max(1) as f64
            );
        }
        if last_validated != Some(self.state.batches) {
            self.validate()?;
        }
        Ok(StopReason::MaxEpochs)
    }
}

/// Trains `network` in place. On return the network holds the
/// parameters of the best validation; a diverged run returns the last
/// good checkpoint with [`StopReason::Diverged`].
pub fn train(
    network: &mut Network,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    config: &TrainingConfig,
) -> Result<TrainingState> {
    config.validate()?;
    if dev_corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::InvalidArgument("development corpus is empty".into()));
    }
    let segments = training_segments(network, train_corpus, config.max_sequence_length);
    if segments.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let initial = network.params().clone();
    let mut trainer = Trainer {
        network,
        dev: dev_corpus,
        config,
        state: TrainingState::new(config),
    };
    let reason = trainer.run(&segments)?;
    let mut state = trainer.state;
    if let StopReason::Diverged { batch } = reason {
        warn!("training diverged at batch {batch}; restoring the last good checkpoint");
    }
    let best = state.best_params.clone().unwrap_or(initial);
    network.set_params(best)?;
    state.stop_reason = Some(reason);
    info!(
        "training stopped ({reason:?}) after {} batches; best dev perplexity {:.6}",
        state.batches,
        state.best_perplexity.unwrap_or(f64::NAN)
    );
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_segment_once() {
        let segments: Vec<Segment> = (0..23).map(|k| Segment::framed(&vec![3; k % 5])).collect();
        let batches = epoch_batches(&segments, 4, 9, 1);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
        assert_eq!(batches, epoch_batches(&segments, 4, 9, 1));
        assert_ne!(batches, epoch_batches(&segments, 4, 9, 2));
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        let bad = TrainingConfig {
            annealing_factor: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
