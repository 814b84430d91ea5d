//! Gradient-based parameter updates and gradient-norm clipping.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GradientMap, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Nag,
    Adagrad,
    Adadelta,
    Adam,
    #[serde(rename = "rmsprop")]
    RmsProp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Sgd,
        Algorithm::Nag,
        Algorithm::Adagrad,
        Algorithm::Adadelta,
        Algorithm::Adam,
        Algorithm::RmsProp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::Nag => "nag",
            Algorithm::Adagrad => "adagrad",
            Algorithm::Adadelta => "adadelta",
            Algorithm::Adam => "adam",
            Algorithm::RmsProp => "rmsprop",
        }
    }

    /// Whether the learning rate is annealed when validation stalls.
    /// Adaptive methods keep their rate.
    pub fn anneals(self) -> bool {
        matches!(self, Algorithm::Sgd | Algorithm::Nag)
    }

    /// Accumulator tensors kept per parameter.
    fn num_slots(self) -> usize {
        match self {
            Algorithm::Sgd => 0,
            Algorithm::Nag | Algorithm::Adagrad | Algorithm::RmsProp => 1,
            Algorithm::Adadelta | Algorithm::Adam => 2,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown optimizer '{s}' (expected sgd, nag, adagrad, adadelta, adam or rmsprop)"
                ))
            })
    }
}

/// Hyperparameters of one optimizer.
///
/// `decay` is the squared-gradient decay `ρ` for adadelta and rmsprop and
/// `β₁` for adam; `second_decay` is adam's `β₂`. For adadelta the
/// learning rate is a global scale on the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epsilon: f64,
    pub decay: f64,
    pub second_decay: f64,
    pub clip_norm: Option<f64>,
}

pub const DEFAULT_CLIP_NORM: f64 = 5.0;

impl OptimizerConfig {
    /// Default hyperparameters for `algorithm`.
    pub fn new(algorithm: Algorithm) -> Self {
        let base = OptimizerConfig {
            algorithm,
            learning_rate: 0.1,
            momentum: 0.0,
            epsilon: 0.0,
            decay: 0.0,
            second_decay: 0.0,
            clip_norm: Some(DEFAULT_CLIP_NORM),
        };
        match algorithm {
            Algorithm::Sgd => base,
            Algorithm::Nag => OptimizerConfig { momentum: 0.9, ..base },
            Algorithm::Adagrad => OptimizerConfig { epsilon: 1e-6, ..base },
            Algorithm::Adadelta => OptimizerConfig {
                learning_rate: 1.0,
                decay: 0.95,
                epsilon: 1e-6,
                ..base
            },
            Algorithm::Adam => OptimizerConfig {
                learning_rate: 1e-3,
                decay: 0.9,
                second_decay: 0.999,
                epsilon: 1e-8,
                ..base
            },
            Algorithm::RmsProp => OptimizerConfig {
                learning_rate: 1e-3,
                decay: 0.9,
                epsilon: 1e-6,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidArgument(format!(
                "{} {what} {v} out of range",
                self.algorithm
            )))
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate", self.learning_rate);
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", self.epsilon);
        }
        if self.algorithm == Algorithm::Nag && !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", self.momentum);
        }
        if matches!(
            self.algorithm,
            Algorithm::Adadelta | Algorithm::Adam | Algorithm::RmsProp
        ) && !(self.decay > 0.0 && self.decay < 1.0)
        {
            return bad("decay", self.decay);
        }
        if self.algorithm == Algorithm::Adam && !(self.second_decay > 0.0 && self.second_decay < 1.0) {
            return bad("second decay", self.second_decay);
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip norm", c);
            }
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::new(Algorithm::Adagrad)
    }
}

/// Per-parameter accumulators and the update counter.
///
/// Slots: nag velocity; adagrad and rmsprop squared-gradient
/// accumulator; adadelta squared gradients then squared updates; adam
/// first then second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    algorithm: Algorithm,
    step: u64,
    slots: BTreeMap<String, Vec<Tensor>>,
}

impl OptimizerState {
    pub fn new(algorithm: Algorithm) -> Self {
        OptimizerState {
            algorithm,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub(crate) fn from_parts(algorithm: Algorithm, step: u64, slots: BTreeMap<String, Vec<Tensor>>) -> Result<Self> {
        if slots.values().any(|s| s.len() != algorithm.num_slots()) {
            return Err(Error::InvalidArgument(format!(
                "{algorithm} keeps {} accumulators per parameter",
                algorithm.num_slots()
            )));
        }
        Ok(OptimizerState { algorithm, step, slots })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &BTreeMap<String, Vec<Tensor>> {
        &self.slots
    }
}

/// L2 norm of all gradients taken together.
pub fn global_norm(grads: &GradientMap) -> f64 {
    grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

fn check_finite(grads: &GradientMap) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.is_finite()) {
        Some((name, _)) => Err(Error::NonFiniteGradient(name.clone())),
        None => Ok(()),
    }
}

/// Relative slack under which a norm counts as within the limit, so that
/// rounding in a rescaled map does not trigger a second rescale.
const CLIP_SLACK: f64 = 1e-9;

/// Rescales all gradients by `max_norm / g` when their global norm `g`
/// exceeds `max_norm` by more than a relative `1e-9`.
pub fn clip_gradients(grads: &GradientMap, max_norm: f64) -> Result<GradientMap> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip norm must be positive, got {max_norm}"
        )));
    }
    check_finite(grads)?;
    let norm = global_norm(grads);
    let mut out = grads.clone();
    if norm > max_norm * (1.0 + CLIP_SLACK) {
        let scale = max_norm / norm;
        for g in out.values_mut() {
            g.scale_in_place(scale);
        }
    }
    Ok(out)
}

#[inline]
fn ratio(num: f64, den: f64) -> f64 {
    // 0/0 with epsilon = 0 means no gradient and no update
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Applies one update to every parameter that has a gradient.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &GradientMap,
    config: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<()> {
    if state.algorithm != config.algorithm {
        return Err(Error::InvalidArgument(format!(
            "optimizer state belongs to {}, configuration selects {}",
            state.algorithm, config.algorithm
        )));
    }
    config.validate()?;
    check_finite(grads)?;
    for (name, grad) in grads {
        let param = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter '{name}'")))?;
        if !param.same_shape(grad) {
            return Err(Error::Shape(format!(
                "gradient for '{name}' has shape {:?}, parameter {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if let Some(slots) = state.slots.get(name) {
            if slots.iter().any(|s| !s.same_shape(grad)) {
                return Err(Error::Shape(format!(
                    "optimizer state for '{name}' does not match its shape"
                )));
            }
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let OptimizerConfig {
        algorithm,
        learning_rate: lr,
        momentum: mu,
        epsilon: eps,
        decay: rho,
        second_decay: beta2,
        ..
    } = *config;

    for (name, grad) in grads {
        let n_slots = algorithm.num_slots();
        let slots = state
            .slots
            .entry(name.clone())
            .or_insert_with(|| vec![Tensor::zeros(grad.shape()); n_slots]);
        let theta = params.get_mut(name).expect("checked above").data_mut();
        let g = grad.data();
        match algorithm {
            Algorithm::Sgd => {
                for (p, &gi) in theta.iter_mut().zip(g) {
                    *p -= lr * gi;
                }
            }
            Algorithm::Nag => {
                let v = slots[0].data_mut();
                for i in 0..g.len() {
                    v[i] = mu * v[i] - lr * g[i];
                    theta[i] += mu * v[i] - lr * g[i];
                }
            }
            Algorithm::Adagrad => {
                let r = slots[0].data_mut();
                for i in 0..g.len() {
                    r[i] += g[i] * g[i];
                    theta[i] -= lr * ratio(g[i], r[i].sqrt() + eps);
                }
            }
            Algorithm::RmsProp => {
                let r = slots[0].data_mut();
                for i in 0..g.len() {
                    r[i] = rho * r[i] + (1.0 - rho) * g[i] * g[i];
                    theta[i] -= lr * ratio(g[i], r[i].sqrt() + eps);
                }
            }
            Algorithm::Adadelta => {
                let (sq_grad, sq_update) = slots.split_at_mut(1);
                let (eg, ed) = (sq_grad[0].data_mut(), sq_update[0].data_mut());
                for i in 0..g.len() {
                    eg[i] = rho * eg[i] + (1.0 - rho) * g[i] * g[i];
                    let update = -ratio((ed[i] + eps).sqrt(), (eg[i] + eps).sqrt()) * g[i];
                    ed[i] = rho * ed[i] + (1.0 - rho) * update * update;
                    theta[i] += lr * update;
                }
            }
            Algorithm::Adam => {
                let beta1 = rho;
                let (c1, c2) = (1.0 - beta1.powf(t), 1.0 - beta2.powf(t));
                let (first, second) = slots.split_at_mut(1);
                let (m, v) = (first[0].data_mut(), second[0].data_mut());
                for i in 0..g.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    theta[i] -= lr * ratio(m_hat, v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
