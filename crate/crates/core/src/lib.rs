//! Class-factored recurrent neural network language models.
//!
//! The crate covers the whole pipeline: a small reverse-mode
//! differentiation engine ([`graph`]), the architecture description
//! language ([`arch`]), vocabularies and exchange-algorithm word classes
//! ([`vocab`], [`classes`], [`exchange`]), network layers and training
//! ([`layers`], [`network`], [`optim`], [`train`]), evaluation
//! ([`score`], [`rescore`], [`sample`]) and model files ([`persist`]).

// NaN must fail range checks, so `!(x > 0.0)` is intended
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod classes;
pub mod error;
pub mod exchange;
pub mod graph;
pub mod layers;
pub mod network;
pub mod optim;
pub mod persist;
pub mod rescore;
pub mod sample;
pub mod score;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
