//! Continual fine-tuning with orthogonal low-rank units, Gaussian-mixture
//! task signatures, parameter-free task retrieval and streaming LDA
//! prediction, plus closed-form and Monte Carlo checks of the retrieval
//! error bounds.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod cli;
pub mod error;
pub mod kb;
pub mod lda;
pub mod linalg;
pub mod lora;
pub mod metrics;
pub mod pipeline;
pub mod signature;
pub mod taskgen;
pub mod theory;

pub use error::{Error, Result};
