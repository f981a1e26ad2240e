//! Time-domain speech enhancement with temporal convolutional recurrent
//! networks (TCRN).
//!
//! The crate is organized bottom-up: [`tensor`] kernels, [`dsp`] primitives,
//! trainable [`layers`], the stacked [`model`], [`loss`] functions, the
//! [`optim`] Adam optimizer, audio [`data`] handling, objective [`metrics`],
//! and the end-to-end [`pipeline`] used by the command-line tool.

pub mod dsp;
pub mod error;
pub mod gradcheck;
pub mod checkpoint;
pub mod data;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
