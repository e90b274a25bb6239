//! Spatial-temporal mixture-of-experts transformer for long-term,
//! cross-city human mobility prediction.
//!
//! This crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: the dense tensor type and its reverse-mode tape, the grid and
//! trajectory data model, the embedding / encoder / MoE head stack, the
//! optimizer and training loops, the frequency baseline and the evaluation
//! metrics. File formats, the command line and anything touching the file
//! system live in the `stmoe` crate.

#![no_std]
// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

extern crate alloc;

pub mod baselines;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod metrics;
pub mod mobility;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
