//! Spatial-temporal graph attention fusion for low-cost air-quality sensor
//! calibration.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every numeric piece
//! of the pipeline:
//!
//! - [`tensor`] and [`tape`]: dense `f64` arrays and a reverse-mode
//!   automatic differentiation tape.
//! - [`layers`]: 1D convolution, LSTM, layer normalization and fully
//!   connected layers.
//! - [`gat`]: the GATv2 attention layer over an arbitrary neighbor graph.
//! - [`model`]: the STGAT-Fuser network, its ablations and the baselines.
//! - [`data`]: synthetic corpora, chronological splits, min-max scaling and
//!   sliding windows.
//! - [`train`]: MSE loss, Adam and the early-stopped training loop.
//! - [`eval`]: RMSE/MAE metrics and multi-run aggregation.
//!
//! File formats, the CLI and experiment bookkeeping live in the `stgat`
//! companion crate.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod data;
pub mod error;
pub mod eval;
pub mod gat;
pub mod gradcheck;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Primitive, Tape, Var};
pub use tensor::Tensor;
