//! Sequence-to-sequence transformer whose attention value path is
//! transformed by a recursive gated convolution, together with the
//! training, analysis and verification harness around it.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 tensors on a reverse-mode gradient tape
//! - [`params`]: named parameter store shared across tapes
//! - [`gnconv`]: gated convolution and its recursive generalization
//! - [`esa`]: multi-head attention with internal / serial / parallel
//!   fusion of the convolutional path
//! - [`model`]: encoder-decoder assembly, greedy decoding, checkpoints
//! - [`analysis`]: parameter counting and overhead tables
//! - [`task`] / [`train`] / [`metrics`]: synthetic seq2seq tasks, the
//!   optimizer and training loop, ablation drivers and evaluation
//! - [`gradcheck`]: central finite-difference verification suites
//!
//! Batch-level work (training gradients, evaluation decoding, gradient
//! checks) fans out through [`parallel::batch_map`], which uses rayon
//! under the default `parallel` feature and falls back to a sequential
//! loop without it. Results are reduced in index order either way, so
//! outputs are bit-identical across both modes and any thread count.

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod esa;
pub mod gnconv;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{PadMode, Tape, Tensor};
