//! Structured channel pruning for small convolutional networks: training,
//! l1 and Fisher saliency, sequential prune-and-tune, architecture
//! extraction and copycat scaling, exact parameter/MAC accounting, and an
//! inference benchmark harness.
//!
//! Everything runs on a self-contained f32 tensor engine with reverse-mode
//! autodiff; no external compute framework is involved. See the crate's
//! `examples/` directory for one runnable walkthrough per capability.

pub mod accounting;
pub mod arch;
pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod net;
pub mod prune;
pub mod saliency;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
