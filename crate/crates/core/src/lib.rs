//! Long-sequence attention benchmarking toolkit.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`tape`], [`rng`], [`meter`]: a small f32 substrate with
//!   reverse-mode gradients and live-byte accounting.
//! * [`attention`]: full, mask-pattern, low-rank, kernel, LSH, Sinkhorn and
//!   synthesizer attention.
//! * [`model`]: encoder assembly, classification and two-tower heads,
//!   training with Adam, checkpoints.
//! * [`tasks`] and [`data`]: synthetic task generators and real-data loaders.
//! * [`metrics`]: required attention span, accuracy, approximation error.
//! * [`bench`]: throughput and peak-memory benchmarking with report emission.

pub mod attention;
pub mod bench;
pub mod data;
pub mod error;
pub mod meter;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{grad, Var};
pub use tensor::{Mask, Tensor};
