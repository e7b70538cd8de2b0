//! Poll-and-pool (PnP) feature abstraction for transformer workloads.
//!
//! The crate bundles everything needed to study adaptive token sampling at
//! desk scale:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine over `f64` tensors, with
//!   a central-difference gradient checker.
//! - [`sampler`]: the scoring network, poll and pool samplers, abstract token
//!   set assembly, reverse projection and the random poll-ratio schedule.
//! - [`transformer`]: a compact post-norm encoder/decoder that accepts any
//!   token count.
//! - [`cost`]: multiply-accumulate cost model with and without PnP.
//! - [`density`]: computation density maps over the feature grid.
//! - [`harness`]: synthetic scenes, set-prediction loss, training loop and
//!   sampler learning statistics.
//! - [`subsample`]: class-incremental dataset subsampling.

pub mod cost;
pub mod density;
pub mod error;
pub mod harness;
pub mod instance;
pub mod rng;
pub mod sampler;
pub mod subsample;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
