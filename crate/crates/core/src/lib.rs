//! Long-term point tracking with object priors.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense arrays, an eager reverse-mode tape, and a
//!   finite-difference gradient checker.
//! - [`encoder`]: residual CNN feature extractor followed by windowed
//!   contextual attention.
//! - [`tracker`]: iterative refinement of point trajectories from
//!   multi-scale correlation, plus sliding-window chaining for long videos.
//! - [`losses`]: iteration-weighted distance loss and the instance-mask
//!   objectness regularizer.
//! - [`synth`]: deterministic synthetic clips with instance masks.
//! - [`metrics`]: δ_avg, Survival and median trajectory error.
//! - [`train`]: AdamW, one-cycle schedule, checkpoints, the training loop
//!   and the ablation driver.

pub mod encoder;
mod error;
pub mod losses;
pub mod metrics;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Real, Tensor, TensorError, Var};
