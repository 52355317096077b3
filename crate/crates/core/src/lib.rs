//! Encoder-decoder transformer for vehicle-group trajectory modeling.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithmic piece of
//! the pipeline:
//!
//! - [`ingest`]: tiling raw tracks into spatio-temporal domains and packing
//!   them into fixed-slot, normalized [`ingest::Sample`]s.
//! - [`syngen`]: a deterministic multi-lane car-following corpus generator.
//! - [`noise`]: span masking and frame swapping used during pretraining.
//! - [`net`]: the transformer itself with hand-written reverse-mode gradients.
//! - [`train`]: losses, learning-rate schedule, Adam, pretraining and
//!   compensation fine-tuning loops, checkpoint encoding.
//! - [`infer`]: one-shot prediction, sliding-window rollout, presence
//!   detection and trajectory extraction.
//! - [`eval`]: RMSE, overlap rate, IoU, car-count delta and speed deviation.
//!
//! File IO, configuration files and the command line live in the companion
//! `trajformer` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod eval;
pub mod exec;
pub mod infer;
pub mod ingest;
pub mod mat;
pub mod net;
pub mod noise;
pub mod real;
pub mod rng;
pub mod syngen;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
