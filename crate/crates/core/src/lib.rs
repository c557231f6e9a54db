//! Dynamic hyperpixel flow: semantic correspondence by matching hypercolumns
//! built from a per-pair, dynamically gated subset of backbone layers.
//!
//! The crate ingests precomputed feature pyramids (or builds them with a
//! seeded toy backbone), learns the gating modules with hand-derived
//! gradients, and evaluates keypoint transfer with PCK.

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod gating;
pub mod matching;
pub mod objective;
pub mod pyramid;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};
