//! Weakly supervised multi-attribute CNN training.
//!
//! Each training image carries a single positive class label even though
//! several attributes are present. The training loop warms up on weak
//! 0.95/0.05 target vectors under a sigmoid cross-entropy head, then
//! periodically reads the spatial mean responses of every convolutional
//! feature map, compares them against per-class response histograms, and
//! carves pseudo-label probability vectors that replace the targets until the
//! next carving pass. Evaluation is strict top-K precision with K taken from
//! each test image's ground truth.

pub mod carve;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
mod hash;
pub mod loss;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
