//! Multi-modal learnable queries (MMLQ) for image aesthetics assessment.
//!
//! Learnable query tokens gather aesthetic evidence from frozen visual and
//! textual token embeddings through stacked interaction blocks
//! (optional self-attention, per-modality cross-attention, optional
//! feed-forward), then a small head predicts a distribution over score bins.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, OpKind, Tape, Tensor, Var};
