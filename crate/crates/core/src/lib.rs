//! Continual learning over a mixed sequence of similar and dissimilar tasks.
//!
//! A shared two-layer knowledge base is partitioned between tasks by learned
//! unit masks. Units used by earlier dissimilar tasks are frozen through
//! gradient blocking, while outputs of earlier similar tasks are combined by
//! a per-task attention block so knowledge flows both forward and backward.
//! Similarity is decided per predecessor by comparing a frozen-feature
//! transfer readout against an independently trained reference network.

pub mod autodiff;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod kb;
pub mod kta;
pub mod learner;
pub mod masks;
pub mod rng;
pub mod similarity;
pub mod train;

pub use error::{Error, Result};
