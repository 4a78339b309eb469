//! Cross-modal consistency guided active learning.
//!
//! Two feature streams (EEG-like and face-like) are encoded into a shared
//! latent space and aligned with a symmetric contrastive loss. Per-sample
//! reliability targets are derived from the batch similarity matrix, and an
//! EEG-only classification head drives entropy-based acquisition from an
//! unlabeled pool.

pub mod consistency;
pub mod data;
pub mod gradcore;
pub mod model;
pub mod oracle;
pub mod pool;
pub mod report;
pub mod runner;

mod error;
mod seeding;

pub use error::{Error, Result};

/// Index of a sample within a dataset.
pub type SampleId = u64;

/// Class index in `0..C`.
pub type ClassLabel = usize;
