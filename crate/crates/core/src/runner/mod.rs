//! Experiment orchestration: training per iteration, evaluation, acquisition,
//! oracle calls, pool updates, metrics and resumable run state.

mod config;
mod experiment;
mod metrics;
mod train;

pub use config::*;
pub use experiment::*;
pub use metrics::*;
pub use train::*;
