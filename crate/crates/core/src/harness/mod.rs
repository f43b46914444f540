//! Training, evaluation, experiment tables and artifact export.

pub mod config;
pub mod eval;
pub mod experiments;
pub mod export;
pub mod train;

pub use config::RunConfig;
pub use eval::{evaluate, BranchMetrics, Confusion, MetricsReport};
pub use train::{train, TrainOutput};
