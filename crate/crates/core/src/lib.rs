//! Orchestration of parallel hyperparameter-tuning experiments on simulated clusters.

pub mod controller;
pub mod error;
pub mod executor;
pub mod ids;
pub mod logs;
pub mod optimizer;
pub mod provider;
pub mod scheduler;
pub mod settings;
pub mod store;

pub use error::{Error, Result};
