//! Per-cluster controller: the scheduling and suggestion loop behind the HTTP API.

pub mod api;
mod config;
mod driver;
pub mod engine;
mod report;

pub use config::{ExperimentConfig, ValidatedConfig};
pub use driver::{serve, start, Controller, RunningController, StopOutcome};
pub use engine::{stored_status, Event, EventKind};
pub use report::{
    BudgetCounts, ClusterStatusReport, ControllerStatus, NodeStatus, ObservationPoint, PoolStatus,
    RunCounts, RunRow, StatusReport,
};
