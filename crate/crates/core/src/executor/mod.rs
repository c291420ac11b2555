//! Model evaluation.
//!
//! A run either executes as a supervised local process ([`process`]) or is evaluated
//! in-process against a built-in objective ([`synthetic`]). Both report an [`Outcome`] and
//! emit log lines through a [`LogSink`].
//!
//! # Process protocol
//!
//! The process is started in its own process group with these variables set:
//!
//! | variable | content |
//! |---|---|
//! | `ORCHESTRATE_EXPERIMENT_ID` | experiment id |
//! | `ORCHESTRATE_RUN_ID` | run id |
//! | `ORCHESTRATE_SUGGESTION_FILE` | path of a JSON object mapping parameter names to values |
//! | `ORCHESTRATE_OBSERVATION_FILE` | path where the model writes its result |
//! | `ORCHESTRATE_ASSIGNED_GPUS` | comma-separated GPU slot indices, empty when none |
//!
//! The result is a JSON object with a finite number `value`, e.g. `{"value": 0.8}`. An
//! optional boolean `failed: true` marks the evaluation failed whatever the exit code.
//! Exit status 0 with a readable finite value is a success; anything else is a failure.

mod lines;
pub mod process;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::Stream;

pub use lines::MAX_LINE_BYTES;
pub use synthetic::{synthetic_execute, Center, Objective, SyntheticSpec};

pub const ENV_EXPERIMENT_ID: &str = "ORCHESTRATE_EXPERIMENT_ID";
pub const ENV_RUN_ID: &str = "ORCHESTRATE_RUN_ID";
pub const ENV_SUGGESTION_FILE: &str = "ORCHESTRATE_SUGGESTION_FILE";
pub const ENV_OBSERVATION_FILE: &str = "ORCHESTRATE_OBSERVATION_FILE";
pub const ENV_ASSIGNED_GPUS: &str = "ORCHESTRATE_ASSIGNED_GPUS";

/// How to start one evaluation of the user's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub env: BTreeMap<String, String>,
    /// Wall-clock limit per run; unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<f64>,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        if self.command.first().is_none_or(|c| c.is_empty()) {
            return Err(Error::validation(
                "run.command",
                "command must not be empty",
            ));
        }
        if let Some(t) = self.timeout_secs {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::validation(
                    "run.timeout_secs",
                    "timeout must be a positive number of seconds",
                ));
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Option<Duration> {
        self.timeout_secs.map(Duration::from_secs_f64)
    }
}

/// What an experiment's runs execute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Run(RunSpec),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disposition {
    Succeeded,
    Failed,
    Killed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub disposition: Disposition,
    pub value: Option<f64>,
    pub reason: Option<String>,
    pub exit_code: Option<i32>,
    pub duration: Duration,
}

impl Outcome {
    pub fn succeeded(value: f64, exit_code: Option<i32>, duration: Duration) -> Self {
        Outcome {
            disposition: Disposition::Succeeded,
            value: Some(value),
            reason: None,
            exit_code,
            duration,
        }
    }

    pub fn failed(reason: impl Into<String>, exit_code: Option<i32>, duration: Duration) -> Self {
        Outcome {
            disposition: Disposition::Failed,
            value: None,
            reason: Some(reason.into()),
            exit_code,
            duration,
        }
    }

    pub fn killed(reason: impl Into<String>, duration: Duration) -> Self {
        Outcome {
            disposition: Disposition::Killed,
            value: None,
            reason: Some(reason.into()),
            exit_code: None,
            duration,
        }
    }
}

/// Why a run is being stopped from outside.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillReason {
    ExperimentStopped,
    Shutdown,
}

impl KillReason {
    pub fn as_str(self) -> &'static str {
        match self {
            KillReason::ExperimentStopped => "experiment stopped",
            KillReason::Shutdown => "controller shutdown",
        }
    }
}

/// Receives model output one line at a time. `seq` counts lines per stream from 0.
pub trait LogSink: Send + Sync {
    fn emit(&self, stream: Stream, seq: u64, line: String);
}

impl<F: Fn(Stream, u64, String) + Send + Sync> LogSink for F {
    fn emit(&self, stream: Stream, seq: u64, line: String) {
        self(stream, seq, line)
    }
}

/// Parses the observation file content written by a model.
pub fn parse_observation(body: &[u8]) -> std::result::Result<ReportedMetric, String> {
    #[derive(Deserialize)]
    struct Raw {
        #[serde(default)]
        value: Option<serde_json::Value>,
        #[serde(default)]
        failed: Option<bool>,
    }
    let raw: Raw = serde_json::from_slice(body).map_err(|e| format!("missing observation: {e}"))?;
    if raw.failed == Some(true) {
        return Ok(ReportedMetric::Failed);
    }
    let value = match raw.value {
        Some(serde_json::Value::Number(n)) => n.as_f64(),
        Some(serde_json::Value::String(s)) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .ok_or_else(|| "missing observation: no numeric `value`".to_string())?;
    if !value.is_finite() {
        return Err("non-finite metric".into());
    }
    Ok(ReportedMetric::Value(value))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReportedMetric {
    Value(f64),
    Failed,
}
