//! Built-in analytic objectives, evaluated without spawning a process.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::error::{Error, Result};
use crate::optimizer::{Assignment, Domain, ParameterSpace};
use crate::store::Stream;

use super::{KillReason, LogSink, Outcome};

/// Optimum location: one number for every numeric parameter, or one per parameter name
/// (missing names default to 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Center {
    All(f64),
    PerParam(BTreeMap<String, f64>),
}

impl Default for Center {
    fn default() -> Self {
        Center::All(0.0)
    }
}

impl Center {
    fn at(&self, name: &str) -> f64 {
        match self {
            Center::All(c) => *c,
            Center::PerParam(m) => m.get(name).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", content = "params", rename_all = "snake_case")]
pub enum Objective {
    /// `-Σ (x - center)²` over numeric parameters.
    NegatedQuadratic {
        #[serde(default)]
        center: Center,
    },
    /// `-Σ x²` over numeric parameters.
    Sphere,
    /// Fails when `param < fail_below`, otherwise behaves like `negated_quadratic`.
    StepFailure {
        param: String,
        fail_below: f64,
        #[serde(default)]
        center: Center,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub objective: Objective,
    /// Simulated evaluation time.
    #[serde(default)]
    pub duration_ms: u64,
}

impl SyntheticSpec {
    pub fn validate(&self, space: &ParameterSpace) -> Result<()> {
        if let Objective::StepFailure { param, .. } = &self.objective {
            let p = space
                .params()
                .iter()
                .find(|p| &p.name == param)
                .ok_or_else(|| {
                    Error::validation(
                        "synthetic.params.param",
                        format!("no parameter named `{param}`"),
                    )
                })?;
            if matches!(p.domain, Domain::Categorical { .. }) {
                return Err(Error::validation(
                    "synthetic.params.param",
                    "step_failure needs a numeric parameter",
                ));
            }
        }
        Ok(())
    }

    /// The objective's value at `assignment`, or the failure reason.
    pub fn evaluate(&self, assignment: &Assignment) -> std::result::Result<f64, String> {
        let neg_sq = |center: &Center| {
            -assignment
                .iter()
                .filter_map(|(k, v)| v.as_f64().map(|x| (x - center.at(k)).powi(2)))
                .sum::<f64>()
        };
        match &self.objective {
            Objective::NegatedQuadratic { center } => Ok(neg_sq(center)),
            Objective::Sphere => Ok(neg_sq(&Center::All(0.0))),
            Objective::StepFailure {
                param,
                fail_below,
                center,
            } => {
                let x = assignment
                    .get(param)
                    .and_then(|v| v.as_f64())
                    .ok_or_else(|| format!("parameter `{param}` missing"))?;
                if x < *fail_below {
                    Err(format!("objective failure: {param} < {fail_below}"))
                } else {
                    Ok(neg_sq(center))
                }
            }
        }
    }
}

/// Waits the simulated duration (or until killed), then evaluates the objective.
pub async fn synthetic_execute(
    spec: &SyntheticSpec,
    assignment: &Assignment,
    sink: &dyn LogSink,
    kill: oneshot::Receiver<KillReason>,
) -> Outcome {
    let started = Instant::now();
    let args = serde_json::to_string(assignment).unwrap_or_default();
    sink.emit(Stream::Stdout, 0, format!("evaluating {args}"));
    let kill = async {
        match kill.await {
            Ok(reason) => reason,
            Err(_) => std::future::pending().await,
        }
    };
    tokio::select! {
        _ = tokio::time::sleep(Duration::from_millis(spec.duration_ms)) => {}
        reason = kill => return Outcome::killed(reason.as_str(), started.elapsed()),
    }
    match spec.evaluate(assignment) {
        Ok(v) => {
            sink.emit(Stream::Stdout, 1, format!("value {v}"));
            Outcome::succeeded(v, Some(0), started.elapsed())
        }
        Err(reason) => {
            sink.emit(Stream::Stderr, 0, reason.clone());
            Outcome::failed(reason, Some(1), started.elapsed())
        }
    }
}
