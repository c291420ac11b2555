//! Experiment configuration file.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{Execution, RunSpec, SyntheticSpec};
use crate::optimizer::{
    grid_enumerate, validate_space, EvolutionParams, ParameterDef, ParameterSpace, StrategyKind,
    StrategySettings,
};
use crate::scheduler::ResourceRequest;
use crate::settings::Settings;

/// ```yaml
/// name: alpha
/// cluster_name: orchestrate-cluster
/// parameters:
///   - {name: lr, type: double, bounds: {min: 1.0e-4, max: 1.0e-1}, scale: log}
///   - {name: depth, type: int, bounds: {min: 2, max: 8}}
/// strategy: random
/// seed: 7
/// observation_budget: 300
/// parallel_bandwidth: 15
/// resources: {gpus: 1, cpus: 1}
/// run:
///   command: [python3, train.py]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_name: Option<String>,
    pub parameters: Vec<ParameterDef>,
    #[serde(default)]
    pub strategy: StrategyKind,
    /// Drawn at creation when absent; always recorded with the experiment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub evolution: EvolutionParams,
    pub observation_budget: u64,
    pub parallel_bandwidth: u32,
    #[serde(default)]
    pub resources: ResourceRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

/// A config that passed validation, with defaults resolved.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub name: String,
    pub space: ParameterSpace,
    pub strategy: StrategySettings,
    pub observation_budget: u64,
    pub parallel_bandwidth: u32,
    pub resources: ResourceRequest,
    pub execution: Execution,
}

impl ExperimentConfig {
    pub fn from_yaml(text: &str) -> Result<Self> {
        serde_yaml::from_str(text).map_err(|e| {
            let path = e
                .location()
                .map(|l| format!("line {} column {}", l.line(), l.column()))
                .unwrap_or_else(|| "<document>".into());
            Error::validation(path, e.to_string())
        })
    }

    pub fn validate(&self, settings: &Settings) -> Result<ValidatedConfig> {
        if self.name.trim().is_empty() {
            return Err(Error::validation("name", "name must not be empty"));
        }
        if self.observation_budget == 0 {
            return Err(Error::validation(
                "observation_budget",
                "observation_budget must be at least 1",
            ));
        }
        if self.parallel_bandwidth == 0 {
            return Err(Error::validation(
                "parallel_bandwidth",
                "parallel_bandwidth must be at least 1",
            ));
        }
        let space = validate_space(&self.parameters)?;
        self.evolution.validate()?;
        if self.resources.cpus == 0 {
            return Err(Error::validation(
                "resources.cpus",
                "cpus must be at least 1",
            ));
        }
        self.resources.validate(settings.max_gpus_per_run)?;
        let execution = match (&self.run, &self.synthetic) {
            (Some(run), None) => {
                run.validate()?;
                Execution::Run(run.clone())
            }
            (None, Some(syn)) => {
                syn.validate(&space)?;
                Execution::Synthetic(syn.clone())
            }
            _ => {
                return Err(Error::validation(
                    "run/synthetic",
                    "exactly one of `run` or `synthetic` must be given",
                ))
            }
        };
        if self.strategy == StrategyKind::Grid {
            let size = grid_enumerate(&space, settings.grid_cap)?.len() as u64;
            if self.observation_budget > size {
                return Err(Error::validation(
                    "observation_budget",
                    format!(
                        "grid has {size} points, fewer than the observation budget of {}",
                        self.observation_budget
                    ),
                ));
            }
        }
        Ok(ValidatedConfig {
            name: self.name.clone(),
            space,
            strategy: StrategySettings {
                kind: self.strategy,
                seed: self.seed.unwrap_or_else(rand::random),
                evolution: self.evolution,
            },
            observation_budget: self.observation_budget,
            parallel_bandwidth: self.parallel_bandwidth,
            resources: self.resources,
            execution,
        })
    }
}
