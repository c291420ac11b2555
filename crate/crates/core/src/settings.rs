//! Tunables read from `$ORCHESTRATE_HOME/settings.yaml`. Every field is optional.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::DEFAULT_GRID_CAP;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Live clusters allowed per account.
    pub cluster_quota: usize,
    /// Most GPUs a single run may request: the largest node in the catalog.
    pub max_gpus_per_run: u32,
    /// How long a node must sit empty before the autoscaler may remove it.
    pub idle_timeout_ms: u64,
    /// Time between SIGTERM and SIGKILL when stopping a run.
    pub kill_grace_ms: u64,
    /// Period of the autoscaler.
    pub autoscale_interval_ms: u64,
    pub grid_cap: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            cluster_quota: 3,
            max_gpus_per_run: 8,
            idle_timeout_ms: 30_000,
            kill_grace_ms: 5_000,
            autoscale_interval_ms: 1_000,
            grid_cap: DEFAULT_GRID_CAP,
        }
    }
}

impl Settings {
    pub fn load(home: &Path) -> Result<Self> {
        let path = home.join("settings.yaml");
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_yaml::from_str(&text)
                .map_err(|e| Error::validation(path.display().to_string(), e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Settings::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn idle_timeout(&self) -> Duration {
        Duration::from_millis(self.idle_timeout_ms)
    }

    pub fn kill_grace(&self) -> Duration {
        Duration::from_millis(self.kill_grace_ms)
    }

    pub fn autoscale_interval(&self) -> Duration {
        Duration::from_millis(self.autoscale_interval_ms.max(1))
    }
}
