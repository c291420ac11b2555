//! Controller discovery and HTTP calls.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader};
use std::os::unix::process::CommandExt;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use orchestrate_core::controller::api::{Created, Stopped};
use orchestrate_core::controller::{ClusterStatusReport, ExperimentConfig, StatusReport};
use orchestrate_core::ids::ExperimentId;
use orchestrate_core::store::{LogRecord, StateRoot, HOME_ENV};
use reqwest::blocking::{Client, Response};
use serde::de::DeserializeOwned;

use crate::UserError;

const SPAWN_TIMEOUT: Duration = Duration::from_secs(15);

pub struct Api {
    base: String,
    http: Client,
}

impl Api {
    fn new(endpoint: &str) -> anyhow::Result<Self> {
        Ok(Api {
            base: format!("http://{endpoint}"),
            http: Client::builder()
                .connect_timeout(Duration::from_secs(2))
                .timeout(None)
                .build()?,
        })
    }

    /// Connects to the controller recorded for `cluster` if it answers as that cluster.
    pub fn reachable(root: &StateRoot, cluster: &str) -> Option<Api> {
        let info = root.load_cluster(cluster).ok()?.controller?;
        let api = Api::new(&info.endpoint).ok()?;
        let status: ClusterStatusReport = api
            .http
            .get(api.url("/v1/cluster/status"))
            .timeout(Duration::from_secs(5))
            .send()
            .ok()
            .filter(|r| r.status().is_success())?
            .json()
            .ok()?;
        (status.name == cluster).then_some(api)
    }

    /// Returns the cluster's controller, starting one in the background if none answers.
    pub fn ensure(root: &StateRoot, cluster: &str) -> anyhow::Result<Api> {
        if let Some(api) = Api::reachable(root, cluster) {
            return Ok(api);
        }
        let log_path = root.cluster_dir(cluster).join("controller.log");
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?;
        let exe = std::env::current_exe().context("locating the orchestrate executable")?;
        let mut child = Command::new(exe)
            .args(["controller", "serve", "-n", cluster])
            .env(HOME_ENV, root.path())
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(log)
            .process_group(0)
            .spawn()
            .context("starting the cluster controller")?;
        let deadline = Instant::now() + SPAWN_TIMEOUT;
        loop {
            if let Some(api) = Api::reachable(root, cluster) {
                return Ok(api);
            }
            if let Some(status) = child.try_wait()? {
                // another invocation may have won the race to start it
                if let Some(api) = Api::reachable(root, cluster) {
                    return Ok(api);
                }
                bail!(
                    "controller exited with {status}: {}",
                    last_line(&log_path).unwrap_or_default()
                );
            }
            if Instant::now() > deadline {
                bail!("controller did not come up; see {}", log_path.display());
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn check(resp: Response) -> anyhow::Result<Response> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let body: serde_json::Value = resp.json().unwrap_or_default();
        let message = body["error"]
            .as_str()
            .map(str::to_owned)
            .unwrap_or_else(|| format!("controller returned {status}"));
        if status.is_client_error() {
            Err(UserError(message).into())
        } else {
            Err(anyhow!(message))
        }
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> anyhow::Result<T> {
        let resp = self.http.get(self.url(path)).send()?;
        Ok(Self::check(resp)?.json()?)
    }

    pub fn create(&self, config: &ExperimentConfig) -> anyhow::Result<ExperimentId> {
        let resp = self
            .http
            .post(self.url("/v1/experiments"))
            .json(config)
            .send()?;
        Ok(Self::check(resp)?.json::<Created>()?.id)
    }

    pub fn status(&self, id: &ExperimentId) -> anyhow::Result<StatusReport> {
        self.get(&format!("/v1/experiments/{id}"))
    }

    pub fn cluster_status(&self) -> anyhow::Result<ClusterStatusReport> {
        self.get("/v1/cluster/status")
    }

    pub fn stop(&self, id: &ExperimentId) -> anyhow::Result<Stopped> {
        let resp = self
            .http
            .post(self.url(&format!("/v1/experiments/{id}/stop")))
            .send()?;
        Ok(Self::check(resp)?.json()?)
    }

    /// Streams log records to `each` until the controller ends the response.
    pub fn logs(
        &self,
        id: &ExperimentId,
        follow: bool,
        mut each: impl FnMut(LogRecord) -> anyhow::Result<()>,
    ) -> anyhow::Result<()> {
        let path = if follow {
            format!("/v1/experiments/{id}/logs?follow=true")
        } else {
            format!("/v1/experiments/{id}/logs")
        };
        let resp = Self::check(self.http.get(self.url(&path)).send()?)?;
        for line in BufReader::new(resp).lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            each(serde_json::from_str(&line)?)?;
        }
        Ok(())
    }
}

fn last_line(path: &std::path::Path) -> Option<String> {
    let text = std::fs::read_to_string(path).ok()?;
    text.lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .map(str::to_owned)
}
