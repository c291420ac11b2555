//! Durable state layout.
//!
//! ```text
//! $ORCHESTRATE_HOME/
//!   experiments/<id>/meta           experiment metadata (JSON document)
//!   experiments/<id>/observations   one JSON observation per line, append-only
//!   clusters/<name>/cluster.json    cluster state
//!   clusters/<name>/runs/<id>.jsonl run transitions, one RunRecord per line
//!   clusters/<name>/logs/<id>/<run>.<stream>
//!   clusters/<name>/scratch/<run>/  suggestion and observation files
//! ```
//!
//! Experiment metadata lives outside every cluster directory and survives cluster
//! destruction. Everything under `clusters/<name>/` is removed with the cluster.
//!
//! Observations are appended with one `write` per record followed by `fdatasync`. A
//! crash can therefore leave at most a torn final line, which readers ignore and the
//! next writer truncates away.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::executor::Execution;
use crate::ids::{ExperimentId, RunId, SuggestionId};
use crate::optimizer::{Assignment, ParameterSpace, StrategySettings};
use crate::provider::ClusterState;
use crate::scheduler::{ResourceRequest, RunRecord};

pub type Timestamp = DateTime<Utc>;

pub const HOME_ENV: &str = "ORCHESTRATE_HOME";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentState {
    Active,
    Completed,
    Deleted,
}

impl ExperimentState {
    pub fn is_terminal(self) -> bool {
        self != ExperimentState::Active
    }
}

impl std::fmt::Display for ExperimentState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            ExperimentState::Active => "active",
            ExperimentState::Completed => "completed",
            ExperimentState::Deleted => "deleted",
        })
    }
}

/// The result of evaluating one suggestion: a metric value or a failure, never both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub suggestion_id: SuggestionId,
    pub assignment: Assignment,
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub failed: bool,
    pub run_id: RunId,
    pub reported_at: Timestamp,
}

impl Observation {
    pub fn success(&self) -> Option<f64> {
        self.value.filter(|_| !self.failed)
    }

    fn check(&self) -> Result<()> {
        match (self.value, self.failed) {
            (Some(v), false) if v.is_finite() => Ok(()),
            (Some(_), false) => Err(Error::validation("value", "metric must be finite")),
            (None, true) => Ok(()),
            _ => Err(Error::validation(
                "value",
                "an observation carries either a value or failed=true",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub assignment: Assignment,
    pub value: f64,
}

/// Everything about an experiment except its observation history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMeta {
    pub id: ExperimentId,
    pub name: String,
    pub cluster_name: String,
    pub space: ParameterSpace,
    pub strategy: StrategySettings,
    pub observation_budget: u64,
    pub parallel_bandwidth: u32,
    pub resources: ResourceRequest,
    pub execution: Execution,
    pub state: ExperimentState,
    pub created_at: Timestamp,
    #[serde(default)]
    pub closed_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    #[serde(flatten)]
    pub meta: ExperimentMeta,
    pub observations: Vec<Observation>,
    pub best: Option<Best>,
}

impl ExperimentRecord {
    pub fn new(meta: ExperimentMeta) -> Self {
        ExperimentRecord {
            meta,
            observations: Vec::new(),
            best: None,
        }
    }

    pub fn id(&self) -> &ExperimentId {
        &self.meta.id
    }

    pub fn state(&self) -> ExperimentState {
        self.meta.state
    }

    pub fn successes(&self) -> usize {
        self.observations.iter().filter(|o| !o.failed).count()
    }

    pub fn failures(&self) -> usize {
        self.observations.iter().filter(|o| o.failed).count()
    }

    /// Validates and applies `obs` in memory. Returns true when the experiment just
    /// reached its budget and became completed.
    pub fn accept(&mut self, obs: Observation) -> Result<bool> {
        if self.meta.state.is_terminal() {
            return Err(Error::Rejected(format!(
                "experiment {} is {}",
                self.meta.id, self.meta.state
            )));
        }
        if self.observations.len() as u64 >= self.meta.observation_budget {
            return Err(Error::Rejected(format!(
                "experiment {} has exhausted its observation budget",
                self.meta.id
            )));
        }
        obs.check()?;
        if self
            .observations
            .iter()
            .any(|o| o.suggestion_id == obs.suggestion_id)
        {
            return Err(Error::Rejected(format!(
                "duplicate observation for suggestion {}",
                obs.suggestion_id
            )));
        }
        if let Some(v) = obs.success() {
            if self.best.as_ref().is_none_or(|b| v > b.value) {
                self.best = Some(Best {
                    assignment: obs.assignment.clone(),
                    value: v,
                });
            }
        }
        let at = obs.reported_at;
        self.observations.push(obs);
        if self.observations.len() as u64 == self.meta.observation_budget {
            self.meta.state = ExperimentState::Completed;
            self.meta.closed_at = Some(at);
            return Ok(true);
        }
        Ok(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Stdout,
    Stderr,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Stdout => "stdout",
            Stream::Stderr => "stderr",
        }
    }
}

/// One line of model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub experiment_id: ExperimentId,
    pub run_id: RunId,
    pub stream: Stream,
    /// Strictly increasing within `(run_id, stream)`, starting at 0.
    pub seq: u64,
    /// Arrival position within the experiment's merged log; the resume cursor for readers.
    pub offset: u64,
    pub timestamp: Timestamp,
    pub line: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurgeReport {
    pub logs_deleted: u64,
    pub experiments_retained: u64,
}

/// Handle on a state directory.
#[derive(Debug, Clone)]
pub struct StateRoot {
    path: PathBuf,
}

/// Exclusive advisory lock on the state root, released on drop.
pub struct HomeLock {
    _file: File,
}

impl StateRoot {
    /// Opens `path` as a state root, creating the directory skeleton if needed.
    pub fn init_home(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if path.exists() && !path.is_dir() {
            return Err(Error::NotADirectory(path));
        }
        for sub in ["experiments", "clusters"] {
            let dir = path.join(sub);
            fs::create_dir_all(&dir).at(&dir)?;
        }
        Ok(StateRoot { path })
    }

    /// Opens the state root named by `ORCHESTRATE_HOME`, defaulting to `~/.orchestrate`.
    pub fn from_env() -> Result<Self> {
        Self::init_home(Self::default_path())
    }

    pub fn default_path() -> PathBuf {
        if let Some(p) = std::env::var_os(HOME_ENV).filter(|p| !p.is_empty()) {
            return PathBuf::from(p);
        }
        let home = std::env::var_os("HOME")
            .map(PathBuf::from)
            .unwrap_or_default();
        home.join(".orchestrate")
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn lock(&self) -> Result<HomeLock> {
        let path = self.path.join(".lock");
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .at(&path)?;
        file.lock().at(&path)?;
        Ok(HomeLock { _file: file })
    }

    pub fn experiment_dir(&self, id: &ExperimentId) -> PathBuf {
        self.path.join("experiments").join(id.as_str())
    }

    pub fn cluster_dir(&self, name: &str) -> PathBuf {
        self.path.join("clusters").join(name)
    }

    pub fn log_dir(&self, cluster: &str, experiment: &ExperimentId) -> PathBuf {
        self.cluster_dir(cluster)
            .join("logs")
            .join(experiment.as_str())
    }

    pub fn log_path(
        &self,
        cluster: &str,
        experiment: &ExperimentId,
        run: &RunId,
        stream: Stream,
    ) -> PathBuf {
        self.log_dir(cluster, experiment)
            .join(format!("{run}.{}", stream.as_str()))
    }

    pub fn scratch_dir(&self, cluster: &str, run: &RunId) -> PathBuf {
        self.cluster_dir(cluster).join("scratch").join(run.as_str())
    }

    fn run_index_path(&self, cluster: &str, experiment: &ExperimentId) -> PathBuf {
        self.cluster_dir(cluster)
            .join("runs")
            .join(format!("{experiment}.jsonl"))
    }

    /* experiments */

    pub fn create_experiment(&self, meta: ExperimentMeta) -> Result<ExperimentRecord> {
        let dir = self.experiment_dir(&meta.id);
        if dir.exists() {
            return Err(Error::Conflict(format!(
                "experiment {} already exists",
                meta.id
            )));
        }
        fs::create_dir_all(&dir).at(&dir)?;
        File::create(dir.join("observations")).at(dir.join("observations"))?;
        write_json_atomic(&dir.join("meta"), &meta)?;
        Ok(ExperimentRecord::new(meta))
    }

    pub fn load_experiment(&self, id: &ExperimentId) -> Result<ExperimentRecord> {
        let dir = self.experiment_dir(id);
        let meta_path = dir.join("meta");
        if !meta_path.is_file() {
            return Err(Error::not_found("experiment", id.as_str()));
        }
        let stored: ExperimentMeta = read_json(&meta_path)?;
        let observations: Vec<Observation> = read_json_lines(&dir.join("observations"))?;
        // Replay through `accept` so best and completion are derived rather than trusted.
        let mut record = ExperimentRecord::new(ExperimentMeta {
            state: ExperimentState::Active,
            closed_at: None,
            ..stored.clone()
        });
        let budget = stored.observation_budget as usize;
        for obs in observations.into_iter().take(budget) {
            record.accept(obs).map_err(|e| Error::Corrupt {
                path: dir.join("observations"),
                message: e.to_string(),
            })?;
        }
        if stored.state.is_terminal() {
            record.meta.state = stored.state;
            record.meta.closed_at = stored.closed_at;
        }
        Ok(record)
    }

    /// All experiments, oldest first.
    pub fn list_experiments(&self) -> Result<Vec<ExperimentRecord>> {
        let dir = self.path.join("experiments");
        let mut ids: Vec<ExperimentId> = fs::read_dir(&dir)
            .at(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("meta").is_file())
            .map(|e| ExperimentId(e.file_name().to_string_lossy().into_owned()))
            .collect();
        ids.sort();
        ids.iter().map(|id| self.load_experiment(id)).collect()
    }

    /// Applies `obs` to `record` and makes it durable before returning.
    pub fn commit_observation(
        &self,
        record: &mut ExperimentRecord,
        obs: Observation,
    ) -> Result<()> {
        let mut next = record.clone();
        let completed = next.accept(obs.clone())?;
        let path = self.experiment_dir(record.id()).join("observations");
        append_line_durable(&path, &obs)?;
        if completed {
            write_json_atomic(&self.experiment_dir(record.id()).join("meta"), &next.meta)?;
        }
        *record = next;
        Ok(())
    }

    /// Loads experiment `id`, appends `obs`, and returns the updated record.
    pub fn record_observation(
        &self,
        id: &ExperimentId,
        obs: Observation,
    ) -> Result<ExperimentRecord> {
        let mut record = self.load_experiment(id)?;
        self.commit_observation(&mut record, obs)?;
        Ok(record)
    }

    /// Moves an active experiment to `deleted`. Terminal experiments are left untouched.
    pub fn mark_deleted(&self, record: &mut ExperimentRecord, at: Timestamp) -> Result<bool> {
        if record.meta.state.is_terminal() {
            return Ok(false);
        }
        record.meta.state = ExperimentState::Deleted;
        record.meta.closed_at = Some(at);
        write_json_atomic(&self.experiment_dir(record.id()).join("meta"), &record.meta)?;
        Ok(true)
    }

    /// Removes every log stored under `cluster` and closes the cluster's active
    /// experiments. Experiment metadata and observations are kept.
    pub fn purge_cluster_artifacts(&self, cluster: &str) -> Result<PurgeReport> {
        let dir = self.cluster_dir(cluster);
        if !dir.is_dir() {
            return Err(Error::not_found("cluster", cluster));
        }
        let logs = dir.join("logs");
        let mut logs_deleted = 0;
        if logs.is_dir() {
            for exp in fs::read_dir(&logs).at(&logs)? {
                let exp = exp.at(&logs)?.path();
                for file in fs::read_dir(&exp).at(&exp)? {
                    let file = file.at(&exp)?.path();
                    logs_deleted += count_lines(&file)?;
                }
            }
            fs::remove_dir_all(&logs).at(&logs)?;
        }
        let now = Utc::now();
        let mut experiments_retained = 0;
        for mut record in self.list_experiments()? {
            if record.meta.cluster_name == cluster {
                experiments_retained += 1;
                self.mark_deleted(&mut record, now)?;
            }
        }
        Ok(PurgeReport {
            logs_deleted,
            experiments_retained,
        })
    }

    /* clusters */

    pub fn save_cluster(&self, cluster: &ClusterState) -> Result<()> {
        let dir = self.cluster_dir(&cluster.name);
        fs::create_dir_all(&dir).at(&dir)?;
        write_json_atomic(&dir.join("cluster.json"), cluster)
    }

    pub fn load_cluster(&self, name: &str) -> Result<ClusterState> {
        let path = self.cluster_dir(name).join("cluster.json");
        if !path.is_file() {
            return Err(Error::not_found("cluster", name));
        }
        read_json(&path)
    }

    pub fn cluster_exists(&self, name: &str) -> bool {
        self.cluster_dir(name).join("cluster.json").is_file()
    }

    pub fn list_clusters(&self) -> Result<Vec<String>> {
        let dir = self.path.join("clusters");
        let mut names: Vec<String> = fs::read_dir(&dir)
            .at(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("cluster.json").is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        Ok(names)
    }

    pub fn remove_cluster(&self, name: &str) -> Result<()> {
        let dir = self.cluster_dir(name);
        // drop the marker first so a partially removed directory no longer counts
        let marker = dir.join("cluster.json");
        if marker.exists() {
            fs::remove_file(&marker).at(&marker)?;
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).at(&dir)?;
        }
        Ok(())
    }

    /* run index */

    pub fn append_run(&self, cluster: &str, run: &RunRecord) -> Result<()> {
        let path = self.run_index_path(cluster, &run.experiment_id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        let mut line = serde_json::to_vec(run).map_err(|e| Error::Internal(e.to_string()))?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .at(&path)?;
        f.write_all(&line).at(&path)
    }

    /// Latest state of each run of `experiment` on `cluster`, in creation order.
    pub fn load_runs(&self, cluster: &str, experiment: &ExperimentId) -> Result<Vec<RunRecord>> {
        let path = self.run_index_path(cluster, experiment);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut latest: std::collections::BTreeMap<RunId, RunRecord> = Default::default();
        for rec in read_json_lines::<RunRecord>(&path)? {
            latest.insert(rec.run_id.clone(), rec);
        }
        Ok(latest.into_values().collect())
    }

    /// Experiments with a run index under `cluster`.
    pub fn indexed_experiments(&self, cluster: &str) -> Result<Vec<ExperimentId>> {
        let dir = self.cluster_dir(cluster).join("runs");
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<ExperimentId> = fs::read_dir(&dir)
            .at(&dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                e.file_name()
                    .to_string_lossy()
                    .strip_suffix(".jsonl")
                    .map(ExperimentId::from)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    /* logs */

    /// Stored log records of `experiment`, in arrival order.
    pub fn read_logs(&self, cluster: &str, experiment: &ExperimentId) -> Result<Vec<LogRecord>> {
        let dir = self.log_dir(cluster, experiment);
        let mut records = Vec::new();
        if dir.is_dir() {
            for entry in fs::read_dir(&dir).at(&dir)? {
                let path = entry.at(&dir)?.path();
                records.extend(read_json_lines::<LogRecord>(&path)?);
            }
        }
        records.sort_by_key(|r| r.offset);
        Ok(records)
    }
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let body = serde_json::to_vec_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    {
        let mut f = File::create(&tmp).at(&tmp)?;
        f.write_all(&body).at(&tmp)?;
        f.write_all(b"\n").at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    fs::rename(&tmp, path).at(path)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = fs::read(path).at(path)?;
    serde_json::from_slice(&body).map_err(|e| Error::Corrupt {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

/// Parses a JSON-lines file. A final line without its newline is an interrupted
/// append and is skipped; any other unparsable line is corruption.
pub(crate) fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let body = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let complete = match body.iter().rposition(|&b| b == b'\n') {
        Some(i) => &body[..=i],
        None => &body[..0],
    };
    complete
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|line| {
            serde_json::from_slice(line).map_err(|e| Error::Corrupt {
                path: path.to_owned(),
                message: e.to_string(),
            })
        })
        .collect()
}

fn append_line_durable<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(value).map_err(|e| Error::Internal(e.to_string()))?;
    line.push(b'\n');
    let mut f = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)
        .at(path)?;
    drop_torn_tail(&mut f).at(path)?;
    f.write_all(&line).at(path)?;
    f.sync_data().at(path)
}

fn drop_torn_tail(f: &mut File) -> std::io::Result<()> {
    let len = f.metadata()?.len();
    if len == 0 {
        return Ok(());
    }
    let mut last = [0u8];
    f.seek(SeekFrom::Start(len - 1))?;
    f.read_exact(&mut last)?;
    if last[0] == b'\n' {
        return Ok(());
    }
    f.seek(SeekFrom::Start(0))?;
    let mut body = Vec::with_capacity(len as usize);
    f.read_to_end(&mut body)?;
    let keep = body.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    f.set_len(keep as u64)
}

fn count_lines(path: &Path) -> Result<u64> {
    let f = File::open(path).at(path)?;
    let mut n = 0;
    for line in BufReader::new(f).split(b'\n') {
        line.at(path)?;
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{Objective, SyntheticSpec};
    use crate::optimizer::{
        validate_space, Bounds, ParamKind, ParamValue, ParameterDef, Scale, StrategyKind,
    };

    pub(crate) fn meta(id: &str, cluster: &str, budget: u64) -> ExperimentMeta {
        ExperimentMeta {
            id: ExperimentId::from(id),
            name: format!("exp-{id}"),
            cluster_name: cluster.into(),
            space: validate_space(&[ParameterDef {
                name: "x".into(),
                kind: ParamKind::Double,
                bounds: Some(Bounds { min: 0.0, max: 1.0 }),
                scale: Scale::Linear,
                values: vec![],
                grid_count: None,
            }])
            .unwrap(),
            strategy: StrategySettings {
                kind: StrategyKind::Random,
                seed: 1,
                evolution: Default::default(),
            },
            observation_budget: budget,
            parallel_bandwidth: 2,
            resources: ResourceRequest { gpus: 0, cpus: 1 },
            execution: Execution::Synthetic(SyntheticSpec {
                objective: Objective::NegatedQuadratic {
                    center: Default::default(),
                },
                duration_ms: 0,
            }),
            state: ExperimentState::Active,
            created_at: Utc::now(),
            closed_at: None,
        }
    }

    fn obs(i: u64, value: Option<f64>) -> Observation {
        let mut assignment = Assignment::new();
        assignment.insert("x".into(), ParamValue::Double(i as f64 / 10.0));
        Observation {
            suggestion_id: SuggestionId(format!("s{i}")),
            assignment,
            value,
            failed: value.is_none(),
            run_id: RunId(format!("r{i}")),
            reported_at: Utc::now(),
        }
    }

    #[test]
    fn init_creates_skeleton_and_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path().join("home")).unwrap();
        assert!(root.path().join("experiments").is_dir());
        assert!(root.path().join("clusters").is_dir());
        let again = StateRoot::init_home(root.path()).unwrap();
        assert!(again.list_experiments().unwrap().is_empty());
        assert!(again.list_clusters().unwrap().is_empty());
    }

    #[test]
    fn init_rejects_regular_file() {
        let tmp = tempfile::tempdir().unwrap();
        let file = tmp.path().join("f");
        fs::write(&file, b"x").unwrap();
        let err = StateRoot::init_home(&file).unwrap_err();
        assert!(err.to_string().contains("not a directory"));
    }

    #[test]
    fn existing_root_loads_all_experiments() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path()).unwrap();
        root.create_experiment(meta("a", "c", 3)).unwrap();
        root.create_experiment(meta("b", "c", 3)).unwrap();
        let reopened = StateRoot::init_home(tmp.path()).unwrap();
        assert_eq!(reopened.list_experiments().unwrap().len(), 2);
    }

    #[test]
    fn best_trace_follows_running_max() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path()).unwrap();
        let id = root.create_experiment(meta("a", "c", 10)).unwrap().meta.id;
        let mut trace = vec![];
        for (i, v) in [0.5, 0.3, 0.9].into_iter().enumerate() {
            let rec = root
                .record_observation(&id, obs(i as u64, Some(v)))
                .unwrap();
            trace.push(rec.best.unwrap().value);
        }
        assert_eq!(trace, vec![0.5, 0.5, 0.9]);
    }

    #[test]
    fn failure_does_not_move_best() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path()).unwrap();
        let id = root.create_experiment(meta("a", "c", 10)).unwrap().meta.id;
        root.record_observation(&id, obs(0, Some(0.5))).unwrap();
        let rec = root.record_observation(&id, obs(1, None)).unwrap();
        assert_eq!(rec.best.unwrap().value, 0.5);
        assert_eq!(rec.observations.len(), 2);
    }

    #[test]
    fn reaching_budget_completes_and_further_observations_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path()).unwrap();
        let id = root.create_experiment(meta("a", "c", 300)).unwrap().meta.id;
        let mut rec = root.load_experiment(&id).unwrap();
        for i in 0..299 {
            root.commit_observation(&mut rec, obs(i, Some(i as f64)))
                .unwrap();
            assert_eq!(rec.state(), ExperimentState::Active);
        }
        root.commit_observation(&mut rec, obs(299, Some(0.0)))
            .unwrap();
        assert_eq!(rec.state(), ExperimentState::Completed);
        let loaded = root.load_experiment(&id).unwrap();
        assert_eq!(loaded.state(), ExperimentState::Completed);
        assert_eq!(loaded.observations.len(), 300);
        assert!(root.record_observation(&id, obs(300, Some(1.0))).is_err());
    }

    #[test]
    fn duplicate_suggestion_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path()).unwrap();
        let id = root.create_experiment(meta("a", "c", 10)).unwrap().meta.id;
        root.record_observation(&id, obs(0, Some(0.5))).unwrap();
        assert!(matches!(
            root.record_observation(&id, obs(0, Some(0.7))),
            Err(Error::Rejected(_))
        ));
    }

    #[test]
    fn value_and_failure_are_mutually_exclusive() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path()).unwrap();
        let id = root.create_experiment(meta("a", "c", 10)).unwrap().meta.id;
        let mut both = obs(0, Some(0.5));
        both.failed = true;
        assert!(root.record_observation(&id, both).is_err());
    }

    #[test]
    fn torn_tail_is_ignored_then_repaired() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path()).unwrap();
        let id = root.create_experiment(meta("a", "c", 10)).unwrap().meta.id;
        root.record_observation(&id, obs(0, Some(0.5))).unwrap();
        root.record_observation(&id, obs(1, Some(0.6))).unwrap();
        let path = root.experiment_dir(&id).join("observations");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"suggestion_id":"s2","assig"#).unwrap();
        drop(f);
        let rec = root.load_experiment(&id).unwrap();
        assert_eq!(rec.observations.len(), 2);
        let rec = root.record_observation(&id, obs(3, Some(0.1))).unwrap();
        assert_eq!(rec.observations.len(), 3);
        assert_eq!(root.load_experiment(&id).unwrap().observations.len(), 3);
    }

    #[test]
    fn unknown_experiment_is_not_found() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path()).unwrap();
        assert!(matches!(
            root.load_experiment(&ExperimentId::from("garbage")),
            Err(Error::NotFound { .. })
        ));
    }

    #[test]
    fn fresh_experiment_has_no_best() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path()).unwrap();
        let id = root.create_experiment(meta("a", "c", 10)).unwrap().meta.id;
        let rec = root.load_experiment(&id).unwrap();
        assert!(rec.observations.is_empty());
        assert!(rec.best.is_none());
    }

    #[test]
    fn purge_of_unknown_cluster_fails() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path()).unwrap();
        assert!(matches!(
            root.purge_cluster_artifacts("nope"),
            Err(Error::NotFound { .. })
        ));
    }

    #[test]
    fn purge_of_empty_cluster_reports_zero() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path()).unwrap();
        fs::create_dir_all(root.cluster_dir("c")).unwrap();
        let report = root.purge_cluster_artifacts("c").unwrap();
        assert_eq!(
            report,
            PurgeReport {
                logs_deleted: 0,
                experiments_retained: 0
            }
        );
    }
}
