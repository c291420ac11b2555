//! Log aggregation for one cluster: persists model output and fans it out to followers.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::sync::Mutex;

use chrono::Utc;
use tokio::sync::watch;

use crate::error::{Error, IoContext, Result};
use crate::ids::{ExperimentId, RunId};
use crate::store::{LogRecord, StateRoot, Stream};

struct ExperimentLog {
    records: Vec<LogRecord>,
    next_offset: u64,
    files: HashMap<(RunId, Stream), File>,
}

pub struct LogHub {
    root: StateRoot,
    cluster: String,
    experiments: Mutex<HashMap<ExperimentId, ExperimentLog>>,
    appended: watch::Sender<u64>,
}

impl LogHub {
    pub fn new(root: StateRoot, cluster: impl Into<String>) -> Self {
        LogHub {
            root,
            cluster: cluster.into(),
            experiments: Mutex::new(HashMap::new()),
            appended: watch::Sender::new(0),
        }
    }

    fn with_log<R>(
        &self,
        experiment: &ExperimentId,
        f: impl FnOnce(&mut ExperimentLog) -> Result<R>,
    ) -> Result<R> {
        let mut map = self.experiments.lock().expect("log hub poisoned");
        if !map.contains_key(experiment) {
            let records = self.root.read_logs(&self.cluster, experiment)?;
            let next_offset = records.last().map_or(0, |r| r.offset + 1);
            map.insert(
                experiment.clone(),
                ExperimentLog {
                    records,
                    next_offset,
                    files: HashMap::new(),
                },
            );
        }
        f(map.get_mut(experiment).expect("just inserted"))
    }

    /// Stores one line and wakes followers.
    pub fn append(
        &self,
        experiment: &ExperimentId,
        run: &RunId,
        stream: Stream,
        seq: u64,
        line: String,
    ) -> Result<LogRecord> {
        let record = self.with_log(experiment, |log| {
            let record = LogRecord {
                experiment_id: experiment.clone(),
                run_id: run.clone(),
                stream,
                seq,
                offset: log.next_offset,
                timestamp: Utc::now(),
                line,
            };
            let key = (run.clone(), stream);
            if !log.files.contains_key(&key) {
                let path = self.root.log_path(&self.cluster, experiment, run, stream);
                let dir = path.parent().expect("log path has a parent");
                fs::create_dir_all(dir).at(dir)?;
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .at(&path)?;
                log.files.insert(key.clone(), file);
            }
            let mut body =
                serde_json::to_vec(&record).map_err(|e| Error::Internal(e.to_string()))?;
            body.push(b'\n');
            let path = self.root.log_path(&self.cluster, experiment, run, stream);
            log.files
                .get_mut(&key)
                .expect("file opened above")
                .write_all(&body)
                .at(&path)?;
            log.next_offset += 1;
            log.records.push(record.clone());
            Ok(record)
        })?;
        self.appended.send_modify(|n| *n += 1);
        Ok(record)
    }

    /// Records of `experiment` with offset greater than `after` (all when `None`).
    pub fn since(&self, experiment: &ExperimentId, after: Option<u64>) -> Result<Vec<LogRecord>> {
        self.with_log(experiment, |log| {
            let start = match after {
                Some(a) => log.records.partition_point(|r| r.offset <= a),
                None => 0,
            };
            Ok(log.records[start..].to_vec())
        })
    }

    /// Changes whenever any line is appended.
    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.appended.subscribe()
    }

    /// Closes the open files of `run`, once it has finished.
    pub fn close_run(&self, experiment: &ExperimentId, run: &RunId) {
        let mut map = self.experiments.lock().expect("log hub poisoned");
        if let Some(log) = map.get_mut(experiment) {
            log.files.retain(|(r, _), _| r != run);
        }
    }
}
