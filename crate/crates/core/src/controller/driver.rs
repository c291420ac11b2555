use std::collections::HashMap;
use std::fs::{File, OpenOptions, TryLockError};
use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use chrono::Utc;
use tokio::net::TcpListener;
use tokio::sync::{oneshot, watch};
use tokio::task::JoinHandle;

use crate::error::{Error, IoContext, Result};
use crate::executor::{process, synthetic_execute, Execution, KillReason, LogSink, Outcome};
use crate::ids::{ExperimentId, RunId};
use crate::logs::LogHub;
use crate::provider::ControllerInfo;
use crate::settings::Settings;
use crate::store::{StateRoot, Stream};

use super::engine::{Effect, Engine, Event, Launch};
use super::report::{ClusterStatusReport, StatusReport};
use super::{api, ExperimentConfig};

/// Extra time allowed on top of twice the kill grace before a wait gives up.
const WAIT_MARGIN: Duration = Duration::from_secs(2);

struct Core {
    engine: Engine,
    kills: HashMap<RunId, oneshot::Sender<KillReason>>,
}

struct Shared {
    root: StateRoot,
    cluster: String,
    core: Mutex<Core>,
    logs: LogHub,
    changed: watch::Sender<u64>,
    closing: AtomicBool,
    grace: Duration,
    autoscale_interval: Duration,
}

/// Handle on a cluster's controller state; cheap to clone.
#[derive(Clone)]
pub struct Controller {
    shared: Arc<Shared>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StopOutcome {
    pub killed: u64,
}

impl Controller {
    /// Loads the cluster and its settings. No work starts until [`Controller::resume`].
    pub fn open(root: StateRoot, cluster: &str) -> Result<Self> {
        let settings = Settings::load(root.path())?;
        let state = root.load_cluster(cluster)?;
        let grace = settings.kill_grace();
        let autoscale_interval = settings.autoscale_interval();
        Ok(Controller {
            shared: Arc::new(Shared {
                logs: LogHub::new(root.clone(), cluster),
                root: root.clone(),
                cluster: cluster.to_owned(),
                core: Mutex::new(Core {
                    engine: Engine::new(root, settings, state),
                    kills: HashMap::new(),
                }),
                changed: watch::Sender::new(0),
                closing: AtomicBool::new(false),
                grace,
                autoscale_interval,
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Core> {
        self.shared.core.lock().expect("controller state poisoned")
    }

    /// Runs `f` against the engine and carries out the effects it returns.
    fn act<R>(&self, f: impl FnOnce(&mut Engine) -> Result<(R, Vec<Effect>)>) -> Result<R> {
        let mut core = self.lock();
        let (out, effects) = f(&mut core.engine)?;
        self.apply(&mut core, effects);
        drop(core);
        self.shared.changed.send_modify(|n| *n += 1);
        Ok(out)
    }

    fn apply(&self, core: &mut Core, effects: Vec<Effect>) {
        for effect in effects {
            match effect {
                Effect::Launch(launch) => {
                    let (tx, rx) = oneshot::channel();
                    core.kills.insert(launch.run.run_id.clone(), tx);
                    tokio::spawn(self.clone().supervise(*launch, rx));
                }
                Effect::Kill { run_id, reason } => {
                    if let Some(tx) = core.kills.remove(&run_id) {
                        let _ = tx.send(reason);
                    }
                }
            }
        }
    }

    async fn supervise(self, launch: Launch, kill: oneshot::Receiver<KillReason>) {
        let Launch { run, execution } = launch;
        let run_id = run.run_id.clone();
        let exp = run.experiment_id.clone();
        let sink: Arc<dyn LogSink> = {
            let ctl = self.clone();
            let (exp, run_id) = (exp.clone(), run_id.clone());
            Arc::new(move |stream: Stream, seq: u64, line: String| {
                if let Err(e) = ctl.shared.logs.append(&exp, &run_id, stream, seq, line) {
                    tracing::error!("log append failed: {e}");
                }
            })
        };
        let assignment = &run.suggestion.assignment;
        let outcome = match &execution {
            Execution::Synthetic(spec) => {
                self.started(&run_id);
                synthetic_execute(spec, assignment, &*sink, kill).await
            }
            Execution::Run(spec) => {
                let scratch = self.shared.root.scratch_dir(&self.shared.cluster, &run_id);
                let ctx = process::LaunchContext {
                    experiment_id: &exp,
                    run_id: &run_id,
                    scratch_dir: scratch.clone(),
                    gpu_slots: &run.gpu_slots,
                    grace: self.shared.grace,
                };
                let outcome = match process::launch(spec, assignment, ctx, sink).await {
                    Ok(handle) => {
                        self.started(&run_id);
                        process::collect(handle, kill).await
                    }
                    Err(failed) => failed,
                };
                let _ = tokio::fs::remove_dir_all(&scratch).await;
                outcome
            }
        };
        self.finished(&exp, &run_id, &outcome);
    }

    fn started(&self, run_id: &RunId) {
        let _ = self.act(|e| {
            e.run_started(run_id);
            Ok(((), Vec::new()))
        });
    }

    fn finished(&self, exp: &ExperimentId, run_id: &RunId, outcome: &Outcome) {
        self.shared.logs.close_run(exp, run_id);
        let mut core = self.lock();
        core.kills.remove(run_id);
        let effects = core.engine.run_finished(run_id, outcome);
        self.apply(&mut core, effects);
        drop(core);
        self.shared.changed.send_modify(|n| *n += 1);
    }

    /// Restores the cluster's active experiments and starts the autoscaler.
    pub fn resume(&self) -> Result<()> {
        self.act(|e| Ok(((), e.restore()?)))?;
        let ctl = self.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(ctl.shared.autoscale_interval);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                if ctl.is_closing() {
                    break;
                }
                let _ = ctl.act(|e| Ok(((), e.autoscale(Utc::now()))));
            }
        });
        Ok(())
    }

    pub fn cluster_name(&self) -> &str {
        &self.shared.cluster
    }

    pub fn root(&self) -> &StateRoot {
        &self.shared.root
    }

    pub fn logs(&self) -> &LogHub {
        &self.shared.logs
    }

    pub fn is_closing(&self) -> bool {
        self.shared.closing.load(Ordering::SeqCst)
    }

    /// Changes after every state transition.
    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.shared.changed.subscribe()
    }

    pub fn create_experiment(&self, config: &ExperimentConfig) -> Result<ExperimentId> {
        self.act(|e| e.create_experiment(config))
    }

    pub fn status(&self, id: &ExperimentId) -> Result<StatusReport> {
        self.lock().engine.status(id)
    }

    pub fn list(&self) -> Result<Vec<StatusReport>> {
        self.lock().engine.list()
    }

    pub fn cluster_status(&self) -> ClusterStatusReport {
        self.lock().engine.cluster_status()
    }

    pub fn serves(&self, id: &ExperimentId) -> bool {
        self.lock().engine.serves(id)
    }

    /// True once `id` can produce no more log lines.
    pub fn drained(&self, id: &ExperimentId) -> bool {
        let core = self.lock();
        let terminal = core
            .engine
            .experiment_state(id)
            .is_none_or(|s| s.is_terminal());
        terminal && core.engine.unfinished_runs(id) == 0
    }

    pub fn events_since(&self, since: u64) -> Vec<Event> {
        self.lock().engine.events_since(since)
    }

    pub fn last_event_seq(&self) -> u64 {
        self.lock().engine.last_event_seq()
    }

    async fn wait_until(&self, limit: Duration, mut done: impl FnMut(&Self) -> bool) -> bool {
        let mut rx = self.subscribe();
        let deadline = tokio::time::Instant::now() + limit;
        loop {
            if done(self) {
                return true;
            }
            tokio::select! {
                _ = rx.changed() => {}
                _ = tokio::time::sleep_until(deadline) => return done(self),
                _ = tokio::time::sleep(Duration::from_millis(50)) => {}
            }
        }
    }

    /// Deletes an experiment and waits for its runs to be gone.
    pub async fn stop_experiment(&self, id: &ExperimentId) -> Result<StopOutcome> {
        let killed = self.act(|e| e.stop_experiment(id))?;
        let limit = self.shared.grace * 2 + WAIT_MARGIN;
        if !self
            .wait_until(limit, |c| c.lock().engine.unfinished_runs(id) == 0)
            .await
        {
            tracing::warn!("runs of {id} still finishing after {limit:?}");
        }
        Ok(StopOutcome { killed })
    }

    /// Kills all runs, waits for them, and releases the cluster.
    pub async fn shutdown(&self) -> Result<()> {
        if self.shared.closing.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        self.act(|e| Ok(((), e.begin_shutdown())))?;
        let limit = self.shared.grace * 2 + WAIT_MARGIN;
        self.wait_until(limit, |c| c.lock().engine.placed_runs() == 0)
            .await;
        let mut core = self.lock();
        let cluster = core.engine.cluster_mut();
        cluster.controller = None;
        cluster.clear_allocations();
        if self.shared.root.cluster_exists(&self.shared.cluster) {
            self.shared.root.save_cluster(cluster)?;
        }
        Ok(())
    }
}

/// A controller serving its HTTP API on loopback.
pub struct RunningController {
    controller: Controller,
    endpoint: SocketAddr,
    server: JoinHandle<std::io::Result<()>>,
    stop_server: oneshot::Sender<()>,
    _lock: File,
}

impl RunningController {
    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn endpoint(&self) -> SocketAddr {
        self.endpoint
    }

    pub async fn shutdown(self) -> Result<()> {
        let result = self.controller.shutdown().await;
        let _ = self.stop_server.send(());
        match tokio::time::timeout(Duration::from_secs(5), self.server).await {
            Ok(Ok(Err(e))) => tracing::warn!("http server: {e}"),
            Err(_) => tracing::warn!("http server did not stop in time"),
            _ => {}
        }
        result
    }
}

fn acquire_controller_lock(root: &StateRoot, cluster: &str) -> Result<File> {
    let path = root.cluster_dir(cluster).join("controller.lock");
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .at(&path)?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(TryLockError::WouldBlock) => Err(Error::Conflict(format!(
            "controller already running for cluster {cluster}"
        ))),
        Err(TryLockError::Error(e)) => Err(Error::Io { path, source: e }),
    }
}

/// Starts a controller for `cluster` and records its endpoint in the cluster state.
pub async fn start(root: StateRoot, cluster: &str) -> Result<RunningController> {
    root.load_cluster(cluster)?;
    let lock = acquire_controller_lock(&root, cluster)?;
    let controller = Controller::open(root.clone(), cluster)?;
    let listener = TcpListener::bind("127.0.0.1:0")
        .await
        .map_err(|e| Error::Internal(format!("cannot bind control port: {e}")))?;
    let endpoint = listener
        .local_addr()
        .map_err(|e| Error::Internal(e.to_string()))?;
    {
        let mut core = controller.lock();
        let state = core.engine.cluster_mut();
        state.controller = Some(ControllerInfo {
            endpoint: endpoint.to_string(),
            pid: std::process::id(),
            started_at: Utc::now(),
        });
        root.save_cluster(state)?;
    }
    controller.resume()?;
    let (stop_server, stopped) = oneshot::channel::<()>();
    let app = api::router(controller.clone());
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    tracing::info!("controller for {cluster} listening on {endpoint}");
    Ok(RunningController {
        controller,
        endpoint,
        server,
        stop_server,
        _lock: lock,
    })
}

/// Runs a controller until `signal` resolves, then shuts it down.
pub async fn serve(root: StateRoot, cluster: &str, signal: impl Future<Output = ()>) -> Result<()> {
    let running = start(root, cluster).await?;
    signal.await;
    tracing::info!("controller for {cluster} shutting down");
    running.shutdown().await
}
