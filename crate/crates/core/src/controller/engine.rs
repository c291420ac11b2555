//! The controller's decision core.
//!
//! [`Engine`] owns the cluster, the active experiments and their runs. Every method is a
//! synchronous state transition that persists what it changed and returns the side effects
//! (process launches and kills) for the driver to carry out. Nothing here blocks on a run.

use std::collections::{BTreeMap, HashMap, VecDeque};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{Disposition, Execution, KillReason, Outcome};
use crate::ids::{ExperimentId, NodeId, RunId};
use crate::optimizer::StrategyState;
use crate::provider::{ClusterState, PoolKind};
use crate::scheduler::{
    autoscale_tick, place_queued, Candidate, ExitInfo, RunRecord, RunState, ScaleRequest,
};
use crate::settings::Settings;
use crate::store::{
    ExperimentMeta, ExperimentRecord, ExperimentState, Observation, StateRoot, Timestamp,
};

use super::config::ExperimentConfig;
use super::report::{ClusterStatusReport, RunCounts, StatusReport};

/// Upper bound on retained events; older ones are dropped from the replay window.
const EVENT_WINDOW: usize = 100_000;

#[derive(Debug, Clone)]
pub struct Launch {
    pub run: RunRecord,
    pub execution: Execution,
}

#[derive(Debug, Clone)]
pub enum Effect {
    Launch(Box<Launch>),
    Kill { run_id: RunId, reason: KillReason },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    ExperimentCreated {
        experiment_id: ExperimentId,
        name: String,
    },
    ExperimentState {
        experiment_id: ExperimentId,
        state: ExperimentState,
    },
    Run {
        experiment_id: ExperimentId,
        run_id: RunId,
        state: RunState,
        node_id: Option<NodeId>,
    },
    Observation {
        experiment_id: ExperimentId,
        run_id: RunId,
        /// Position in the experiment's observation history.
        index: u64,
        value: Option<f64>,
        failed: bool,
        best: Option<f64>,
    },
    NodeAdded {
        pool: PoolKind,
        node_id: NodeId,
    },
    NodeRemoved {
        pool: PoolKind,
        node_id: NodeId,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Controller-wide, strictly increasing from 1.
    pub seq: u64,
    pub at: Timestamp,
    #[serde(flatten)]
    pub kind: EventKind,
}

struct LiveExperiment {
    record: ExperimentRecord,
    strategy: StrategyState,
    rank: u64,
    /// Indexed by run index.
    runs: Vec<RunRecord>,
    kill_requested: HashMap<RunId, KillReason>,
}

impl LiveExperiment {
    fn active_runs(&self) -> usize {
        self.runs.iter().filter(|r| !r.state.is_terminal()).count()
    }
}

pub struct Engine {
    root: StateRoot,
    settings: Settings,
    cluster: ClusterState,
    experiments: BTreeMap<ExperimentId, LiveExperiment>,
    run_owner: HashMap<RunId, ExperimentId>,
    next_rank: u64,
    events: VecDeque<Event>,
    next_event: u64,
    shutting_down: bool,
}

fn persist_failure(what: &str, e: &Error) {
    tracing::error!("failed to persist {what}: {e}");
}

impl Engine {
    /// Takes ownership of `cluster`, clearing any allocation left by a previous controller.
    pub fn new(root: StateRoot, settings: Settings, mut cluster: ClusterState) -> Self {
        cluster.clear_allocations();
        Engine {
            root,
            settings,
            cluster,
            experiments: BTreeMap::new(),
            run_owner: HashMap::new(),
            next_rank: 0,
            events: VecDeque::new(),
            next_event: 1,
            shutting_down: false,
        }
    }

    pub fn cluster(&self) -> &ClusterState {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut ClusterState {
        &mut self.cluster
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    fn emit(&mut self, kind: EventKind) {
        self.events.push_back(Event {
            seq: self.next_event,
            at: Utc::now(),
            kind,
        });
        self.next_event += 1;
        if self.events.len() > EVENT_WINDOW {
            self.events.pop_front();
        }
    }

    /// Events with `seq > since`, oldest first.
    pub fn events_since(&self, since: u64) -> Vec<Event> {
        let start = self.events.partition_point(|e| e.seq <= since);
        self.events.range(start..).cloned().collect()
    }

    pub fn last_event_seq(&self) -> u64 {
        self.next_event - 1
    }

    fn record_run(&mut self, run: &RunRecord) {
        if let Err(e) = self.root.append_run(&self.cluster.name, run) {
            persist_failure("run record", &e);
        }
        self.emit(EventKind::Run {
            experiment_id: run.experiment_id.clone(),
            run_id: run.run_id.clone(),
            state: run.state,
            node_id: run.node_id,
        });
    }

    /// Picks up the cluster's active experiments after a controller (re)start. Runs that
    /// were in flight under the previous controller are recorded as killed; their
    /// suggestions are re-issued as fresh ones.
    pub fn restore(&mut self) -> Result<Vec<Effect>> {
        let now = Utc::now();
        for record in self.root.list_experiments()? {
            if record.meta.cluster_name != self.cluster.name || record.state().is_terminal() {
                continue;
            }
            let id = record.id().clone();
            let mut runs = self.root.load_runs(&self.cluster.name, &id)?;
            for run in runs.iter_mut().filter(|r| !r.state.is_terminal()) {
                run.node_id = run.node_id.filter(|_| run.state.is_placed());
                run.exit = Some(ExitInfo {
                    code: None,
                    reason: Some("controller restarted".into()),
                });
                run.transition(RunState::Killed, now)?;
                self.root.append_run(&self.cluster.name, run)?;
            }
            let strategy = StrategyState::restore(
                record.meta.strategy.clone(),
                &record.meta.space,
                self.settings.grid_cap,
                runs.len() as u64,
                &record.observations,
            )?;
            for run in &runs {
                self.run_owner.insert(run.run_id.clone(), id.clone());
            }
            let rank = self.next_rank;
            self.next_rank += 1;
            self.experiments.insert(
                id.clone(),
                LiveExperiment {
                    record,
                    strategy,
                    rank,
                    runs,
                    kill_requested: HashMap::new(),
                },
            );
            self.issue(&id);
        }
        Ok(self.schedule())
    }

    /// Validates and persists a new experiment, then issues its first suggestions.
    pub fn create_experiment(
        &mut self,
        config: &ExperimentConfig,
    ) -> Result<(ExperimentId, Vec<Effect>)> {
        if self.shutting_down {
            return Err(Error::Rejected("controller is shutting down".into()));
        }
        if let Some(name) = &config.cluster_name {
            if name != &self.cluster.name {
                return Err(Error::validation(
                    "cluster_name",
                    format!(
                        "this controller serves cluster `{}`, not `{name}`",
                        self.cluster.name
                    ),
                ));
            }
        }
        let v = config.validate(&self.settings)?;
        if !self.cluster.could_ever_fit(&v.resources) {
            return Err(Error::Rejected(format!(
                "unschedulable: no pool of cluster {} can hold a run needing {} GPUs and {} CPUs",
                self.cluster.name, v.resources.gpus, v.resources.cpus
            )));
        }
        let strategy = StrategyState::new(v.strategy.clone(), &v.space, self.settings.grid_cap)?;
        let meta = ExperimentMeta {
            id: ExperimentId::generate(),
            name: v.name,
            cluster_name: self.cluster.name.clone(),
            space: v.space,
            strategy: v.strategy,
            observation_budget: v.observation_budget,
            parallel_bandwidth: v.parallel_bandwidth,
            resources: v.resources,
            execution: v.execution,
            state: ExperimentState::Active,
            created_at: Utc::now(),
            closed_at: None,
        };
        let record = self.root.create_experiment(meta)?;
        let id = record.id().clone();
        let rank = self.next_rank;
        self.next_rank += 1;
        self.emit(EventKind::ExperimentCreated {
            experiment_id: id.clone(),
            name: record.meta.name.clone(),
        });
        self.experiments.insert(
            id.clone(),
            LiveExperiment {
                record,
                strategy,
                rank,
                runs: Vec::new(),
                kill_requested: HashMap::new(),
            },
        );
        self.issue(&id);
        Ok((id, self.schedule()))
    }

    /// Tops up an active experiment's queue to its bandwidth without exceeding its budget.
    fn issue(&mut self, id: &ExperimentId) {
        if self.shutting_down {
            return;
        }
        let Some(live) = self.experiments.get_mut(id) else {
            return;
        };
        let mut created = Vec::new();
        while live.record.state() == ExperimentState::Active {
            let active = live.active_runs() as u64;
            let observed = live.record.observations.len() as u64;
            if active >= live.record.meta.parallel_bandwidth as u64
                || observed + active >= live.record.meta.observation_budget
            {
                break;
            }
            let suggestion = match live.strategy.suggest(id, &live.record.meta.space) {
                Ok(s) => s,
                Err(e) => {
                    tracing::info!("experiment {id}: {e}");
                    break;
                }
            };
            let run = RunRecord::queued(
                id.clone(),
                live.runs.len() as u64,
                suggestion,
                live.record.meta.resources,
                Utc::now(),
            );
            live.runs.push(run.clone());
            created.push(run);
        }
        for run in created {
            self.run_owner.insert(run.run_id.clone(), id.clone());
            self.record_run(&run);
        }
    }

    /// Places whatever queued work fits, in a single planning pass.
    pub fn schedule(&mut self) -> Vec<Effect> {
        if self.shutting_down {
            return Vec::new();
        }
        let mut queue = Vec::new();
        let mut headroom = BTreeMap::new();
        for (id, live) in &self.experiments {
            if live.record.state() != ExperimentState::Active {
                continue;
            }
            let placed = live.runs.iter().filter(|r| r.state.is_placed()).count();
            headroom.insert(
                id.clone(),
                (live.record.meta.parallel_bandwidth as usize).saturating_sub(placed),
            );
            queue.extend(
                live.runs
                    .iter()
                    .filter(|r| r.state == RunState::Queued)
                    .map(|r| Candidate {
                        run_id: r.run_id.clone(),
                        experiment_id: id.clone(),
                        experiment_rank: live.rank,
                        request: r.request,
                    }),
            );
        }
        let placements = place_queued(&self.cluster, &queue, &headroom);
        let now = Utc::now();
        let mut effects = Vec::with_capacity(placements.len());
        for p in placements {
            let exp = self.run_owner[&p.run_id].clone();
            let live = self.experiments.get_mut(&exp).expect("owner exists");
            let run = live
                .runs
                .iter_mut()
                .find(|r| r.run_id == p.run_id)
                .expect("placed run exists");
            let node = self
                .cluster
                .node_mut(p.node_id)
                .expect("placed on a live node");
            let slots = match node.allocate(&run.run_id, &run.request) {
                Ok(s) => s,
                Err(e) => {
                    tracing::error!("placement rejected: {e}");
                    continue;
                }
            };
            run.node_id = Some(p.node_id);
            run.gpu_slots = slots;
            run.transition(RunState::Scheduled, now)
                .expect("queued run can be scheduled");
            let run = run.clone();
            let execution = live.record.meta.execution.clone();
            self.record_run(&run);
            effects.push(Effect::Launch(Box::new(Launch { run, execution })));
        }
        effects
    }

    fn locate(&self, run_id: &RunId) -> Option<(ExperimentId, usize)> {
        let exp = self.run_owner.get(run_id)?;
        let i = self
            .experiments
            .get(exp)?
            .runs
            .iter()
            .position(|r| &r.run_id == run_id)?;
        Some((exp.clone(), i))
    }

    /// The run's process is up.
    pub fn run_started(&mut self, run_id: &RunId) {
        let Some((exp, i)) = self.locate(run_id) else {
            return;
        };
        let run = &mut self.experiments.get_mut(&exp).expect("located").runs[i];
        if run.state != RunState::Scheduled {
            return;
        }
        run.transition(RunState::Running, Utc::now())
            .expect("scheduled run can start");
        let run = run.clone();
        self.record_run(&run);
    }

    /// Applies a finished run's outcome: frees its resources, records the observation, and
    /// refills the cluster.
    pub fn run_finished(&mut self, run_id: &RunId, outcome: &Outcome) -> Vec<Effect> {
        let now = Utc::now();
        let Some((exp, i)) = self.locate(run_id) else {
            tracing::warn!("outcome for unknown run {run_id}");
            return Vec::new();
        };
        let live = self.experiments.get_mut(&exp).expect("located");
        if live.runs[i].state.is_terminal() {
            return Vec::new();
        }
        let kill = live.kill_requested.remove(run_id);
        let state = match (kill, outcome.disposition) {
            (Some(_), _) => RunState::Killed,
            (None, Disposition::Succeeded) => RunState::Succeeded,
            (None, Disposition::Failed) => RunState::Failed,
            (None, Disposition::Killed) => RunState::Killed,
        };
        let run = &mut live.runs[i];
        if let Some(node) = run.node_id {
            if let Some(node) = self.cluster.node_mut(node) {
                if let Err(e) = node.release(&run.run_id, &run.request, now) {
                    tracing::error!("{e}");
                }
            }
        }
        if run.state == RunState::Scheduled && state == RunState::Succeeded {
            run.transition(RunState::Running, now)
                .expect("scheduled run can start");
        }
        run.exit = Some(ExitInfo {
            code: outcome.exit_code,
            reason: match kill {
                Some(k) => Some(k.as_str().to_owned()),
                None => outcome.reason.clone(),
            },
        });
        run.value = outcome.value.filter(|_| state == RunState::Succeeded);
        if let Err(e) = run.transition(state, now) {
            tracing::error!("{e}");
            return Vec::new();
        }
        let run = run.clone();

        let mut observed = None;
        if kill.is_none() && live.record.state() == ExperimentState::Active {
            let obs = Observation {
                suggestion_id: run.suggestion.suggestion_id.clone(),
                assignment: run.suggestion.assignment.clone(),
                value: run.value,
                failed: state != RunState::Succeeded,
                run_id: run.run_id.clone(),
                reported_at: now,
            };
            match self.root.commit_observation(&mut live.record, obs.clone()) {
                Ok(()) => {
                    let _ = live.strategy.ingest(&obs);
                    observed = Some((
                        live.record.observations.len() as u64 - 1,
                        obs,
                        live.record.best.as_ref().map(|b| b.value),
                        live.record.state(),
                    ));
                }
                Err(e) => {
                    persist_failure("observation", &e);
                    live.strategy.abandon(&run.suggestion.suggestion_id);
                }
            }
        } else {
            live.strategy.abandon(&run.suggestion.suggestion_id);
        }

        self.record_run(&run);
        if let Some((index, obs, best, state)) = observed {
            self.emit(EventKind::Observation {
                experiment_id: exp.clone(),
                run_id: run.run_id.clone(),
                index,
                value: obs.value,
                failed: obs.failed,
                best,
            });
            if state == ExperimentState::Completed {
                self.emit(EventKind::ExperimentState {
                    experiment_id: exp.clone(),
                    state,
                });
            }
        }
        self.issue(&exp);
        self.schedule()
    }

    /// Deletes an experiment: queued runs are killed on the spot, placed runs are sent a
    /// kill. Returns how many runs this call killed; a repeated call returns 0.
    pub fn stop_experiment(&mut self, id: &ExperimentId) -> Result<(u64, Vec<Effect>)> {
        let now = Utc::now();
        let Some(live) = self.experiments.get_mut(id) else {
            // not served here: a terminal experiment or one from another cluster
            let mut record = self.root.load_experiment(id)?;
            self.root.mark_deleted(&mut record, now)?;
            return Ok((0, Vec::new()));
        };
        let newly_deleted = self.root.mark_deleted(&mut live.record, now)?;
        let mut killed = 0;
        let mut effects = Vec::new();
        let mut changed = Vec::new();
        for run in live.runs.iter_mut() {
            match run.state {
                RunState::Queued => {
                    run.exit = Some(ExitInfo {
                        code: None,
                        reason: Some(KillReason::ExperimentStopped.as_str().into()),
                    });
                    run.transition(RunState::Killed, now)
                        .expect("queued run can be killed");
                    live.strategy.abandon(&run.suggestion.suggestion_id);
                    changed.push(run.clone());
                    killed += 1;
                }
                RunState::Scheduled | RunState::Running
                    if !live.kill_requested.contains_key(&run.run_id) =>
                {
                    live.kill_requested
                        .insert(run.run_id.clone(), KillReason::ExperimentStopped);
                    effects.push(Effect::Kill {
                        run_id: run.run_id.clone(),
                        reason: KillReason::ExperimentStopped,
                    });
                    killed += 1;
                }
                _ => {}
            }
        }
        for run in &changed {
            self.record_run(run);
        }
        if newly_deleted {
            self.emit(EventKind::ExperimentState {
                experiment_id: id.clone(),
                state: ExperimentState::Deleted,
            });
        }
        Ok((killed, effects))
    }

    /// Runs of `id` that have not reached a terminal state.
    pub fn unfinished_runs(&self, id: &ExperimentId) -> usize {
        self.experiments
            .get(id)
            .map_or(0, LiveExperiment::active_runs)
    }

    /// Placed runs across all experiments.
    pub fn placed_runs(&self) -> usize {
        self.experiments
            .values()
            .flat_map(|l| l.runs.iter())
            .filter(|r| r.state.is_placed())
            .count()
    }

    /// One autoscaling step: grows pools for queued runs that fit nowhere and retires nodes
    /// idle beyond the timeout.
    pub fn autoscale(&mut self, now: Timestamp) -> Vec<Effect> {
        if self.shutting_down {
            return Vec::new();
        }
        let queue: Vec<Candidate> = self
            .experiments
            .values()
            .filter(|l| l.record.state() == ExperimentState::Active)
            .flat_map(|l| {
                l.runs
                    .iter()
                    .filter(|r| r.state == RunState::Queued)
                    .map(move |r| Candidate {
                        run_id: r.run_id.clone(),
                        experiment_id: l.record.id().clone(),
                        experiment_rank: l.rank,
                        request: r.request,
                    })
            })
            .collect();
        let requests = autoscale_tick(&self.cluster, &queue, now, self.settings.idle_timeout());
        if requests.is_empty() {
            return Vec::new();
        }
        for req in requests {
            match req {
                ScaleRequest::Grow { pool } => {
                    let before = self.cluster.next_node_id;
                    let size = self.cluster.pool(pool).map_or(0, |p| p.nodes.len() as u32);
                    if let Err(e) = self.cluster.scale_pool(pool, size + 1) {
                        tracing::warn!("grow {pool}: {e}");
                        continue;
                    }
                    for id in before..self.cluster.next_node_id {
                        self.emit(EventKind::NodeAdded {
                            pool,
                            node_id: NodeId(id),
                        });
                    }
                }
                ScaleRequest::Shrink { pool, node } => {
                    if let Err(e) = self.cluster.remove_node(node) {
                        tracing::warn!("shrink {pool}: {e}");
                        continue;
                    }
                    self.emit(EventKind::NodeRemoved {
                        pool,
                        node_id: node,
                    });
                }
            }
        }
        if let Err(e) = self.root.save_cluster(&self.cluster) {
            persist_failure("cluster state", &e);
        }
        self.schedule()
    }

    /// Stops issuing work and kills every unfinished run.
    pub fn begin_shutdown(&mut self) -> Vec<Effect> {
        self.shutting_down = true;
        let now = Utc::now();
        let mut effects = Vec::new();
        let mut changed = Vec::new();
        for live in self.experiments.values_mut() {
            for run in live.runs.iter_mut() {
                match run.state {
                    RunState::Queued => {
                        run.exit = Some(ExitInfo {
                            code: None,
                            reason: Some(KillReason::Shutdown.as_str().into()),
                        });
                        run.transition(RunState::Killed, now)
                            .expect("queued run can be killed");
                        live.strategy.abandon(&run.suggestion.suggestion_id);
                        changed.push(run.clone());
                    }
                    RunState::Scheduled | RunState::Running
                        if !live.kill_requested.contains_key(&run.run_id) =>
                    {
                        live.kill_requested
                            .insert(run.run_id.clone(), KillReason::Shutdown);
                        effects.push(Effect::Kill {
                            run_id: run.run_id.clone(),
                            reason: KillReason::Shutdown,
                        });
                    }
                    _ => {}
                }
            }
        }
        for run in &changed {
            self.record_run(run);
        }
        effects
    }

    /// Status of any experiment: live state when served here, stored state otherwise.
    pub fn status(&self, id: &ExperimentId) -> Result<StatusReport> {
        if let Some(live) = self.experiments.get(id) {
            return Ok(StatusReport::build(&live.record, &live.runs, false));
        }
        stored_status(&self.root, id)
    }

    pub fn list(&self) -> Result<Vec<StatusReport>> {
        self.root
            .list_experiments()?
            .into_iter()
            .map(|r| self.status(r.id()))
            .collect()
    }

    pub fn run_counts(&self, id: &ExperimentId) -> Option<RunCounts> {
        self.experiments.get(id).map(|l| RunCounts::of(&l.runs))
    }

    pub fn experiment_state(&self, id: &ExperimentId) -> Option<ExperimentState> {
        self.experiments.get(id).map(|l| l.record.state())
    }

    pub fn cluster_status(&self) -> ClusterStatusReport {
        ClusterStatusReport::build(&self.cluster, true)
    }

    /// Does `id` belong to this controller's cluster?
    pub fn serves(&self, id: &ExperimentId) -> bool {
        self.experiments.contains_key(id)
    }
}

/// Status assembled from durable state alone, as available without a controller.
pub fn stored_status(root: &StateRoot, id: &ExperimentId) -> Result<StatusReport> {
    let record = root.load_experiment(id)?;
    let cluster = &record.meta.cluster_name;
    if root.cluster_exists(cluster) {
        let runs = root.load_runs(cluster, id)?;
        Ok(StatusReport::build(&record, &runs, false))
    } else {
        Ok(StatusReport::build(&record, &[], true))
    }
}
