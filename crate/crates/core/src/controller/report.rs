//! Snapshot reports served by the controller and rendered by the CLI.

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::ids::{ExperimentId, NodeId, RunId};
use crate::optimizer::StrategyKind;
use crate::provider::{Allocation, ClusterState, InstanceCapacity, PoolKind};
use crate::scheduler::{RunRecord, RunState};
use crate::store::{Best, ExperimentRecord, ExperimentState, Timestamp};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetCounts {
    /// Successful observations.
    pub completed: u64,
    pub failed: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub queued: u64,
    pub scheduled: u64,
    pub running: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub killed: u64,
}

impl RunCounts {
    pub fn of(runs: &[RunRecord]) -> Self {
        let mut c = RunCounts::default();
        for r in runs {
            *match r.state {
                RunState::Queued => &mut c.queued,
                RunState::Scheduled => &mut c.scheduled,
                RunState::Running => &mut c.running,
                RunState::Succeeded => &mut c.succeeded,
                RunState::Failed => &mut c.failed,
                RunState::Killed => &mut c.killed,
            } += 1;
        }
        c
    }

    /// Runs holding node resources.
    pub fn placed(&self) -> u64 {
        self.scheduled + self.running
    }

    pub fn live(&self) -> u64 {
        self.queued + self.placed()
    }

    pub fn total(&self) -> u64 {
        self.live() + self.succeeded + self.failed + self.killed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: RunId,
    pub index: u64,
    pub state: RunState,
    pub node_id: Option<NodeId>,
    #[serde(default)]
    pub gpu_slots: Vec<u32>,
    pub duration_ms: Option<u64>,
    pub value: Option<f64>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPoint {
    pub run_id: RunId,
    pub value: Option<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub id: ExperimentId,
    pub name: String,
    pub cluster_name: String,
    pub state: ExperimentState,
    pub strategy: StrategyKind,
    pub parallel_bandwidth: u32,
    pub budget: BudgetCounts,
    pub runs: RunCounts,
    pub best: Option<Best>,
    /// Observation history in arrival order.
    pub observations: Vec<ObservationPoint>,
    pub run_table: Vec<RunRow>,
    /// The experiment's cluster no longer exists, so its run table is gone.
    pub cluster_destroyed: bool,
    pub created_at: Timestamp,
    pub closed_at: Option<Timestamp>,
}

impl StatusReport {
    pub fn build(record: &ExperimentRecord, runs: &[RunRecord], cluster_destroyed: bool) -> Self {
        let now = Utc::now();
        StatusReport {
            id: record.meta.id.clone(),
            name: record.meta.name.clone(),
            cluster_name: record.meta.cluster_name.clone(),
            state: record.meta.state,
            strategy: record.meta.strategy.kind,
            parallel_bandwidth: record.meta.parallel_bandwidth,
            budget: BudgetCounts {
                completed: record.successes() as u64,
                failed: record.failures() as u64,
                total: record.meta.observation_budget,
            },
            runs: RunCounts::of(runs),
            best: record.best.clone(),
            observations: record
                .observations
                .iter()
                .map(|o| ObservationPoint {
                    run_id: o.run_id.clone(),
                    value: o.success(),
                    failed: o.failed,
                })
                .collect(),
            run_table: runs
                .iter()
                .map(|r| RunRow {
                    run_id: r.run_id.clone(),
                    index: r.index,
                    state: r.state,
                    node_id: r.node_id,
                    gpu_slots: r.gpu_slots.clone(),
                    duration_ms: r.duration(now).map(|d| d.as_millis() as u64),
                    value: r.value,
                    reason: r.exit.as_ref().and_then(|e| e.reason.clone()),
                })
                .collect(),
            cluster_destroyed,
            created_at: record.meta.created_at,
            closed_at: record.meta.closed_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub id: NodeId,
    pub capacity: InstanceCapacity,
    pub allocated: Allocation,
    pub resident_runs: u64,
    pub idle_since: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStatus {
    pub kind: PoolKind,
    pub instance_type: String,
    pub min_nodes: u32,
    pub max_nodes: u32,
    pub nodes: Vec<NodeStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerStatus {
    pub endpoint: String,
    pub pid: u32,
    pub uptime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStatusReport {
    pub name: String,
    pub created_at: Timestamp,
    pub pools: Vec<PoolStatus>,
    pub total_gpus: u32,
    pub total_cpus: u32,
    pub allocated_gpus: u32,
    pub allocated_cpus: u32,
    /// Absent when no controller is serving the cluster.
    pub controller: Option<ControllerStatus>,
}

impl ClusterStatusReport {
    pub fn build(cluster: &ClusterState, live_controller: bool) -> Self {
        let now = Utc::now();
        ClusterStatusReport {
            name: cluster.name.clone(),
            created_at: cluster.created_at,
            pools: cluster
                .pools
                .iter()
                .map(|p| PoolStatus {
                    kind: p.kind,
                    instance_type: p.instance_type.clone(),
                    min_nodes: p.min_nodes,
                    max_nodes: p.max_nodes,
                    nodes: p
                        .nodes
                        .iter()
                        .map(|n| NodeStatus {
                            id: n.id,
                            capacity: n.capacity,
                            allocated: n.allocated,
                            resident_runs: n.resident_runs.len() as u64,
                            idle_since: n.idle_since,
                        })
                        .collect(),
                })
                .collect(),
            total_gpus: cluster.total_gpus(),
            total_cpus: cluster.total_cpus(),
            allocated_gpus: cluster.nodes().map(|n| n.allocated.gpus).sum(),
            allocated_cpus: cluster.nodes().map(|n| n.allocated.cpus).sum(),
            controller: cluster
                .controller
                .as_ref()
                .filter(|_| live_controller)
                .map(|c| ControllerStatus {
                    endpoint: c.endpoint.clone(),
                    pid: c.pid,
                    uptime_secs: (now - c.started_at).num_milliseconds().max(0) as f64 / 1000.0,
                }),
        }
    }
}
