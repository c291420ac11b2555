//! Run lifecycle and placement.
//!
//! Planning is pure: [`place_queued`] and [`autoscale_tick`] read a cluster snapshot and a
//! queue and return decisions without mutating anything, so identical inputs always give
//! identical outputs.
//!
//! Placement draws candidates round-robin across experiments in creation order. Within a
//! round, larger requests go first, and each candidate takes the feasible node that it
//! fills most tightly (fewest GPUs left, then fewest CPUs, then lowest id). GPU-free
//! requests only fall back to GPU nodes when no CPU node has room. Best-fit does not
//! dominate first-fit on every instance, so the planner also computes a first-fit plan
//! over the same candidate order and keeps it when it places strictly more runs.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{ExperimentId, NodeId, RunId};
use crate::optimizer::Suggestion;
use crate::provider::{ClusterState, PoolKind};
use crate::store::Timestamp;

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceRequest {
    #[serde(default)]
    pub gpus: u32,
    #[serde(default = "one")]
    pub cpus: u32,
}

impl Default for ResourceRequest {
    fn default() -> Self {
        ResourceRequest { gpus: 0, cpus: 1 }
    }
}

impl ResourceRequest {
    /// Static checks that do not depend on a particular cluster.
    pub fn validate(&self, max_gpus: u32) -> Result<()> {
        if self.cpus == 0 {
            return Err(Error::validation("resources.cpus", "cpus must be positive"));
        }
        if self.gpus > max_gpus {
            return Err(Error::Rejected(format!(
                "{} GPUs per run exceeds largest supported node ({max_gpus} GPUs)",
                self.gpus
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Queued,
    Scheduled,
    Running,
    Succeeded,
    Failed,
    Killed,
}

impl RunState {
    pub const ALL: [RunState; 6] = [
        RunState::Queued,
        RunState::Scheduled,
        RunState::Running,
        RunState::Succeeded,
        RunState::Failed,
        RunState::Killed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RunState::Succeeded | RunState::Failed | RunState::Killed
        )
    }

    /// Holding a node slot.
    pub fn is_placed(self) -> bool {
        matches!(self, RunState::Scheduled | RunState::Running)
    }

    pub fn can_become(self, next: RunState) -> bool {
        use RunState::*;
        matches!(
            (self, next),
            (Queued, Scheduled)
                | (Queued, Killed)
                | (Scheduled, Running)
                | (Scheduled, Killed)
                // the process could not be started at all
                | (Scheduled, Failed)
                | (Running, Succeeded)
                | (Running, Failed)
                | (Running, Killed)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunState::Queued => "queued",
            RunState::Scheduled => "scheduled",
            RunState::Running => "running",
            RunState::Succeeded => "succeeded",
            RunState::Failed => "failed",
            RunState::Killed => "killed",
        }
    }
}

impl std::fmt::Display for RunState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitInfo {
    #[serde(default)]
    pub code: Option<i32>,
    #[serde(default)]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTimes {
    pub queued_at: Option<Timestamp>,
    pub scheduled_at: Option<Timestamp>,
    pub started_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
}

/// One model evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: RunId,
    pub experiment_id: ExperimentId,
    /// Creation index within the experiment.
    pub index: u64,
    pub suggestion: Suggestion,
    pub request: ResourceRequest,
    pub state: RunState,
    pub node_id: Option<NodeId>,
    #[serde(default)]
    pub gpu_slots: Vec<u32>,
    pub times: RunTimes,
    #[serde(default)]
    pub exit: Option<ExitInfo>,
    #[serde(default)]
    pub value: Option<f64>,
}

impl RunRecord {
    pub fn queued(
        experiment_id: ExperimentId,
        index: u64,
        suggestion: Suggestion,
        request: ResourceRequest,
        at: Timestamp,
    ) -> Self {
        RunRecord {
            run_id: experiment_id.run_id(index),
            experiment_id,
            index,
            suggestion,
            request,
            state: RunState::Queued,
            node_id: None,
            gpu_slots: Vec::new(),
            times: RunTimes {
                queued_at: Some(at),
                ..Default::default()
            },
            exit: None,
            value: None,
        }
    }

    pub fn transition(&mut self, next: RunState, at: Timestamp) -> Result<()> {
        if !self.state.can_become(next) {
            return Err(Error::Rejected(format!(
                "illegal transition for {}: {} -> {}",
                self.run_id, self.state, next
            )));
        }
        self.state = next;
        match next {
            RunState::Scheduled => self.times.scheduled_at = Some(at),
            RunState::Running => self.times.started_at = Some(at),
            _ => self.times.finished_at = Some(at),
        }
        Ok(())
    }

    /// Time spent running (or since start, for a live run).
    pub fn duration(&self, now: Timestamp) -> Option<Duration> {
        let start = self.times.started_at?;
        let end = self.times.finished_at.unwrap_or(now);
        (end - start).to_std().ok()
    }
}

/// A queued run as seen by the planner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub run_id: RunId,
    pub experiment_id: ExperimentId,
    /// Position of the experiment in creation order; lower goes first in each round.
    pub experiment_rank: u64,
    pub request: ResourceRequest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub run_id: RunId,
    pub node_id: NodeId,
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    id: NodeId,
    pool: PoolKind,
    gpus: u32,
    cpus: u32,
}

impl Slot {
    fn fits(&self, req: &ResourceRequest) -> bool {
        self.gpus >= req.gpus && self.cpus >= req.cpus
    }
}

fn slots(cluster: &ClusterState) -> Vec<Slot> {
    let mut v: Vec<Slot> = cluster
        .nodes()
        .map(|n| Slot {
            id: n.id,
            pool: n.pool,
            gpus: n.free_gpus(),
            cpus: n.free_cpus(),
        })
        .collect();
    v.sort_by_key(|s| s.id);
    v
}

/// The order in which candidates are offered to the packer: round `k` holds the k-th queued
/// run of every experiment (experiments in rank order), sorted by request size descending.
pub fn candidate_order(queue: &[Candidate]) -> Vec<&Candidate> {
    let mut by_experiment: BTreeMap<(u64, &ExperimentId), Vec<&Candidate>> = BTreeMap::new();
    for c in queue {
        by_experiment
            .entry((c.experiment_rank, &c.experiment_id))
            .or_default()
            .push(c);
    }
    let depth = by_experiment.values().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(queue.len());
    for k in 0..depth {
        let mut round: Vec<&Candidate> = by_experiment
            .values()
            .filter_map(|v| v.get(k).copied())
            .collect();
        round.sort_by(|a, b| {
            (b.request.gpus, b.request.cpus).cmp(&(a.request.gpus, a.request.cpus))
        });
        order.extend(round);
    }
    order
}

fn plan_with(
    cluster: &ClusterState,
    order: &[&Candidate],
    headroom: &BTreeMap<ExperimentId, usize>,
    choose: impl Fn(&[Slot], &ResourceRequest) -> Option<usize>,
) -> Vec<Placement> {
    let mut nodes = slots(cluster);
    let mut room = headroom.clone();
    let mut out = Vec::new();
    for c in order {
        if room.get(&c.experiment_id) == Some(&0) {
            continue;
        }
        if let Some(i) = choose(&nodes, &c.request) {
            nodes[i].gpus -= c.request.gpus;
            nodes[i].cpus -= c.request.cpus;
            if let Some(r) = room.get_mut(&c.experiment_id) {
                *r -= 1;
            }
            out.push(Placement {
                run_id: c.run_id.clone(),
                node_id: nodes[i].id,
            });
        }
    }
    out
}

fn best_fit(nodes: &[Slot], req: &ResourceRequest) -> Option<usize> {
    let tightest = |pred: &dyn Fn(&Slot) -> bool| {
        nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| pred(n) && n.fits(req))
            .min_by_key(|(_, n)| (n.gpus - req.gpus, n.cpus - req.cpus, n.id))
            .map(|(i, _)| i)
    };
    if req.gpus == 0 {
        if let Some(i) = tightest(&|n| n.pool == PoolKind::Cpu) {
            return Some(i);
        }
    }
    tightest(&|_| true)
}

fn first_fit(nodes: &[Slot], req: &ResourceRequest) -> Option<usize> {
    nodes.iter().position(|n| n.fits(req))
}

/// First-fit over [`candidate_order`], nodes by ascending id.
pub fn first_fit_plan(
    cluster: &ClusterState,
    queue: &[Candidate],
    headroom: &BTreeMap<ExperimentId, usize>,
) -> Vec<Placement> {
    plan_with(cluster, &candidate_order(queue), headroom, first_fit)
}

/// Assigns queued runs to nodes with free capacity.
///
/// `headroom` caps how many more runs each experiment may have placed (its parallel
/// bandwidth minus runs already placed); experiments without an entry are uncapped.
/// Unplaced candidates are simply absent from the result.
pub fn place_queued(
    cluster: &ClusterState,
    queue: &[Candidate],
    headroom: &BTreeMap<ExperimentId, usize>,
) -> Vec<Placement> {
    if queue.is_empty() {
        return Vec::new();
    }
    let order = candidate_order(queue);
    let primary = plan_with(cluster, &order, headroom, best_fit);
    if primary.len() == queue.len() {
        return primary;
    }
    let fallback = plan_with(cluster, &order, headroom, first_fit);
    if fallback.len() > primary.len() {
        fallback
    } else {
        primary
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum ScaleRequest {
    Grow { pool: PoolKind },
    Shrink { pool: PoolKind, node: NodeId },
}

/// Decides node additions and removals.
///
/// A queued run that fits no current node but would fit an empty node of some pool below its
/// maximum asks for one more node of that pool (CPU pool first for GPU-free runs). Further
/// runs are packed onto the nodes requested in the same tick before asking again. A pool with
/// no growth request may lose its longest-idle node once that node has been empty for longer
/// than `idle_timeout`, unless the pool is at its minimum.
pub fn autoscale_tick(
    cluster: &ClusterState,
    queue: &[Candidate],
    now: Timestamp,
    idle_timeout: Duration,
) -> Vec<ScaleRequest> {
    let mut out = Vec::new();
    let current = slots(cluster);
    let mut added: Vec<Slot> = Vec::new();
    let mut sizes: BTreeMap<PoolKind, u32> = cluster
        .pools
        .iter()
        .map(|p| (p.kind, p.nodes.len() as u32))
        .collect();
    let mut grown = BTreeSet::new();

    for c in candidate_order(queue) {
        let req = &c.request;
        if current.iter().any(|s| s.fits(req)) {
            continue;
        }
        if let Some(s) = added.iter_mut().find(|s| s.fits(req)) {
            s.gpus -= req.gpus;
            s.cpus -= req.cpus;
            continue;
        }
        let mut pools: Vec<&crate::provider::Pool> = cluster.pools.iter().collect();
        pools.sort_by_key(|p| match (req.gpus, p.kind) {
            (0, PoolKind::Cpu) | (1.., PoolKind::Gpu) => 0,
            _ => 1,
        });
        let target = pools.into_iter().find(|p| {
            p.capacity.gpus >= req.gpus
                && p.capacity.cpus >= req.cpus
                && sizes[&p.kind] < p.max_nodes
        });
        if let Some(pool) = target {
            *sizes.get_mut(&pool.kind).expect("pool size") += 1;
            grown.insert(pool.kind);
            added.push(Slot {
                id: NodeId(u32::MAX),
                pool: pool.kind,
                gpus: pool.capacity.gpus - req.gpus,
                cpus: pool.capacity.cpus - req.cpus,
            });
            out.push(ScaleRequest::Grow { pool: pool.kind });
        }
    }

    let timeout = chrono::Duration::from_std(idle_timeout).unwrap_or(chrono::Duration::MAX);
    for pool in &cluster.pools {
        if grown.contains(&pool.kind) || pool.nodes.len() as u32 <= pool.min_nodes {
            continue;
        }
        let victim = pool
            .nodes
            .iter()
            .filter_map(|n| n.idle_since.filter(|_| n.is_idle()).map(|t| (t, n.id)))
            .filter(|(since, _)| now - *since > timeout)
            .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        if let Some((_, node)) = victim {
            out.push(ScaleRequest::Shrink {
                pool: pool.kind,
                node,
            });
        }
    }
    out
}
