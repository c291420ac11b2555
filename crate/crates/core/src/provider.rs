//! Simulated cloud provider.
//!
//! A cluster is a named set of node pools whose nodes carry CPU and GPU capacity taken
//! from an instance catalog. Nothing is provisioned anywhere: nodes are accounting
//! records that the scheduler packs runs onto.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{NodeId, RunId};
use crate::scheduler::ResourceRequest;
use crate::store::{PurgeReport, StateRoot, Timestamp};

const BUILTIN_CATALOG: &str = include_str!("../data/catalog.yaml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceCapacity {
    pub cpus: u32,
    pub gpus: u32,
}

/// Instance type name → capacity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    entries: BTreeMap<String, InstanceCapacity>,
}

impl Catalog {
    pub fn builtin() -> Self {
        Catalog {
            entries: serde_yaml::from_str(BUILTIN_CATALOG).expect("bundled catalog parses"),
        }
    }

    /// The built-in catalog extended by `$ORCHESTRATE_HOME/catalog.yaml`, if present.
    pub fn load(home: &Path) -> Result<Self> {
        let mut catalog = Self::builtin();
        let path = home.join("catalog.yaml");
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                let extra: BTreeMap<String, InstanceCapacity> = serde_yaml::from_str(&text)
                    .map_err(|e| Error::validation(path.display().to_string(), e.to_string()))?;
                for (name, cap) in &extra {
                    if cap.cpus == 0 {
                        return Err(Error::validation(
                            format!("{}: {name}.cpus", path.display()),
                            "cpus must be positive",
                        ));
                    }
                }
                catalog.entries.extend(extra);
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(path, e)),
        }
        Ok(catalog)
    }

    pub fn lookup(&self, instance_type: &str) -> Result<InstanceCapacity> {
        self.entries.get(instance_type).copied().ok_or_else(|| {
            Error::validation(
                "instance_type",
                format!(
                    "unknown instance type `{instance_type}`; known types: {}",
                    self.entries.keys().cloned().collect::<Vec<_>>().join(", ")
                ),
            )
        })
    }

    pub fn max_gpus(&self) -> u32 {
        self.entries.values().map(|c| c.gpus).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Gpu,
    Cpu,
}

impl std::fmt::Display for PoolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            PoolKind::Gpu => "gpu",
            PoolKind::Cpu => "cpu",
        })
    }
}

/// Only the simulated provider exists. `aws` is accepted so that configuration files
/// written for the real service load unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CloudProvider {
    #[serde(rename = "aws-sim", alias = "aws")]
    AwsSim,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub instance_type: String,
    pub min_nodes: u32,
    pub max_nodes: u32,
}

/// Cluster configuration file.
///
/// ```yaml
/// cloud_provider: aws
/// cluster_name: orchestrate-cluster
/// gpu:
///   instance_type: p3.8xlarge
///   min_nodes: 4
///   max_nodes: 4
/// cpu:
///   instance_type: c4.xlarge
///   min_nodes: 4
///   max_nodes: 4
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub cloud_provider: CloudProvider,
    pub cluster_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu: Option<PoolConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu: Option<PoolConfig>,
}

impl ClusterConfig {
    pub fn from_yaml(text: &str) -> Result<Self> {
        serde_yaml::from_str(text).map_err(|e| {
            let path = e
                .location()
                .map(|l| format!("line {} column {}", l.line(), l.column()))
                .unwrap_or_else(|| "<document>".into());
            Error::validation(path, e.to_string())
        })
    }

    pub fn pools(&self) -> impl Iterator<Item = (PoolKind, &PoolConfig)> {
        [(PoolKind::Gpu, &self.gpu), (PoolKind::Cpu, &self.cpu)]
            .into_iter()
            .filter_map(|(k, p)| p.as_ref().map(|p| (k, p)))
    }

    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        validate_cluster_name(&self.cluster_name)?;
        if self.gpu.is_none() && self.cpu.is_none() {
            return Err(Error::validation(
                "gpu/cpu",
                "at least one of the gpu or cpu pools must be configured",
            ));
        }
        for (kind, pool) in self.pools() {
            let cap = catalog.lookup(&pool.instance_type).map_err(|e| match e {
                Error::Validation { message, .. } => {
                    Error::validation(format!("{kind}.instance_type"), message)
                }
                other => other,
            })?;
            if pool.min_nodes > pool.max_nodes {
                return Err(Error::validation(
                    format!("{kind}.min_nodes"),
                    "min_nodes must not exceed max_nodes",
                ));
            }
            match kind {
                PoolKind::Gpu if cap.gpus == 0 => {
                    return Err(Error::validation(
                        "gpu.instance_type",
                        format!("`{}` has no GPUs", pool.instance_type),
                    ))
                }
                PoolKind::Cpu if cap.gpus > 0 => {
                    return Err(Error::validation(
                        "cpu.instance_type",
                        format!("`{}` has GPUs; use it in the gpu pool", pool.instance_type),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub fn validate_cluster_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        && !name.starts_with('-');
    if ok {
        Ok(())
    } else {
        Err(Error::validation(
            "cluster_name",
            "use 1-64 characters from [A-Za-z0-9_-]",
        ))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub cpus: u32,
    pub gpus: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub pool: PoolKind,
    pub instance_type: String,
    pub capacity: InstanceCapacity,
    pub allocated: Allocation,
    pub resident_runs: BTreeSet<RunId>,
    /// Holder of each GPU slot.
    pub gpu_slots: Vec<Option<RunId>>,
    /// When the node last became empty; `None` while runs are resident.
    pub idle_since: Option<Timestamp>,
}

impl Node {
    fn new(id: NodeId, pool: PoolKind, instance_type: &str, capacity: InstanceCapacity) -> Self {
        Node {
            id,
            pool,
            instance_type: instance_type.to_owned(),
            capacity,
            allocated: Allocation::default(),
            resident_runs: BTreeSet::new(),
            gpu_slots: vec![None; capacity.gpus as usize],
            idle_since: Some(Utc::now()),
        }
    }

    pub fn free_gpus(&self) -> u32 {
        self.capacity.gpus - self.allocated.gpus
    }

    pub fn free_cpus(&self) -> u32 {
        self.capacity.cpus - self.allocated.cpus
    }

    pub fn fits(&self, req: &ResourceRequest) -> bool {
        self.free_gpus() >= req.gpus && self.free_cpus() >= req.cpus
    }

    pub fn is_idle(&self) -> bool {
        self.resident_runs.is_empty()
    }

    /// Reserves `req` for `run` and returns the GPU slot indices handed to it.
    pub fn allocate(&mut self, run: &RunId, req: &ResourceRequest) -> Result<Vec<u32>> {
        if !self.fits(req) {
            return Err(Error::Internal(format!(
                "{} cannot hold {} gpus / {} cpus",
                self.id, req.gpus, req.cpus
            )));
        }
        if !self.resident_runs.insert(run.clone()) {
            return Err(Error::Internal(format!(
                "{run} already resident on {}",
                self.id
            )));
        }
        self.allocated.gpus += req.gpus;
        self.allocated.cpus += req.cpus;
        self.idle_since = None;
        let mut slots = Vec::with_capacity(req.gpus as usize);
        for (i, slot) in self.gpu_slots.iter_mut().enumerate() {
            if slots.len() == req.gpus as usize {
                break;
            }
            if slot.is_none() {
                *slot = Some(run.clone());
                slots.push(i as u32);
            }
        }
        Ok(slots)
    }

    pub fn release(&mut self, run: &RunId, req: &ResourceRequest, at: Timestamp) -> Result<()> {
        if !self.resident_runs.remove(run) {
            return Err(Error::Internal(format!(
                "{run} is not resident on {}",
                self.id
            )));
        }
        self.allocated.gpus -= req.gpus;
        self.allocated.cpus -= req.cpus;
        for slot in &mut self.gpu_slots {
            if slot.as_ref() == Some(run) {
                *slot = None;
            }
        }
        if self.resident_runs.is_empty() {
            self.idle_since = Some(at);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub kind: PoolKind,
    pub instance_type: String,
    pub capacity: InstanceCapacity,
    pub min_nodes: u32,
    pub max_nodes: u32,
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerInfo {
    /// `host:port` of the control API.
    pub endpoint: String,
    pub pid: u32,
    pub started_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub name: String,
    pub pools: Vec<Pool>,
    pub created_at: Timestamp,
    #[serde(default)]
    pub controller: Option<ControllerInfo>,
    pub next_node_id: u32,
}

impl ClusterState {
    /// Builds a cluster with every pool at its minimum size.
    pub fn provision(config: &ClusterConfig, catalog: &Catalog) -> Result<Self> {
        config.validate(catalog)?;
        let mut state = ClusterState {
            name: config.cluster_name.clone(),
            pools: Vec::new(),
            created_at: Utc::now(),
            controller: None,
            next_node_id: 0,
        };
        for (kind, pc) in config.pools() {
            state.pools.push(Pool {
                kind,
                instance_type: pc.instance_type.clone(),
                capacity: catalog.lookup(&pc.instance_type)?,
                min_nodes: pc.min_nodes,
                max_nodes: pc.max_nodes,
                nodes: Vec::new(),
            });
            state.grow(kind, pc.min_nodes as usize)?;
        }
        Ok(state)
    }

    pub fn pool(&self, kind: PoolKind) -> Option<&Pool> {
        self.pools.iter().find(|p| p.kind == kind)
    }

    fn pool_mut(&mut self, kind: PoolKind) -> Result<&mut Pool> {
        let name = self.name.clone();
        self.pools
            .iter_mut()
            .find(|p| p.kind == kind)
            .ok_or_else(|| Error::not_found("pool", format!("{name}/{kind}")))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.pools.iter().flat_map(|p| p.nodes.iter())
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.pools
            .iter_mut()
            .flat_map(|p| p.nodes.iter_mut())
            .find(|n| n.id == id)
    }

    fn grow(&mut self, kind: PoolKind, count: usize) -> Result<()> {
        let mut next = self.next_node_id;
        let pool = self.pool_mut(kind)?;
        for _ in 0..count {
            let node = Node::new(NodeId(next), kind, &pool.instance_type, pool.capacity);
            next += 1;
            pool.nodes.push(node);
        }
        self.next_node_id = next;
        Ok(())
    }

    /// Resizes a pool to `desired` clamped to its bounds. Shrinking removes empty nodes
    /// only, newest first; it never evicts a run.
    pub fn scale_pool(&mut self, kind: PoolKind, desired: u32) -> Result<()> {
        let pool = self.pool_mut(kind)?;
        let target = desired.clamp(pool.min_nodes, pool.max_nodes) as usize;
        let current = pool.nodes.len();
        if target > current {
            return self.grow(kind, target - current);
        }
        let excess = current - target;
        let idle: Vec<NodeId> = pool
            .nodes
            .iter()
            .rev()
            .filter(|n| n.is_idle())
            .map(|n| n.id)
            .take(excess)
            .collect();
        if idle.len() < excess {
            let blocking = pool
                .nodes
                .iter()
                .rev()
                .find(|n| !n.is_idle())
                .expect("some node is busy");
            return Err(Error::Rejected(format!(
                "cannot shrink {kind} pool to {target} nodes: {} still hosts {} run(s)",
                blocking.id,
                blocking.resident_runs.len()
            )));
        }
        pool.nodes.retain(|n| !idle.contains(&n.id));
        Ok(())
    }

    /// Removes one specific empty node, respecting the pool minimum.
    pub fn remove_node(&mut self, id: NodeId) -> Result<()> {
        let kind = self
            .node(id)
            .ok_or_else(|| Error::not_found("node", id.to_string()))?
            .pool;
        let pool = self.pool_mut(kind)?;
        if pool.nodes.len() as u32 <= pool.min_nodes {
            return Err(Error::Rejected(format!(
                "{kind} pool is at its minimum size"
            )));
        }
        let node = pool.nodes.iter().find(|n| n.id == id).expect("node exists");
        if !node.is_idle() {
            return Err(Error::Rejected(format!("{id} still hosts runs")));
        }
        pool.nodes.retain(|n| n.id != id);
        Ok(())
    }

    /// Could `req` ever be satisfied by some pool at its maximum size?
    pub fn could_ever_fit(&self, req: &ResourceRequest) -> bool {
        self.pools
            .iter()
            .any(|p| p.max_nodes > 0 && p.capacity.gpus >= req.gpus && p.capacity.cpus >= req.cpus)
    }

    pub fn total_gpus(&self) -> u32 {
        self.nodes().map(|n| n.capacity.gpus).sum()
    }

    pub fn total_cpus(&self) -> u32 {
        self.nodes().map(|n| n.capacity.cpus).sum()
    }

    /// Zeroes all allocations, as when a fresh controller takes over the cluster.
    pub fn clear_allocations(&mut self) {
        let now = Utc::now();
        for pool in &mut self.pools {
            for node in &mut pool.nodes {
                node.allocated = Allocation::default();
                node.resident_runs.clear();
                node.gpu_slots.iter_mut().for_each(|s| *s = None);
                node.idle_since = Some(now);
            }
        }
    }
}

/// Validates `config`, checks name uniqueness and the account quota, and persists the
/// new cluster. The check and the write happen under the state-root lock.
pub fn create_cluster(
    root: &StateRoot,
    catalog: &Catalog,
    quota: usize,
    config: &ClusterConfig,
) -> Result<ClusterState> {
    let state = ClusterState::provision(config, catalog)?;
    let _lock = root.lock()?;
    if root.cluster_exists(&state.name) {
        return Err(Error::Conflict(format!(
            "cluster {} already exists",
            state.name
        )));
    }
    if root.list_clusters()?.len() >= quota {
        return Err(Error::QuotaExceeded { limit: quota });
    }
    root.save_cluster(&state)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DestroyReport {
    pub killed_runs: u64,
    pub logs_deleted: u64,
    pub experiments_retained: u64,
}

/// Shuts down the cluster's controller (which kills its runs), purges the cluster's
/// artifacts, and removes it from quota accounting.
pub fn destroy_cluster(root: &StateRoot, name: &str, grace: Duration) -> Result<DestroyReport> {
    let cluster = root.load_cluster(name)?;
    let mut live = 0u64;
    for exp in root.indexed_experiments(name)? {
        live += root
            .load_runs(name, &exp)?
            .iter()
            .filter(|r| !r.state.is_terminal())
            .count() as u64;
    }
    if let Some(ctl) = &cluster.controller {
        stop_controller_process(ctl.pid, grace)?;
    }
    let _lock = root.lock()?;
    let PurgeReport {
        logs_deleted,
        experiments_retained,
    } = root.purge_cluster_artifacts(name)?;
    root.remove_cluster(name)?;
    Ok(DestroyReport {
        killed_runs: live,
        logs_deleted,
        experiments_retained,
    })
}

pub(crate) fn process_alive(pid: u32) -> bool {
    // SAFETY: signal 0 performs permission and existence checks only.
    let rc = unsafe { libc::kill(pid as libc::pid_t, 0) };
    rc == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

/// Asks a controller process to shut down and waits for it to exit. The controller gets
/// twice the run kill grace, plus a margin, before it is killed outright.
pub fn stop_controller_process(pid: u32, grace: Duration) -> Result<()> {
    if pid == 0 || pid == std::process::id() || !process_alive(pid) {
        return Ok(());
    }
    // SAFETY: plain signal delivery to a pid we recorded ourselves.
    unsafe { libc::kill(pid as libc::pid_t, libc::SIGTERM) };
    let deadline = std::time::Instant::now() + grace * 2 + Duration::from_secs(5);
    while std::time::Instant::now() < deadline {
        if !process_alive(pid) {
            return Ok(());
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    // SAFETY: as above.
    unsafe { libc::kill(pid as libc::pid_t, libc::SIGKILL) };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const DEMO_YML: &str = "\
# Cluster Config file: demo.yml
cloud_provider: aws
cluster_name: orchestrate-cluster
gpu:
  instance_type: p3.8xlarge
  min_nodes: 4
  max_nodes: 4
cpu:
  instance_type: c4.xlarge
  min_nodes: 4
  max_nodes: 4
";

    fn pool_cfg(kind: &str, instance: &str, min: u32, max: u32) -> String {
        format!(
            "cloud_provider: aws-sim\ncluster_name: c\n{kind}:\n  instance_type: {instance}\n  min_nodes: {min}\n  max_nodes: {max}\n"
        )
    }

    #[test]
    fn catalog_values() {
        let c = Catalog::builtin();
        assert_eq!(c.lookup("p3.16xlarge").unwrap().gpus, 8);
        assert_eq!(c.lookup("c4.xlarge").unwrap().gpus, 0);
        assert_eq!(
            c.lookup("p3.8xlarge").unwrap(),
            InstanceCapacity { cpus: 32, gpus: 4 }
        );
        assert_eq!(c.max_gpus(), 8);
    }

    #[test]
    fn unknown_instance_lists_known_types() {
        let err = Catalog::builtin()
            .lookup("m5.large")
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("p3.16xlarge") && err.contains("c4.xlarge"),
            "{err}"
        );
    }

    #[test]
    fn catalog_override_file_extends_builtin() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(
            tmp.path().join("catalog.yaml"),
            "g5.xlarge: {cpus: 4, gpus: 1}\n",
        )
        .unwrap();
        let c = Catalog::load(tmp.path()).unwrap();
        assert_eq!(c.lookup("g5.xlarge").unwrap().gpus, 1);
        assert_eq!(c.lookup("p3.2xlarge").unwrap().gpus, 1);
    }

    #[test]
    fn demo_config_provisions_eight_nodes() {
        let cfg = ClusterConfig::from_yaml(DEMO_YML).unwrap();
        let state = ClusterState::provision(&cfg, &Catalog::builtin()).unwrap();
        assert_eq!(state.nodes().count(), 8);
        assert_eq!(state.total_gpus(), 16);
        assert_eq!(state.total_cpus(), 4 * 32 + 4 * 4);
        let ids: BTreeSet<_> = state.nodes().map(|n| n.id).collect();
        assert_eq!(ids.len(), 8);
        assert!(state.nodes().all(|n| n.allocated == Allocation::default()));
    }

    #[test]
    fn empty_pool_is_valid() {
        let cfg = ClusterConfig::from_yaml(&pool_cfg("gpu", "p3.8xlarge", 0, 2)).unwrap();
        let state = ClusterState::provision(&cfg, &Catalog::builtin()).unwrap();
        assert_eq!(state.nodes().count(), 0);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cat = Catalog::builtin();
        let err = ClusterConfig::from_yaml(&pool_cfg("gpu", "p3.8xlarge", 3, 2))
            .unwrap()
            .validate(&cat)
            .unwrap_err();
        assert!(err.to_string().contains("gpu.min_nodes"), "{err}");
        let err = ClusterConfig::from_yaml(&pool_cfg("cpu", "nope", 0, 2))
            .unwrap()
            .validate(&cat)
            .unwrap_err();
        assert!(err.to_string().contains("cpu.instance_type"), "{err}");
        let err = ClusterConfig::from_yaml("cloud_provider: gcp\ncluster_name: c\n").unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
        let err = ClusterConfig::from_yaml("cloud_provider: aws\ncluster_name: c\n")
            .unwrap()
            .validate(&cat)
            .unwrap_err();
        assert!(err.to_string().contains("at least one"), "{err}");
    }

    #[test]
    fn scale_clamps_to_bounds() {
        let cfg = ClusterConfig::from_yaml(&pool_cfg("gpu", "p3.8xlarge", 1, 4)).unwrap();
        let mut state = ClusterState::provision(&cfg, &Catalog::builtin()).unwrap();
        state.scale_pool(PoolKind::Gpu, 9).unwrap();
        assert_eq!(state.nodes().count(), 4);
        state.scale_pool(PoolKind::Gpu, 0).unwrap();
        assert_eq!(state.nodes().count(), 1);
    }

    #[test]
    fn fixed_pool_ignores_desired() {
        let cfg = ClusterConfig::from_yaml(&pool_cfg("gpu", "p3.8xlarge", 4, 4)).unwrap();
        let mut state = ClusterState::provision(&cfg, &Catalog::builtin()).unwrap();
        for desired in [0, 1, 4, 100] {
            state.scale_pool(PoolKind::Gpu, desired).unwrap();
            assert_eq!(state.nodes().count(), 4);
        }
    }

    #[test]
    fn shrink_never_evicts() {
        let cfg = ClusterConfig::from_yaml(&pool_cfg("gpu", "p3.8xlarge", 0, 4)).unwrap();
        let mut state = ClusterState::provision(&cfg, &Catalog::builtin()).unwrap();
        state.scale_pool(PoolKind::Gpu, 2).unwrap();
        let req = ResourceRequest { gpus: 1, cpus: 1 };
        let ids: Vec<NodeId> = state.nodes().map(|n| n.id).collect();
        for (i, id) in ids.iter().enumerate() {
            state
                .node_mut(*id)
                .unwrap()
                .allocate(&RunId(format!("r{i}")), &req)
                .unwrap();
        }
        let err = state.scale_pool(PoolKind::Gpu, 1).unwrap_err().to_string();
        assert!(err.contains("node-1"), "{err}");
        assert_eq!(state.nodes().count(), 2);
    }

    #[test]
    fn gpu_slots_are_lowest_free_indices() {
        let cfg = ClusterConfig::from_yaml(&pool_cfg("gpu", "p3.8xlarge", 1, 1)).unwrap();
        let mut state = ClusterState::provision(&cfg, &Catalog::builtin()).unwrap();
        let node = state.node_mut(NodeId(0)).unwrap();
        let two = ResourceRequest { gpus: 2, cpus: 1 };
        assert_eq!(node.allocate(&"a".into(), &two).unwrap(), vec![0, 1]);
        assert_eq!(
            node.allocate(&"b".into(), &ResourceRequest { gpus: 1, cpus: 1 })
                .unwrap(),
            vec![2]
        );
        node.release(&"a".into(), &two, Utc::now()).unwrap();
        assert_eq!(node.allocate(&"c".into(), &two).unwrap(), vec![0, 1]);
        assert_eq!(node.allocated, Allocation { cpus: 2, gpus: 3 });
    }

    #[test]
    fn quota_and_name_reuse() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path()).unwrap();
        let cat = Catalog::builtin();
        let mk = |name: &str| {
            ClusterConfig::from_yaml(
                &pool_cfg("cpu", "c4.xlarge", 1, 1)
                    .replace("cluster_name: c", &format!("cluster_name: {name}")),
            )
            .unwrap()
        };
        for n in ["a", "b", "c"] {
            create_cluster(&root, &cat, 3, &mk(n)).unwrap();
        }
        assert!(matches!(
            create_cluster(&root, &cat, 3, &mk("d")),
            Err(Error::QuotaExceeded { limit: 3 })
        ));
        assert!(matches!(
            create_cluster(&root, &cat, 4, &mk("a")),
            Err(Error::Conflict(_))
        ));
        destroy_cluster(&root, "b", Duration::from_millis(10)).unwrap();
        create_cluster(&root, &cat, 3, &mk("d")).unwrap();
        destroy_cluster(&root, "d", Duration::from_millis(10)).unwrap();
        create_cluster(&root, &cat, 3, &mk("d")).unwrap();
    }

    #[test]
    fn destroy_unknown_is_not_found() {
        let tmp = tempfile::tempdir().unwrap();
        let root = StateRoot::init_home(tmp.path()).unwrap();
        assert!(matches!(
            destroy_cluster(&root, "ghost", Duration::from_millis(10)),
            Err(Error::NotFound { .. })
        ));
    }
}
