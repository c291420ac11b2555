//! Randomized placement scenarios checked against an independent first-fit packer.
//!
//! Shared by the core property tests and the acceptance suite via `#[path]`.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use orchestrate_core::ids::{ExperimentId, NodeId, RunId};
use orchestrate_core::provider::{Catalog, ClusterConfig, ClusterState};
use orchestrate_core::scheduler::{place_queued, Candidate, Placement, ResourceRequest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Scenario {
    pub cluster: ClusterState,
    pub queue: Vec<Candidate>,
    pub headroom: BTreeMap<ExperimentId, usize>,
}

pub fn cluster(gpu: Option<(&str, u32)>, cpu: Option<u32>) -> ClusterState {
    let mut yaml = String::from("cloud_provider: aws\ncluster_name: s\n");
    if let Some((instance, n)) = gpu {
        yaml += &format!("gpu:\n  instance_type: {instance}\n  min_nodes: {n}\n  max_nodes: {n}\n");
    }
    if let Some(n) = cpu {
        yaml += &format!("cpu:\n  instance_type: c4.xlarge\n  min_nodes: {n}\n  max_nodes: {n}\n");
    }
    ClusterState::provision(
        &ClusterConfig::from_yaml(&yaml).unwrap(),
        &Catalog::builtin(),
    )
    .unwrap()
}

/// Up to 6 nodes, up to 12 queued runs over up to 3 experiments, random existing
/// allocations and random per-experiment headroom.
pub fn scenario(rng: &mut impl Rng) -> Scenario {
    const GPU_TYPES: [&str; 3] = ["p3.2xlarge", "p3.8xlarge", "p3.16xlarge"];
    let gpu_nodes = rng.random_range(0..=4u32);
    let cpu_nodes = rng.random_range(u32::from(gpu_nodes == 0)..=(6 - gpu_nodes).min(2));
    let gpu = (gpu_nodes > 0).then(|| (GPU_TYPES[rng.random_range(0..3)], gpu_nodes));
    let cpu = (cpu_nodes > 0).then_some(cpu_nodes);
    let mut cluster = cluster(gpu, cpu);

    let ids: Vec<NodeId> = cluster.nodes().map(|n| n.id).collect();
    for (k, id) in ids.iter().enumerate() {
        let node = cluster.node(*id).unwrap();
        let (g, c) = (node.capacity.gpus, node.capacity.cpus);
        if rng.random_bool(0.5) {
            let req = ResourceRequest {
                gpus: rng.random_range(0..=g),
                cpus: rng.random_range(1..=c),
            };
            cluster
                .node_mut(*id)
                .unwrap()
                .allocate(&RunId(format!("pre-{k}")), &req)
                .unwrap();
        }
    }

    let experiments = rng.random_range(1..=3usize);
    let runs = rng.random_range(0..=12usize);
    let max_gpus = cluster.nodes().map(|n| n.capacity.gpus).max().unwrap_or(0);
    let queue = (0..runs)
        .map(|i| {
            let e = rng.random_range(0..experiments);
            Candidate {
                run_id: RunId(format!("e{e}-r{i}")),
                experiment_id: ExperimentId::from(format!("e{e}").as_str()),
                experiment_rank: e as u64,
                request: ResourceRequest {
                    gpus: rng.random_range(0..=max_gpus),
                    cpus: rng.random_range(1..=8),
                },
            }
        })
        .collect();
    let mut headroom = BTreeMap::new();
    for e in 0..experiments {
        if rng.random_bool(0.5) {
            headroom.insert(
                ExperimentId::from(format!("e{e}").as_str()),
                rng.random_range(0..=4),
            );
        }
    }
    Scenario {
        cluster,
        queue,
        headroom,
    }
}

/// Plain first-fit: round-robin over experiments by rank, larger requests first within a
/// round, each run on the lowest-numbered node with room.
pub fn oracle_first_fit(s: &Scenario) -> usize {
    let mut per_exp: BTreeMap<u64, Vec<&Candidate>> = BTreeMap::new();
    for c in &s.queue {
        per_exp.entry(c.experiment_rank).or_default().push(c);
    }
    let mut order = Vec::new();
    for k in 0.. {
        let mut round: Vec<&Candidate> =
            per_exp.values().filter_map(|v| v.get(k).copied()).collect();
        if round.is_empty() {
            break;
        }
        round.sort_by_key(|c| std::cmp::Reverse((c.request.gpus, c.request.cpus)));
        order.extend(round);
    }
    let mut free: Vec<(NodeId, u32, u32)> = s
        .cluster
        .nodes()
        .map(|n| {
            (
                n.id,
                n.capacity.gpus - n.allocated.gpus,
                n.capacity.cpus - n.allocated.cpus,
            )
        })
        .collect();
    free.sort_by_key(|f| f.0);
    let mut room = s.headroom.clone();
    let mut placed = 0;
    for c in order {
        if room.get(&c.experiment_id) == Some(&0) {
            continue;
        }
        if let Some(slot) = free
            .iter_mut()
            .find(|f| f.1 >= c.request.gpus && f.2 >= c.request.cpus)
        {
            slot.1 -= c.request.gpus;
            slot.2 -= c.request.cpus;
            if let Some(r) = room.get_mut(&c.experiment_id) {
                *r -= 1;
            }
            placed += 1;
        }
    }
    placed
}

/// Problems found with one plan, empty when it is sound.
pub fn check(s: &Scenario, plan: &[Placement]) -> Vec<String> {
    let mut problems = Vec::new();
    let mut cluster = s.cluster.clone();
    let mut seen = BTreeSet::new();
    let mut per_exp: BTreeMap<&ExperimentId, usize> = BTreeMap::new();
    for p in plan {
        if !seen.insert(&p.run_id) {
            problems.push(format!("{} placed twice", p.run_id));
            continue;
        }
        let Some(c) = s.queue.iter().find(|c| c.run_id == p.run_id) else {
            problems.push(format!("{} was not queued", p.run_id));
            continue;
        };
        *per_exp.entry(&c.experiment_id).or_default() += 1;
        match cluster.node_mut(p.node_id) {
            Some(node) => {
                if let Err(e) = node.allocate(&p.run_id, &c.request) {
                    problems.push(format!("capacity violated on {}: {e}", p.node_id));
                }
            }
            None => problems.push(format!("unknown node {}", p.node_id)),
        }
    }
    for n in cluster.nodes() {
        if n.allocated.gpus > n.capacity.gpus || n.allocated.cpus > n.capacity.cpus {
            problems.push(format!("{} over capacity", n.id));
        }
    }
    for (exp, count) in per_exp {
        if let Some(cap) = s.headroom.get(exp) {
            if count > *cap {
                problems.push(format!(
                    "{exp} placed {count} over bandwidth headroom {cap}"
                ));
            }
        }
    }
    let baseline = oracle_first_fit(s);
    if plan.len() < baseline {
        problems.push(format!("placed {} < first-fit {}", plan.len(), baseline));
    }
    if place_queued(&s.cluster, &s.queue, &s.headroom) != plan {
        problems.push("plan is not deterministic".into());
    }
    problems
}

pub struct Summary {
    pub scenarios: usize,
    pub failures: Vec<String>,
    pub placed: usize,
    pub baseline: usize,
}

pub fn run_scenarios(n: usize, seed: u64) -> Summary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = Summary {
        scenarios: n,
        failures: Vec::new(),
        placed: 0,
        baseline: 0,
    };
    for i in 0..n {
        let s = scenario(&mut rng);
        let plan = place_queued(&s.cluster, &s.queue, &s.headroom);
        summary.placed += plan.len();
        summary.baseline += oracle_first_fit(&s);
        for p in check(&s, &plan) {
            summary.failures.push(format!("scenario {i}: {p}"));
        }
    }
    summary
}

/// Largest number of runs any assignment can place, by exhaustive search.
pub fn brute_force_max(cluster: &ClusterState, requests: &[ResourceRequest]) -> usize {
    fn go(free: &mut Vec<(u32, u32)>, reqs: &[ResourceRequest]) -> usize {
        let Some((r, rest)) = reqs.split_first() else {
            return 0;
        };
        let mut best = go(free, rest);
        for i in 0..free.len() {
            if free[i].0 >= r.gpus && free[i].1 >= r.cpus {
                free[i].0 -= r.gpus;
                free[i].1 -= r.cpus;
                best = best.max(1 + go(free, rest));
                free[i].0 += r.gpus;
                free[i].1 += r.cpus;
            }
        }
        best
    }
    let mut free: Vec<(u32, u32)> = cluster
        .nodes()
        .map(|n| (n.free_gpus(), n.free_cpus()))
        .collect();
    go(&mut free, requests)
}
