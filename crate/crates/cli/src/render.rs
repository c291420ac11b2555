//! Text output. Every format here is line-oriented and stable.

use std::fmt::Write;

use orchestrate_core::controller::{ClusterStatusReport, StatusReport};
use orchestrate_core::provider::{ClusterState, DestroyReport};
use orchestrate_core::store::LogRecord;

const PALETTE: [&str; 6] = ["32", "34", "33", "35", "36", "31"];

pub fn cluster_created(c: &ClusterState) -> String {
    let mut out = format!("cluster {} created\n", c.name);
    for p in &c.pools {
        let n = p.nodes.len() as u32;
        let _ = writeln!(
            out,
            "{} pool: {} × {} ({} GPUs, {} CPUs; min {}, max {})",
            p.kind,
            n,
            p.instance_type,
            n * p.capacity.gpus,
            n * p.capacity.cpus,
            p.min_nodes,
            p.max_nodes
        );
    }
    let _ = writeln!(
        out,
        "total: {} nodes, {} GPUs, {} CPUs",
        c.nodes().count(),
        c.total_gpus(),
        c.total_cpus()
    );
    out
}

pub fn cluster_destroyed(name: &str, r: &DestroyReport) -> String {
    format!(
        "cluster {name} destroyed\nkilled runs: {}\nlog lines deleted: {}\nexperiments retained: {}\n",
        r.killed_runs, r.logs_deleted, r.experiments_retained
    )
}

pub fn cluster_status(s: &ClusterStatusReport) -> String {
    let mut out = format!("cluster {}\n", s.name);
    match &s.controller {
        Some(c) => {
            let _ = writeln!(
                out,
                "controller: {} (pid {}, up {:.1}s)",
                c.endpoint, c.pid, c.uptime_secs
            );
        }
        None => out.push_str("controller: not running\n"),
    }
    let _ = writeln!(
        out,
        "{:<5} {:<9} {:<12} {:>6} {:>8} {:>5}",
        "POOL", "NODE", "INSTANCE", "GPUS", "CPUS", "RUNS"
    );
    let mut nodes = 0;
    for p in &s.pools {
        for n in &p.nodes {
            nodes += 1;
            let _ = writeln!(
                out,
                "{:<5} {:<9} {:<12} {:>6} {:>8} {:>5}",
                p.kind,
                n.id.to_string(),
                p.instance_type,
                format!("{}/{}", n.allocated.gpus, n.capacity.gpus),
                format!("{}/{}", n.allocated.cpus, n.capacity.cpus),
                n.resident_runs
            );
        }
    }
    let _ = writeln!(
        out,
        "total: {nodes} nodes, {}/{} GPUs allocated, {}/{} CPUs allocated",
        s.allocated_gpus, s.total_gpus, s.allocated_cpus, s.total_cpus
    );
    out
}

pub fn status(s: &StatusReport) -> String {
    let mut out = format!("experiment {} ({})\n", s.id, s.name);
    let _ = writeln!(out, "cluster: {}", s.cluster_name);
    let _ = writeln!(out, "state: {}", s.state);
    let _ = writeln!(out, "strategy: {}", s.strategy);
    let _ = writeln!(
        out,
        "completed {}/{} ({} failed)",
        s.budget.completed, s.budget.total, s.budget.failed
    );
    match &s.best {
        Some(b) => {
            let assignment = serde_json::to_string(&b.assignment).unwrap_or_default();
            let _ = writeln!(out, "best: {} at {assignment}", b.value);
        }
        None => out.push_str("best: none\n"),
    }
    if s.cluster_destroyed {
        out.push_str("runs: cluster destroyed\n");
        return out;
    }
    let r = &s.runs;
    let _ = writeln!(
        out,
        "runs: {} queued, {} scheduled, {} running, {} succeeded, {} failed, {} killed",
        r.queued, r.scheduled, r.running, r.succeeded, r.failed, r.killed
    );
    let _ = writeln!(
        out,
        "{:<6} {:<9} {:<9} {:<6} {:>10} {:>12}  REASON",
        "RUN", "STATE", "NODE", "GPUS", "DURATION", "VALUE"
    );
    for row in &s.run_table {
        let node = row.node_id.map_or("-".to_owned(), |n| n.to_string());
        let gpus = if row.gpu_slots.is_empty() {
            "-".to_owned()
        } else {
            row.gpu_slots
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let duration = row
            .duration_ms
            .map_or("-".to_owned(), |ms| format!("{:.3}s", ms as f64 / 1000.0));
        let value = row.value.map_or("-".to_owned(), |v| format!("{v:.6}"));
        let _ = writeln!(
            out,
            "{:<6} {:<9} {:<9} {:<6} {:>10} {:>12}  {}",
            row.run_id.short(),
            row.state,
            node,
            gpus,
            duration,
            value,
            row.reason.as_deref().unwrap_or("-")
        );
    }
    out
}

/// One log line; `color` wraps the run tag in an ANSI color picked by run index.
pub fn log_line(r: &LogRecord, color: bool) -> String {
    let short = r.run_id.short();
    let tag = format!("{short} {}|", r.stream.as_str());
    if !color {
        return format!("{tag} {}", r.line);
    }
    let index: usize = short.trim_start_matches('r').parse().unwrap_or(0);
    let code = PALETTE[index % PALETTE.len()];
    format!("\x1b[{code}m{tag}\x1b[0m {}", r.line)
}
