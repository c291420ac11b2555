use std::time::{Duration, Instant};

use orchestrate_core::controller::{start, Controller, ExperimentConfig, RunningController};
use orchestrate_core::ids::ExperimentId;
use orchestrate_core::provider::{create_cluster, Catalog, ClusterConfig, PoolKind};
use orchestrate_core::scheduler::RunState;
use orchestrate_core::store::{ExperimentState, StateRoot};

const FAST_SETTINGS: &str = "kill_grace_ms: 500\nautoscale_interval_ms: 50\nidle_timeout_ms: 200\n";

fn home(settings: &str) -> (tempfile::TempDir, StateRoot) {
    let tmp = tempfile::tempdir().unwrap();
    let root = StateRoot::init_home(tmp.path()).unwrap();
    std::fs::write(tmp.path().join("settings.yaml"), settings).unwrap();
    (tmp, root)
}

fn cluster(root: &StateRoot, yaml: &str) -> String {
    let config = ClusterConfig::from_yaml(yaml).unwrap();
    create_cluster(root, &Catalog::builtin(), 3, &config)
        .unwrap()
        .name
}

fn gpu_cluster(root: &StateRoot, instance: &str, min: u32, max: u32) -> String {
    cluster(
        root,
        &format!(
            "cloud_provider: aws-sim\ncluster_name: c\ngpu:\n  instance_type: {instance}\n  min_nodes: {min}\n  max_nodes: {max}\n"
        ),
    )
}

fn synthetic(budget: u64, bandwidth: u32, gpus: u32, duration_ms: u64) -> ExperimentConfig {
    ExperimentConfig::from_yaml(&format!(
        "name: t\nparameters:\n  - {{name: x, type: double, bounds: {{min: 0, max: 1}}}}\nseed: 3\n\
         observation_budget: {budget}\nparallel_bandwidth: {bandwidth}\nresources: {{gpus: {gpus}}}\n\
         synthetic: {{objective: negated_quadratic, params: {{center: 0.3}}, duration_ms: {duration_ms}}}\n"
    ))
    .unwrap()
}

async fn wait_for(ctl: &Controller, id: &ExperimentId, limit: Duration, state: ExperimentState) {
    let deadline = Instant::now() + limit;
    loop {
        let s = ctl.status(id).unwrap();
        if s.state == state && s.runs.live() == 0 {
            return;
        }
        assert!(Instant::now() < deadline, "timed out waiting: {:?}", s.runs);
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

async fn boot(root: &StateRoot, name: &str) -> RunningController {
    start(root.clone(), name).await.unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn experiment_completes_exactly_on_budget_within_bandwidth() {
    let (_tmp, root) = home(FAST_SETTINGS);
    let name = gpu_cluster(&root, "p3.2xlarge", 6, 6);
    let running = boot(&root, &name).await;
    let ctl = running.controller().clone();
    let id = ctl.create_experiment(&synthetic(40, 4, 1, 5)).unwrap();

    let deadline = Instant::now() + Duration::from_secs(20);
    let mut max_placed = 0;
    loop {
        let s = ctl.status(&id).unwrap();
        max_placed = max_placed.max(s.runs.placed());
        assert!(s.runs.live() <= 4, "{:?}", s.runs);
        if s.state == ExperimentState::Completed && s.runs.live() == 0 {
            assert_eq!(s.budget.completed + s.budget.failed, 40);
            assert_eq!(s.runs.succeeded, 40);
            assert_eq!(s.runs.total(), 40);
            let best = s.best.unwrap();
            let max = s
                .observations
                .iter()
                .filter_map(|o| o.value)
                .fold(f64::MIN, f64::max);
            assert_eq!(best.value, max);
            break;
        }
        assert!(Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
    assert!(max_placed >= 2, "runs never overlapped");
    let cs = ctl.cluster_status();
    assert_eq!(cs.allocated_gpus, 0);
    // the durable record agrees with the live one
    let stored = root.load_experiment(&id).unwrap();
    assert_eq!(stored.observations.len(), 40);
    assert_eq!(stored.state(), ExperimentState::Completed);
    // two log lines per synthetic run
    assert_eq!(ctl.logs().since(&id, None).unwrap().len(), 80);
    running.shutdown().await.unwrap();
    assert!(root.load_cluster(&name).unwrap().controller.is_none());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn initial_issue_is_min_of_budget_and_bandwidth() {
    let (_tmp, root) = home(FAST_SETTINGS);
    let name = gpu_cluster(&root, "p3.2xlarge", 0, 0);
    // a pool with max 0 can never hold anything
    let running = boot(&root, &name).await;
    let err = running
        .controller()
        .create_experiment(&synthetic(300, 15, 1, 50))
        .unwrap_err();
    assert!(err.to_string().contains("unschedulable"), "{err}");
    running.shutdown().await.unwrap();

    let (_tmp, root) = home(FAST_SETTINGS);
    let name = gpu_cluster(&root, "p3.2xlarge", 0, 1);
    let running = boot(&root, &name).await;
    let ctl = running.controller();
    for (budget, bandwidth, expected) in [(300, 15, 15), (1, 15, 1)] {
        let id = ctl
            .create_experiment(&synthetic(budget, bandwidth, 1, 60_000))
            .unwrap();
        assert_eq!(ctl.status(&id).unwrap().runs.total(), expected);
        ctl.stop_experiment(&id).await.unwrap();
    }
    running.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn stop_kills_everything_and_is_idempotent() {
    let (_tmp, root) = home(FAST_SETTINGS);
    let name = gpu_cluster(&root, "p3.8xlarge", 2, 2);
    let running = boot(&root, &name).await;
    let ctl = running.controller().clone();
    // 8 GPUs in total; the other experiment holds 4, so 4 of the 5 one-GPU runs fit
    let other = ctl.create_experiment(&synthetic(1000, 1, 4, 20)).unwrap();
    let id = ctl
        .create_experiment(&synthetic(100, 5, 1, 60_000))
        .unwrap();
    let s = ctl.status(&id).unwrap();
    assert_eq!(s.runs.live(), 5);
    assert_eq!(s.runs.queued, 1, "{:?}", s.runs);

    let t0 = Instant::now();
    let first = ctl.stop_experiment(&id).await.unwrap();
    assert!(t0.elapsed() < Duration::from_secs(1), "{:?}", t0.elapsed());
    assert_eq!(first.killed, 5);
    let s = ctl.status(&id).unwrap();
    assert_eq!(s.state, ExperimentState::Deleted);
    assert_eq!(s.runs.killed, 5);
    assert_eq!(s.budget.completed + s.budget.failed, 0);
    assert_eq!(ctl.stop_experiment(&id).await.unwrap().killed, 0);
    assert_eq!(ctl.status(&id).unwrap(), s);

    // the other experiment keeps making progress
    let before = ctl.status(&other).unwrap().budget.completed;
    tokio::time::sleep(Duration::from_millis(300)).await;
    let after = ctl.status(&other).unwrap();
    assert!(
        after.budget.completed > before + 3,
        "{before} -> {}",
        after.budget.completed
    );
    assert_eq!(ctl.cluster_status().allocated_gpus, 4);
    running.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn cpu_only_runs_stay_off_gpu_nodes() {
    let (_tmp, root) = home(FAST_SETTINGS);
    let name = cluster(
        &root,
        "cloud_provider: aws\ncluster_name: orchestrate-cluster\ngpu:\n  instance_type: p3.8xlarge\n  min_nodes: 4\n  max_nodes: 4\ncpu:\n  instance_type: c4.xlarge\n  min_nodes: 4\n  max_nodes: 4\n",
    );
    let running = boot(&root, &name).await;
    let ctl = running.controller().clone();
    let cpu = ctl.create_experiment(&synthetic(30, 6, 0, 5)).unwrap();
    let gpu = ctl.create_experiment(&synthetic(12, 4, 4, 5)).unwrap();
    wait_for(
        &ctl,
        &cpu,
        Duration::from_secs(20),
        ExperimentState::Completed,
    )
    .await;
    wait_for(
        &ctl,
        &gpu,
        Duration::from_secs(20),
        ExperimentState::Completed,
    )
    .await;
    let cs = ctl.cluster_status();
    let cpu_nodes: Vec<_> = cs
        .pools
        .iter()
        .filter(|p| p.kind == PoolKind::Cpu)
        .flat_map(|p| p.nodes.iter().map(|n| n.id))
        .collect();
    for row in ctl.status(&cpu).unwrap().run_table {
        assert!(row.gpu_slots.is_empty());
        assert!(cpu_nodes.contains(&row.node_id.unwrap()), "{row:?}");
    }
    for row in ctl.status(&gpu).unwrap().run_table {
        assert_eq!(row.gpu_slots.len(), 4);
        assert!(!cpu_nodes.contains(&row.node_id.unwrap()));
    }
    running.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn process_runs_report_values_failures_and_logs() {
    let (tmp, root) = home(FAST_SETTINGS);
    let name = cluster(
        &root,
        "cloud_provider: aws-sim\ncluster_name: c\ncpu:\n  instance_type: c4.xlarge\n  min_nodes: 2\n  max_nodes: 2\n",
    );
    let script = tmp.path().join("model.sh");
    std::fs::write(
        &script,
        r#"#!/bin/sh
x=$(sed 's/.*"n":\([0-9]*\).*/\1/' "$ORCHESTRATE_SUGGESTION_FILE")
echo "run $ORCHESTRATE_RUN_ID n=$x"
echo "to stderr" >&2
if [ "$x" -eq 1 ]; then exit 3; fi
if [ "$x" -eq 2 ]; then exit 0; fi
echo "{\"value\": $x}" > "$ORCHESTRATE_OBSERVATION_FILE"
"#,
    )
    .unwrap();
    let config = ExperimentConfig::from_yaml(&format!(
        "name: p\nparameters:\n  - {{name: n, type: int, bounds: {{min: 1, max: 4}}, grid_count: 4}}\n\
         strategy: grid\nobservation_budget: 4\nparallel_bandwidth: 2\n\
         run: {{command: [sh, {}]}}\n",
        script.display()
    ))
    .unwrap();
    let running = boot(&root, &name).await;
    let ctl = running.controller().clone();
    let id = ctl.create_experiment(&config).unwrap();
    wait_for(
        &ctl,
        &id,
        Duration::from_secs(20),
        ExperimentState::Completed,
    )
    .await;
    let s = ctl.status(&id).unwrap();
    assert_eq!((s.budget.completed, s.budget.failed), (2, 2));
    assert_eq!(s.best.as_ref().unwrap().value, 4.0);
    let reasons: Vec<_> = s.run_table.iter().map(|r| r.reason.clone()).collect();
    assert_eq!(reasons[0].as_deref(), Some("exit code 3"));
    assert_eq!(reasons[1].as_deref(), Some("missing observation"));
    let logs = ctl.logs().since(&id, None).unwrap();
    assert_eq!(logs.len(), 8);
    for run in &s.run_table {
        let own: Vec<_> = logs.iter().filter(|l| l.run_id == run.run_id).collect();
        assert_eq!(own.len(), 2);
        assert!(own.iter().any(|l| l.line.contains(run.run_id.as_str())));
    }
    running.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn stopping_process_runs_leaves_no_processes() {
    let (tmp, root) = home(FAST_SETTINGS);
    let name = cluster(
        &root,
        "cloud_provider: aws-sim\ncluster_name: c\ncpu:\n  instance_type: c4.xlarge\n  min_nodes: 1\n  max_nodes: 1\n",
    );
    let marker = tmp.path().join("pids");
    // ignores SIGTERM and forks a grandchild, so only the group SIGKILL ends it
    let script = format!(
        "trap '' TERM; sleep 300 & echo $! >> {m}; echo $$ >> {m}; wait",
        m = marker.display()
    );
    let config = ExperimentConfig::from_yaml(&format!(
        "name: s\nparameters:\n  - {{name: x, type: double, bounds: {{min: 0, max: 1}}}}\n\
         observation_budget: 10\nparallel_bandwidth: 3\n\
         run: {{command: [sh, -c, \"{script}\"]}}\n"
    ))
    .unwrap();
    let running = boot(&root, &name).await;
    let ctl = running.controller().clone();
    let id = ctl.create_experiment(&config).unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while std::fs::read_to_string(&marker).map_or(0, |s| s.lines().count()) < 6 {
        assert!(Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let t0 = Instant::now();
    assert_eq!(ctl.stop_experiment(&id).await.unwrap().killed, 3);
    assert!(
        t0.elapsed() < Duration::from_millis(1000),
        "{:?}",
        t0.elapsed()
    );
    assert_eq!(ctl.status(&id).unwrap().runs.killed, 3);
    for pid in std::fs::read_to_string(&marker).unwrap().lines() {
        let pid: i32 = pid.trim().parse().unwrap();
        assert!(!alive(pid), "process {pid} survived");
    }
    running.shutdown().await.unwrap();
}

/// Zombies awaiting an absent reaper count as gone.
fn alive(pid: i32) -> bool {
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => {
            let state = stat.rsplit_once(") ").map(|(_, rest)| &rest[..1]);
            state != Some("Z")
        }
        Err(_) => false,
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn restart_reissues_interrupted_work() {
    let (_tmp, root) = home(FAST_SETTINGS);
    let name = gpu_cluster(&root, "p3.2xlarge", 2, 2);
    let running = boot(&root, &name).await;
    let id = running
        .controller()
        .create_experiment(&synthetic(6, 2, 1, 60_000))
        .unwrap();
    assert_eq!(running.controller().status(&id).unwrap().runs.placed(), 2);
    running.shutdown().await.unwrap();
    let runs = root.load_runs(&name, &id).unwrap();
    assert!(runs.iter().all(|r| r.state == RunState::Killed));

    let running = boot(&root, &name).await;
    let s = running.controller().status(&id).unwrap();
    assert_eq!(s.state, ExperimentState::Active);
    assert_eq!(s.runs.killed, 2);
    assert_eq!(s.runs.live(), 2);
    // fresh suggestions, not repeats of the interrupted ones
    assert_eq!(s.run_table[2].index, 2);
    running.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn second_controller_for_a_cluster_is_refused() {
    let (_tmp, root) = home(FAST_SETTINGS);
    let name = gpu_cluster(&root, "p3.2xlarge", 1, 1);
    let running = boot(&root, &name).await;
    let err = start(root.clone(), &name).await.err().unwrap();
    assert!(
        err.to_string().contains("controller already running"),
        "{err}"
    );
    let endpoint = root
        .load_cluster(&name)
        .unwrap()
        .controller
        .unwrap()
        .endpoint;
    assert_eq!(endpoint, running.endpoint().to_string());
    running.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn autoscaler_grows_for_queued_work_and_shrinks_when_idle() {
    let (_tmp, root) = home(FAST_SETTINGS);
    let name = gpu_cluster(&root, "p3.8xlarge", 0, 2);
    let running = boot(&root, &name).await;
    let ctl = running.controller().clone();
    let id = ctl.create_experiment(&synthetic(8, 2, 4, 100)).unwrap();
    let mut peak = 0;
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let nodes = ctl.cluster_status().pools[0].nodes.len();
        peak = peak.max(nodes);
        let s = ctl.status(&id).unwrap();
        if s.state == ExperimentState::Completed && nodes == 0 {
            break;
        }
        assert!(Instant::now() < deadline, "nodes {nodes}, {:?}", s.runs);
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(peak, 2);
    running.shutdown().await.unwrap();
}
