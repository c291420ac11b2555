//! Supervised local processes.

use std::path::PathBuf;
use std::process::{ExitStatus, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use tokio::io::BufReader;
use tokio::process::{Child, Command};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::ids::{ExperimentId, RunId};
use crate::optimizer::Assignment;
use crate::store::Stream;

use super::lines::{next_line, MAX_LINE_BYTES};
use super::{
    parse_observation, KillReason, LogSink, Outcome, ReportedMetric, RunSpec, ENV_ASSIGNED_GPUS,
    ENV_EXPERIMENT_ID, ENV_OBSERVATION_FILE, ENV_RUN_ID, ENV_SUGGESTION_FILE,
};

pub struct LaunchContext<'a> {
    pub experiment_id: &'a ExperimentId,
    pub run_id: &'a RunId,
    /// Per-run directory for the suggestion and observation files.
    pub scratch_dir: PathBuf,
    pub gpu_slots: &'a [u32],
    pub grace: Duration,
}

/// A started model process.
pub struct RunningProcess {
    child: Child,
    pgid: i32,
    readers: Vec<JoinHandle<()>>,
    observation_file: PathBuf,
    started: Instant,
    timeout: Option<Duration>,
    grace: Duration,
}

impl RunningProcess {
    pub fn pid(&self) -> u32 {
        self.pgid as u32
    }
}

pub fn gpu_env_value(slots: &[u32]) -> String {
    slots
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes the suggestion file and starts the model. A spawn failure comes back as a
/// failed [`Outcome`].
pub async fn launch(
    spec: &RunSpec,
    assignment: &Assignment,
    ctx: LaunchContext<'_>,
    sink: Arc<dyn LogSink>,
) -> Result<RunningProcess, Outcome> {
    let started = Instant::now();
    let spawn_error =
        |e: String| Outcome::failed(format!("spawn error: {e}"), None, started.elapsed());

    tokio::fs::create_dir_all(&ctx.scratch_dir)
        .await
        .map_err(|e| spawn_error(format!("{}: {e}", ctx.scratch_dir.display())))?;
    let suggestion_file = ctx.scratch_dir.join("suggestion.json");
    let observation_file = ctx.scratch_dir.join("observation.json");
    let body = serde_json::to_vec(assignment).map_err(|e| spawn_error(e.to_string()))?;
    tokio::fs::write(&suggestion_file, body)
        .await
        .map_err(|e| spawn_error(format!("{}: {e}", suggestion_file.display())))?;
    let _ = tokio::fs::remove_file(&observation_file).await;

    let mut cmd = Command::new(&spec.command[0]);
    cmd.args(&spec.command[1..])
        .envs(&spec.env)
        .env(ENV_EXPERIMENT_ID, ctx.experiment_id.as_str())
        .env(ENV_RUN_ID, ctx.run_id.as_str())
        .env(ENV_SUGGESTION_FILE, &suggestion_file)
        .env(ENV_OBSERVATION_FILE, &observation_file)
        .env(ENV_ASSIGNED_GPUS, gpu_env_value(ctx.gpu_slots))
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    if let Some(dir) = &spec.workdir {
        cmd.current_dir(dir);
    }
    let mut child = cmd.spawn().map_err(|e| spawn_error(e.to_string()))?;
    let pgid = child.id().expect("freshly spawned child has a pid") as i32;

    let mut readers = Vec::with_capacity(2);
    if let Some(out) = child.stdout.take() {
        readers.push(pump(BufReader::new(out), Stream::Stdout, sink.clone()));
    }
    if let Some(err) = child.stderr.take() {
        readers.push(pump(BufReader::new(err), Stream::Stderr, sink));
    }

    Ok(RunningProcess {
        child,
        pgid,
        readers,
        observation_file,
        started,
        timeout: spec.timeout(),
        grace: ctx.grace,
    })
}

fn pump<R>(mut reader: BufReader<R>, stream: Stream, sink: Arc<dyn LogSink>) -> JoinHandle<()>
where
    R: tokio::io::AsyncRead + Unpin + Send + 'static,
{
    tokio::spawn(async move {
        let mut seq = 0;
        while let Ok(Some(line)) = next_line(&mut reader, MAX_LINE_BYTES).await {
            sink.emit(stream, seq, line);
            seq += 1;
        }
    })
}

fn signal_group(pgid: i32, signal: libc::c_int) {
    // SAFETY: signals the process group we created for this run; ESRCH is harmless.
    unsafe {
        libc::killpg(pgid, signal);
    }
}

/// SIGTERM to the group, then SIGKILL once `grace` has passed.
async fn terminate(child: &mut Child, pgid: i32, grace: Duration) -> std::io::Result<ExitStatus> {
    signal_group(pgid, libc::SIGTERM);
    match tokio::time::timeout(grace, child.wait()).await {
        Ok(status) => status,
        Err(_) => {
            signal_group(pgid, libc::SIGKILL);
            child.wait().await
        }
    }
}

/// Waits for the process to finish, time out, or be killed, and turns the result into an
/// [`Outcome`]. All log output has been delivered to the sink when this returns.
pub async fn collect(mut proc: RunningProcess, kill: oneshot::Receiver<KillReason>) -> Outcome {
    enum End {
        Exited(std::io::Result<ExitStatus>),
        TimedOut,
        Killed(KillReason),
    }

    let kill = async {
        match kill.await {
            Ok(reason) => reason,
            Err(_) => std::future::pending().await,
        }
    };
    let deadline = async {
        match proc.timeout {
            Some(t) => tokio::time::sleep(t).await,
            None => std::future::pending().await,
        }
    };

    let end = tokio::select! {
        status = proc.child.wait() => End::Exited(status),
        _ = deadline => End::TimedOut,
        reason = kill => End::Killed(reason),
    };
    let end = match end {
        End::TimedOut | End::Killed(_) => {
            let _ = terminate(&mut proc.child, proc.pgid, proc.grace).await;
            end
        }
        exited => exited,
    };
    // sweep anything the model left behind in its group
    signal_group(proc.pgid, libc::SIGKILL);
    for reader in proc.readers.iter_mut() {
        if tokio::time::timeout(proc.grace.max(Duration::from_millis(100)), &mut *reader)
            .await
            .is_err()
        {
            reader.abort();
        }
    }
    let duration = proc.started.elapsed();

    let status = match end {
        End::TimedOut => return Outcome::killed("timeout", duration),
        End::Killed(reason) => return Outcome::killed(reason.as_str(), duration),
        End::Exited(Err(e)) => return Outcome::failed(format!("wait error: {e}"), None, duration),
        End::Exited(Ok(status)) => status,
    };
    let code = status.code();
    let reported = match tokio::fs::read(&proc.observation_file).await {
        Ok(body) => Some(parse_observation(&body)),
        Err(_) => None,
    };
    if let Some(Ok(ReportedMetric::Failed)) = reported {
        return Outcome::failed("model reported failure", code, duration);
    }
    match code {
        Some(0) => match reported {
            Some(Ok(ReportedMetric::Value(v))) => Outcome::succeeded(v, code, duration),
            Some(Err(reason)) => Outcome::failed(reason, code, duration),
            _ => Outcome::failed("missing observation", code, duration),
        },
        Some(c) => Outcome::failed(format!("exit code {c}"), code, duration),
        None => {
            use std::os::unix::process::ExitStatusExt;
            let signal = status.signal().unwrap_or(0);
            Outcome::failed(format!("terminated by signal {signal}"), None, duration)
        }
    }
}
