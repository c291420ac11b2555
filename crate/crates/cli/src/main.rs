//! `orchestrate`: run hyperparameter-tuning experiments on simulated clusters.
//!
//! Exit status: 0 on success, 1 when the request itself is at fault (bad config, unknown
//! id, quota), 2 on internal or environment failures.

mod client;
mod render;

use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use orchestrate_core::controller::{self, stored_status, ExperimentConfig, StatusReport};
use orchestrate_core::ids::ExperimentId;
use orchestrate_core::provider::{self, Catalog, ClusterConfig};
use orchestrate_core::settings::Settings;
use orchestrate_core::store::StateRoot;

use client::Api;

/// A failure caused by the user's request; exits with status 1.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(message: impl Into<String>) -> anyhow::Error {
    UserError(message.into()).into()
}

#[derive(Parser)]
#[command(
    name = "orchestrate",
    version,
    about = "Parallel hyperparameter tuning on simulated clusters"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create, inspect and destroy clusters.
    #[command(subcommand)]
    Cluster(ClusterCmd),
    /// Start an experiment from a configuration file and print its id.
    Run {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
        /// Cluster to run on; defaults to `cluster_name` in the file.
        #[arg(long)]
        cluster: Option<String>,
        /// Block until the experiment finishes.
        #[arg(long)]
        wait: bool,
    },
    /// Show an experiment's progress and runs.
    Status { experiment_id: String },
    /// Print an experiment's model output.
    Logs {
        /// Keep streaming until the experiment finishes.
        #[arg(long)]
        follow: bool,
        experiment_id: String,
    },
    /// Stop an experiment, killing its runs. Its results are kept.
    Delete { experiment_id: String },
    /// Run or stop a cluster's controller daemon.
    #[command(subcommand)]
    Controller(ControllerCmd),
}

#[derive(Subcommand)]
enum ClusterCmd {
    Create {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
    Destroy {
        #[arg(short = 'n', long = "name")]
        name: String,
    },
    Status {
        #[arg(short = 'n', long = "name")]
        name: String,
    },
}

#[derive(Subcommand)]
enum ControllerCmd {
    /// Serve a cluster in the foreground until SIGTERM or SIGINT.
    Serve {
        #[arg(short = 'n', long = "name")]
        name: String,
    },
    Stop {
        #[arg(short = 'n', long = "name")]
        name: String,
    },
}

fn read_file(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).map_err(|e| user(format!("cannot read {}: {e}", path.display())))
}

fn out(text: &str) -> anyhow::Result<()> {
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(text.as_bytes())?;
    stdout.flush()?;
    Ok(())
}

fn cluster_create(root: &StateRoot, file: &Path) -> anyhow::Result<()> {
    let config = ClusterConfig::from_yaml(&read_file(file)?)?;
    let settings = Settings::load(root.path())?;
    let catalog = Catalog::load(root.path())?;
    let cluster = provider::create_cluster(root, &catalog, settings.cluster_quota, &config)?;
    out(&render::cluster_created(&cluster))
}

fn cluster_destroy(root: &StateRoot, name: &str) -> anyhow::Result<()> {
    let settings = Settings::load(root.path())?;
    let report = provider::destroy_cluster(root, name, settings.kill_grace())?;
    out(&render::cluster_destroyed(name, &report))
}

fn cluster_status(root: &StateRoot, name: &str) -> anyhow::Result<()> {
    let report = match Api::reachable(root, name) {
        Some(api) => api.cluster_status()?,
        None => controller::ClusterStatusReport::build(&root.load_cluster(name)?, false),
    };
    out(&render::cluster_status(&report))
}

fn pick_cluster(
    root: &StateRoot,
    flag: Option<String>,
    config: &ExperimentConfig,
) -> anyhow::Result<String> {
    if let (Some(flag), Some(file)) = (&flag, &config.cluster_name) {
        if flag != file {
            return Err(user(format!(
                "--cluster {flag} conflicts with cluster_name {file} in the configuration"
            )));
        }
    }
    let name = match flag.or_else(|| config.cluster_name.clone()) {
        Some(name) => name,
        None => match root.list_clusters()?.as_slice() {
            [only] => only.clone(),
            [] => return Err(user("no such cluster: no clusters exist")),
            _ => {
                return Err(user(
                    "several clusters exist; pass --cluster or set cluster_name",
                ))
            }
        },
    };
    if !root.cluster_exists(&name) {
        return Err(user(format!("no such cluster: {name}")));
    }
    Ok(name)
}

fn run(root: &StateRoot, file: &Path, cluster: Option<String>, wait: bool) -> anyhow::Result<()> {
    let mut config = ExperimentConfig::from_yaml(&read_file(file)?)?;
    // validate locally for early, well-located errors; the controller validates again
    config.validate(&Settings::load(root.path())?)?;
    let name = pick_cluster(root, cluster, &config)?;
    config.cluster_name = Some(name.clone());
    let api = Api::ensure(root, &name)?;
    let id = api.create(&config)?;
    out(&format!("{id}\n"))?;
    if wait {
        loop {
            let s = api.status(&id)?;
            if s.state.is_terminal() && s.runs.live() == 0 {
                break;
            }
            std::thread::sleep(Duration::from_millis(200));
        }
    }
    Ok(())
}

fn experiment_cluster(root: &StateRoot, id: &ExperimentId) -> anyhow::Result<String> {
    Ok(root.load_experiment(id)?.meta.cluster_name)
}

fn status_report(root: &StateRoot, id: &ExperimentId) -> anyhow::Result<StatusReport> {
    let cluster = experiment_cluster(root, id)?;
    match Api::reachable(root, &cluster) {
        Some(api) => api.status(id),
        None => Ok(stored_status(root, id)?),
    }
}

fn logs(root: &StateRoot, id: &ExperimentId, follow: bool) -> anyhow::Result<()> {
    let cluster = experiment_cluster(root, id)?;
    if !root.cluster_exists(&cluster) {
        return Err(user(controller::api::LOGS_UNAVAILABLE));
    }
    let color = std::io::stdout().is_terminal();
    let mut stdout = std::io::stdout().lock();
    let print = |r: orchestrate_core::store::LogRecord| -> anyhow::Result<()> {
        writeln!(stdout, "{}", render::log_line(&r, color))?;
        stdout.flush()?;
        Ok(())
    };
    match Api::reachable(root, &cluster) {
        Some(api) => api.logs(id, follow, print),
        None => root
            .read_logs(&cluster, id)?
            .into_iter()
            .try_for_each(print),
    }
}

fn delete(root: &StateRoot, id: &ExperimentId) -> anyhow::Result<()> {
    let cluster = experiment_cluster(root, id)?;
    let killed = match Api::reachable(root, &cluster) {
        Some(api) => api.stop(id)?.killed,
        None => {
            let mut record = root.load_experiment(id)?;
            root.mark_deleted(&mut record, chrono_now())?;
            0
        }
    };
    out(&format!("killed {killed} runs\n"))
}

fn chrono_now() -> orchestrate_core::store::Timestamp {
    orchestrate_core::store::Timestamp::from(std::time::SystemTime::now())
}

fn controller_serve(root: StateRoot, name: &str) -> anyhow::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")?;
    runtime.block_on(async {
        let signal = async {
            use tokio::signal::unix::{signal, SignalKind};
            let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
            let mut int = signal(SignalKind::interrupt()).expect("SIGINT handler");
            tokio::select! {
                _ = term.recv() => {}
                _ = int.recv() => {}
            }
        };
        controller::serve(root, name, signal).await
    })?;
    Ok(())
}

fn controller_stop(root: &StateRoot, name: &str) -> anyhow::Result<()> {
    let cluster = root.load_cluster(name)?;
    let settings = Settings::load(root.path())?;
    match cluster.controller {
        Some(c) => {
            provider::stop_controller_process(c.pid, settings.kill_grace())?;
            out(&format!("controller for {name} stopped\n"))
        }
        None => out(&format!("no controller running for {name}\n")),
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let root = StateRoot::from_env()?;
    match cli.command {
        Cmd::Cluster(ClusterCmd::Create { file }) => cluster_create(&root, &file),
        Cmd::Cluster(ClusterCmd::Destroy { name }) => cluster_destroy(&root, &name),
        Cmd::Cluster(ClusterCmd::Status { name }) => cluster_status(&root, &name),
        Cmd::Run {
            file,
            cluster,
            wait,
        } => run(&root, &file, cluster, wait),
        Cmd::Status { experiment_id } => out(&render::status(&status_report(
            &root,
            &ExperimentId(experiment_id),
        )?)),
        Cmd::Logs {
            follow,
            experiment_id,
        } => logs(&root, &ExperimentId(experiment_id), follow),
        Cmd::Delete { experiment_id } => delete(&root, &ExperimentId(experiment_id)),
        Cmd::Controller(ControllerCmd::Serve { name }) => controller_serve(root, &name),
        Cmd::Controller(ControllerCmd::Stop { name }) => controller_stop(&root, &name),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let user_error = e.chain().any(|cause| {
        cause.downcast_ref::<UserError>().is_some()
            || cause
                .downcast_ref::<orchestrate_core::Error>()
                .is_some_and(orchestrate_core::Error::is_user_error)
    });
    if user_error {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let default_level = match cli.command {
        Cmd::Controller(ControllerCmd::Serve { .. }) => "info",
        _ => "warn",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("ORCHESTRATE_LOG")
                .unwrap_or_else(|_| default_level.into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
