//! Helpers shared by the CLI integration tests: a throwaway `ORCHESTRATE_HOME` and a way to
//! run the built binary against it.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use tempfile::TempDir;

pub const BIN: &str = env!("CARGO_BIN_EXE_orchestrate");

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub struct Home {
    pub dir: TempDir,
}

impl Home {
    pub fn new(settings: &str) -> Home {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("settings.yaml"), settings).unwrap();
        Home { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    /// The toy-grid experiment pointing at the fixture model script.
    pub fn experiment(&self) -> PathBuf {
        let text = std::fs::read_to_string(fixture("experiment.yml")).unwrap();
        let script = fixture("model.sh");
        self.write(
            "experiment.yml",
            &text.replace("MODEL_SCRIPT", script.to_str().unwrap()),
        )
    }

    pub fn cmd(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .env("ORCHESTRATE_HOME", self.path())
            .env_remove("ORCHESTRATE_LOG")
            .output()
            .unwrap()
    }

    /// Runs a command that must succeed and returns its stdout.
    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.cmd(args);
        assert!(
            out.status.success(),
            "orchestrate {args:?} exited {:?}\nstdout: {}\nstderr: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// Runs a command that must fail with `code` and returns its stderr.
    pub fn fails(&self, code: i32, args: &[&str]) -> String {
        let out = self.cmd(args);
        let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
        assert_eq!(
            out.status.code(),
            Some(code),
            "orchestrate {args:?}: {stderr}"
        );
        stderr
    }

    pub fn cluster(&self, name: &str) -> serde_json::Value {
        let p = self.path().join("clusters").join(name).join("cluster.json");
        serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
    }

    /// Base URL of the cluster's running controller.
    pub fn endpoint(&self, name: &str) -> String {
        let c = self.cluster(name);
        format!(
            "http://{}",
            c["controller"]["endpoint"]
                .as_str()
                .expect("controller running")
        )
    }

    pub fn wait_until(&self, what: &str, timeout: Duration, mut done: impl FnMut() -> bool) {
        let start = Instant::now();
        while !done() {
            assert!(start.elapsed() < timeout, "timed out waiting for {what}");
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Home {
    fn drop(&mut self) {
        let Ok(entries) = std::fs::read_dir(self.path().join("clusters")) else {
            return;
        };
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            let _ = self.cmd(&["controller", "stop", "-n", &name]);
        }
    }
}

/// Replaces the experiment id, run durations and GPU slot numbers, which vary between
/// executions, so output can be compared with a golden file.
pub fn normalize(text: &str, id: &str) -> String {
    let mut out = String::new();
    let mut mask: Option<(usize, usize)> = None;
    for line in text.replace(id, "<ID>").lines() {
        if line.starts_with("RUN ") {
            let start = line.find("GPUS").unwrap();
            let end = line.find("DURATION").unwrap() + "DURATION".len();
            mask = Some((start, end));
            out.push_str(line);
        } else if let (Some((s, e)), true) = (mask, line.starts_with('r')) {
            out.push_str(&line[..s]);
            out.push_str(&format!("{:<w$}", "*", w = e - s));
            out.push_str(&line[e..]);
        } else {
            mask = None;
            out.push_str(line);
        }
        out.push('\n');
    }
    out
}

/// Log output grouped by run and stream, keeping the order within each group: runs execute
/// concurrently and stdout and stderr are separate pipes, so only that order is fixed.
pub fn grouped_logs(text: &str) -> String {
    let mut lines: Vec<&str> = text.lines().collect();
    lines.sort_by_key(|l| l.split('|').next().unwrap_or("").to_string());
    lines.iter().map(|l| format!("{l}\n")).collect()
}
