//! Run manifests: written at start, finalized with wall-clock on completion,
//! alongside a config snapshot sufficient to re-run the command.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cyclevos::config::Config;

pub struct RunManifest {
    dir: PathBuf,
    command_line: String,
    seed: u64,
    started: Instant,
    outputs: Vec<String>,
}

fn git_stamp() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

impl RunManifest {
    /// Create the run directory, write the config snapshot, and record the
    /// manifest in `started` state.
    pub fn start(dir: &Path, cfg: &Config) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let command_line = std::env::args().collect::<Vec<_>>().join(" ");
        std::fs::write(dir.join("config.txt"), cfg.snapshot())?;
        let m = Self {
            dir: dir.to_path_buf(),
            command_line,
            seed: cfg.train.seed,
            started: Instant::now(),
            outputs: Vec::new(),
        };
        m.write("started", None)?;
        Ok(m)
    }

    pub fn record_output(&mut self, path: impl AsRef<Path>) {
        self.outputs.push(path.as_ref().display().to_string());
    }

    pub fn finalize(&self) -> anyhow::Result<()> {
        self.write("completed", Some(self.started.elapsed().as_secs_f64()))
    }

    fn write(&self, status: &str, wall_clock: Option<f64>) -> anyhow::Result<()> {
        let mut text = String::new();
        text.push_str(&format!("status {status}\n"));
        text.push_str(&format!("command {}\n", self.command_line));
        text.push_str(&format!(
            "version {} (git {})\n",
            env!("CARGO_PKG_VERSION"),
            git_stamp()
        ));
        text.push_str(&format!("seed {}\n", self.seed));
        text.push_str("config config.txt\n");
        for out in &self.outputs {
            text.push_str(&format!("output {out}\n"));
        }
        if let Some(s) = wall_clock {
            text.push_str(&format!("wall_clock_s {s:.3}\n"));
        }
        std::fs::write(self.dir.join("manifest.txt"), text)?;
        Ok(())
    }
}
