//! Run directories and their `run.json` record.

use std::path::{Path, PathBuf};
use std::time::Instant;

use augdiff::config::ExperimentConfig;
use chrono::{DateTime, Utc};
use serde::Serialize;

use crate::error::CliError;

pub const SUBDIRS: [&str; 5] = ["weights", "adapters", "synth", "reports", "logs"];

pub struct RunDir {
    pub root: PathBuf,
    command: String,
    args: Vec<String>,
    digest: String,
    seed: u64,
    started: DateTime<Utc>,
    clock: Instant,
    outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    args: &'a [String],
    config_digest: &'a str,
    seed: u64,
    started: String,
    wall_time_s: f64,
    version: &'static str,
    outputs: Vec<String>,
}

impl RunDir {
    /// Creates `<out>/<UTC timestamp>-<first 12 hex of the config digest>`
    /// with the fixed subdirectories and the resolved `config.toml`.
    pub fn create(out: &Path, command: &str, cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let started = Utc::now();
        let digest = cfg.digest()?;
        let stem = format!("{}-{}", started.format("%Y%m%dT%H%M%SZ"), &digest[..12]);
        let mut root = out.join(&stem);
        let mut n = 1;
        while root.exists() {
            n += 1;
            root = out.join(format!("{stem}-{n}"));
        }
        for sub in SUBDIRS {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        }
        let config = root.join("config.toml");
        std::fs::write(&config, cfg.to_toml()?).map_err(|e| CliError::io(&config, e))?;
        log::info!("run directory {}", root.display());
        Ok(Self {
            root,
            command: command.to_owned(),
            args: std::env::args().skip(1).collect(),
            digest,
            seed: cfg.seed,
            started,
            clock: Instant::now(),
            outputs: Vec::new(),
        })
    }

    pub fn sub(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Records `path` as an output of this run.
    pub fn output(&mut self, path: PathBuf) -> PathBuf {
        self.outputs.push(path.clone());
        path
    }

    pub fn finish(self) -> Result<PathBuf, CliError> {
        let record = RunRecord {
            command: &self.command,
            args: &self.args,
            config_digest: &self.digest,
            seed: self.seed,
            started: self.started.to_rfc3339(),
            wall_time_s: self.clock.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION"),
            outputs: self
                .outputs
                .iter()
                .map(|p| p.strip_prefix(&self.root).unwrap_or(p).display().to_string())
                .collect(),
        };
        let path = self.root.join("run.json");
        let text = serde_json::to_string_pretty(&record).map_err(augdiff::Error::from)?;
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(self.root)
    }
}
