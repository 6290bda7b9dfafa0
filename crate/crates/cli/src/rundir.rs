use std::fs;
use std::path::{Path, PathBuf};

use iqfm::config::RunConfig;
use iqfm::{Error, Result};
use serde::Serialize;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const CHECKPOINTS: &str = "checkpoints";
pub const LOGS: &str = "logs";
pub const METRICS: &str = "metrics";
pub const ARTIFACTS: &str = "artifacts";

/// A run directory with its fixed layout.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Corpus(format!("{}: {e}", path.display()))
}

impl RunDir {
    pub fn create(root: PathBuf) -> Result<Self> {
        for sub in [CHECKPOINTS, LOGS, METRICS, ARTIFACTS] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        Ok(Self { root })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join(CHECKPOINTS).join(name)
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join(LOGS).join(name)
    }

    pub fn metric(&self, name: &str) -> PathBuf {
        self.root.join(METRICS).join(name)
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.root.join(ARTIFACTS).join(name)
    }

    pub fn write_snapshot(&self, cfg: &RunConfig) -> Result<()> {
        self.write(&self.root.join(CONFIG_SNAPSHOT), &cfg.snapshot()?)
    }

    pub fn write(&self, path: &Path, text: &str) -> Result<()> {
        fs::write(path, text).map_err(|e| io_err(path, e))
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
        self.write(path, &(text + "\n"))
    }
}
