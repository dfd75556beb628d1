//! Run directory layout and artifact writing.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use plateau_lab::ckpt_io::{self, write_atomic};
use plateau_lab::runconfig::RunConfig;
use plateau_lab::Checkpoint;
use serde::Serialize;

pub const SUBDIRS: [&str; 5] = ["checkpoints", "profiles", "reports", "logs", "data"];

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in SUBDIRS {
            std::fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn path(&self, sub: &str, file: &str) -> PathBuf {
        self.root.join(sub).join(file)
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.kv")
    }

    /// Folds `extra` into the stored config and rewrites it.
    pub fn record_config(&self, effective: &RunConfig) -> Result<()> {
        let prior = if self.config_path().exists() {
            RunConfig::load(&self.config_path())?
        } else {
            RunConfig::new()
        };
        let merged = prior.merged_with(effective);
        write_atomic(&self.config_path(), merged.to_string().as_bytes())?;
        Ok(())
    }

    pub fn write_text(&self, sub: &str, file: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(sub, file);
        write_atomic(&p, text.as_bytes())?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, sub: &str, file: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        let p = self.path(sub, file);
        write_atomic(&p, &bytes)?;
        Ok(p)
    }

    pub fn save_checkpoint(&self, file: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
        let p = self.path("checkpoints", file);
        ckpt_io::save(ckpt, &p)?;
        Ok(p)
    }
}
