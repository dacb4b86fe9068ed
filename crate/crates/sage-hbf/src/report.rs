//! Output directory bookkeeping: CSV tables tagged with the run identity and
//! a manifest listing every written file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::Result;

/// Columns appended to every CSV row.
#[derive(Debug, Clone, Serialize)]
pub struct Tag<'a> {
    pub seed: u64,
    pub config_hash: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    config_hash: &'a str,
    seeds: &'a [u64],
    data_seed: u64,
    config: &'a ExperimentConfig,
    files: &'a [FileEntry],
}

/// Writer for one subcommand's artifacts.
pub struct Output {
    pub dir: PathBuf,
    pub config_hash: String,
    files: Vec<FileEntry>,
}

impl Output {
    pub fn create(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), config_hash: cfg.hash(), files: Vec::new() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Records a file written under the output directory.
    pub fn register(&mut self, rel: &str) -> Result<()> {
        let bytes = fs::read(self.path(rel))?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Writes `rows`, each tagged with its seed and the configuration hash.
    pub fn csv<T: Serialize>(&mut self, rel: &str, rows: &[(u64, T)]) -> Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(&path)?;
        for (seed, row) in rows {
            w.serialize((row, Tag { seed: *seed, config_hash: &self.config_hash }))?;
        }
        w.flush()?;
        drop(w);
        self.register(rel)
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    /// Writes `manifest.json`; call last.
    pub fn finish(self, subcommand: &str, cfg: &ExperimentConfig) -> Result<Vec<FileEntry>> {
        let m = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            config_hash: &self.config_hash,
            seeds: &cfg.seeds,
            data_seed: cfg.data_seed,
            config: cfg,
            files: &self.files,
        };
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| crate::error::RunError::Output(e.to_string()))?;
        text.push('\n');
        fs::write(self.path("manifest.json"), text)?;
        Ok(self.files)
    }
}
