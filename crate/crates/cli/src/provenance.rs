//! Every artifact records the command that produced it, the config hash and the seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use dualrl::checkpoint::Checkpoint;

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(command: String, config_hash: String, seed: u64) -> Self {
        Self { command, config_hash, seed, version: env!("CARGO_PKG_VERSION").to_string() }
    }

    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("command: {}", self.command),
            format!("config_hash: {}", self.config_hash),
            format!("seed: {}", self.seed),
            format!("version: {}", self.version),
        ]
    }

    pub fn stamp(&self, ck: &mut Checkpoint) {
        ck.set_meta("command", &self.command)
            .set_meta("config_hash", &self.config_hash)
            .set_meta("seed", self.seed)
            .set_meta("version", &self.version);
    }
}

/// Output directory plus the provenance to embed in everything written there.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub provenance: Provenance,
}

impl Artifacts {
    pub fn new(dir: &Path, provenance: Provenance) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), provenance })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// CSV with provenance as leading `#` comment lines.
    pub fn csv(&self, name: &str, body: &str) -> CliResult<PathBuf> {
        let mut text: String = self.provenance.lines().iter().map(|l| format!("# {l}\n")).collect();
        text.push_str(body);
        let p = self.path(name);
        fs::write(&p, text)?;
        Ok(p)
    }

    pub fn checkpoint(&self, name: &str, mut ck: Checkpoint) -> CliResult<PathBuf> {
        self.provenance.stamp(&mut ck);
        let p = self.path(name);
        ck.save(&p)?;
        Ok(p)
    }

    /// JSON report wrapped as `{"provenance": ..., "report": ...}`.
    pub fn json<T: Serialize>(&self, name: &str, report: &T) -> CliResult<PathBuf> {
        let doc = serde_json::json!({ "provenance": self.provenance, "report": report });
        let p = self.path(name);
        fs::write(&p, serde_json::to_string_pretty(&doc).map_err(|e| crate::error::CliError::Runtime(e.to_string()))? + "\n")?;
        Ok(p)
    }

    /// The resolved configuration, TOML with provenance comments.
    pub fn config(&self, name: &str, toml: &str) -> CliResult<PathBuf> {
        self.csv(name, toml)
    }
}
