//! Run manifests: one `manifest.json` per output directory recording what
//! produced the files next to it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use tempnorm_core::decode::GENERATOR;
use tempnorm_core::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration, defaults included.
    pub config: Value,
    pub seeds: Vec<u64>,
    pub generator: &'static str,
    pub version: &'static str,
    pub log_base: &'static str,
    pub started_at: String,
    pub finished_at: String,
    /// SHA-256 of every output file, keyed by file name.
    pub outputs: BTreeMap<String, String>,
}

/// Collects outputs of one command invocation and writes its manifest.
pub struct Run {
    command: &'static str,
    dir: PathBuf,
    started_at: String,
    outputs: Vec<PathBuf>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl Run {
    pub fn start(command: &'static str, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { command, dir: dir.to_path_buf(), started_at: now(), outputs: Vec::new() })
    }

    /// Path for output `name` inside the run directory; recorded for the
    /// manifest digest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let path = self.dir.join(name);
        self.outputs.push(path.clone());
        path
    }

    pub fn finish(self, config: &impl Serialize, seeds: Vec<u64>) -> Result<PathBuf> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            let name = p.file_name().expect("output has a file name").to_string_lossy().into_owned();
            outputs.insert(name, sha256_file(p)?);
        }
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: serde_json::to_value(config)?,
            seeds,
            generator: GENERATOR,
            version: env!("CARGO_PKG_VERSION"),
            log_base: "e",
            started_at: self.started_at,
            finished_at: now(),
            outputs,
        };
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }
}
