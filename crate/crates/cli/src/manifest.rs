use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use warpfactor_core::io::write_json;

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    /// sha256 of every input file, keyed by the flag that named it.
    pub input_hashes: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub engine: Option<String>,
    pub versions: BTreeMap<String, String>,
    pub wall_time_secs: f64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("warpfactor".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("warpfactor-core".to_string(), warpfactor_core::VERSION.to_string());
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: serde_json::Value::Null,
            input_hashes: BTreeMap::new(),
            seed: None,
            engine: None,
            versions,
            wall_time_secs: 0.0,
            status: "running".into(),
            error: None,
            started: Some(Instant::now()),
        }
    }

    pub fn hash_input(&mut self, flag: &str, path: &Path) -> std::io::Result<()> {
        let bytes = std::fs::read(path)?;
        self.input_hashes.insert(flag.to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    /// Stamps the outcome and writes `manifest.json` into `dir`.
    pub fn finish(&mut self, dir: &Path, outcome: &Result<(), String>) {
        self.wall_time_secs = self.started.map_or(0.0, |s| s.elapsed().as_secs_f64());
        match outcome {
            Ok(()) => self.status = "ok".into(),
            Err(e) => {
                self.status = "failed".into();
                self.error = Some(e.clone());
            }
        }
        if let Err(e) = std::fs::create_dir_all(dir).map_err(Into::into).and_then(|_| write_json(&dir.join("manifest.json"), self)) {
            log::error!("could not write manifest: {e}");
        }
    }
}
