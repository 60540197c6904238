//! Run manifests: every command writes exactly one manifest alongside its
//! outputs, recording the command, configuration snapshot, seed, versions,
//! timestamps, and output paths with their schema versions.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use dcb_core::error::Result;

#[derive(Serialize)]
pub struct OutputEntry {
    pub path: String,
    pub schema: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub timestamp_unix: u64,
    pub config: serde_json::Value,
    pub outputs: Vec<OutputEntry>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            schema: "dcb-manifest/v1".into(),
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config,
            outputs: Vec::new(),
        }
    }

    pub fn add_output(&mut self, path: &Path, schema: &str) {
        self.outputs.push(OutputEntry {
            path: path.to_string_lossy().into_owned(),
            schema: schema.into(),
        });
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| dcb_core::DcbError::NumericalFailure { what: e.to_string() })?;
        std::fs::write(path, body)?;
        Ok(())
    }
}
