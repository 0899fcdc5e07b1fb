//! Run manifest: the reproducibility audit trail. All wall-clock data lives
//! here so every other output file can be byte-identical across reruns.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    /// SHA-256 of the raw config file bytes, when the command took one.
    pub config_sha256: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub version: String,
    pub wall_time_seconds: f64,
    pub finished_at_unix: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(config_sha256: Option<String>, seeds: BTreeMap<String, u64>, wall: Duration) -> Self {
        RunManifest {
            command_line: std::env::args().collect(),
            config_sha256,
            seeds,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_seconds: wall.as_secs_f64(),
            finished_at_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("manifest serialization: {e}")))?;
        std::fs::write(dir.join("manifest.json"), text)
            .map_err(|e| CliError::Runtime(format!("writing manifest: {e}")))?;
        Ok(())
    }
}
