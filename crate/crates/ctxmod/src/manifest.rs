//! `manifest.json`: what produced an artifact directory.

use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::DataError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand plus a checksum of the config, so identical reruns share it.
    pub run_id: String,
    pub subcommand: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

/// Starts timing a run; [`ManifestClock::finish`] fills in the rest.
pub struct ManifestClock {
    started_unix: u64,
    t0: Instant,
}

impl ManifestClock {
    pub fn start() -> Self {
        Self {
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            t0: Instant::now(),
        }
    }

    pub fn finish(
        self,
        subcommand: &str,
        config: serde_json::Value,
        seeds: Vec<u64>,
        inputs: Vec<String>,
        outputs: Vec<String>,
    ) -> RunManifest {
        let text = serde_json::to_string(&config).unwrap_or_default();
        RunManifest {
            run_id: format!("{subcommand}-{:08x}", crc32fast::hash(text.as_bytes())),
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds,
            inputs,
            outputs,
            started_unix: self.started_unix,
            wall_clock_secs: self.t0.elapsed().as_secs_f64(),
        }
    }
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| DataError::Format(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| DataError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Format(format!("{}: {e}", path.display())))
    }
}
