use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Record of one command invocation: enough to rerun it and to find what
/// it produced. Timestamps are seconds since the Unix epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Hash of the store the command read (prepare: its output).
    pub dataset_hash: Option<String>,
    /// Hash of the raw input store, for `prepare`.
    pub input_hash: Option<String>,
    pub artifacts: Vec<PathBuf>,
    pub metrics: BTreeMap<String, f64>,
    pub started_at: f64,
    pub finished_at: Option<f64>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, argv: Vec<String>) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            argv,
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            dataset_hash: None,
            input_hash: None,
            artifacts: Vec::new(),
            metrics: BTreeMap::new(),
            started_at: now(),
            finished_at: None,
        }
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T) {
        self.config = serde_json::to_value(config).expect("config serializes");
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(now());
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("manifest serializes")
    }
}
