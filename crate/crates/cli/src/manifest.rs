use std::collections::BTreeMap;
use std::path::Path;

use qrw_core::datasetgen::DatasetStats;
use qrw_core::jsonl;
use serde::{Deserialize, Serialize};

use crate::StageError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub seconds: f64,
    /// Output path (relative to the run directory) → content hash.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_hash: String,
    /// Input path → content hash, for every file a stage read.
    pub inputs: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
    pub dataset_stats: Option<DatasetStats>,
}

impl RunManifest {
    /// Loads the manifest at `path`; starts fresh when it is absent or was
    /// written under a different configuration.
    pub fn load_or_new(path: &Path, config_hash: &str) -> Result<Self, StageError> {
        if path.exists() {
            let text = std::fs::read_to_string(path)
                .map_err(|e| StageError::runtime(format!("{}: {e}", path.display())))?;
            let m: RunManifest = serde_json::from_str(&text)
                .map_err(|e| StageError::runtime(format!("{}: {e}", path.display())))?;
            if m.config_hash == config_hash {
                return Ok(m);
            }
        }
        Ok(RunManifest {
            config_hash: config_hash.to_string(),
            ..Default::default()
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), StageError> {
        let mut body = serde_json::to_string_pretty(self).expect("manifest serializes");
        body.push('\n');
        jsonl::write_atomic(path, body.as_bytes()).map_err(StageError::from)
    }

    /// The manifest with every timing zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut m = self.clone();
        for s in m.stages.values_mut() {
            s.seconds = 0.0;
        }
        m
    }
}
