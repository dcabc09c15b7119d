use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::schema::Schema;
use super::synthetic::SyntheticKind;
use crate::error::{Error, Result};

/// Sidecar describing how a CSV was produced, so a run can be replayed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: Schema,
    pub rows: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    /// Files written alongside, relative to the manifest.
    #[serde(default)]
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: SyntheticKind,
    pub noise: f64,
}

impl DatasetManifest {
    /// `data.csv` → `data.manifest.toml`.
    pub fn path_for(csv: &Path) -> PathBuf {
        csv.with_extension("manifest.toml")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }
}
