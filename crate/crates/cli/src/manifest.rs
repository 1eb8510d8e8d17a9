use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::Failure;

/// Everything needed to re-run a command, written next to its primary
/// output as `<output>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Fully resolved arguments, defaults included.
    pub args: serde_json::Value,
}

impl RunManifest {
    pub fn new<A: Serialize>(
        command: &str,
        seed: Option<u64>,
        inputs: &[&Path],
        outputs: &[&Path],
        args: &A,
    ) -> Result<Self, Failure> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            args: serde_json::to_value(args).map_err(|e| Failure::data("json", e.to_string()))?,
        })
    }

    pub fn path_for(output: &Path) -> PathBuf {
        suffixed(output, ".manifest.json")
    }

    /// Writes the manifest beside `primary`.
    pub fn write(&self, primary: &Path) -> Result<(), Failure> {
        let mut text = serde_json::to_vec_pretty(self).map_err(|e| Failure::data("json", e.to_string()))?;
        text.push(b'\n');
        std::fs::write(Self::path_for(primary), text).map_err(|e| Failure::data("io", e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure::data("io", format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Failure::data("json", format!("{}: {e}", path.display())))
    }
}

/// `path` with `suffix` appended to its file name.
pub fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}
