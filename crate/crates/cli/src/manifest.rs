use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use airid::autograd::Checkpoint;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliResult, Context};

/// `<command>.manifest.json`, so commands sharing an output directory keep their own record.
pub fn manifest_file(command: &str) -> String {
    format!("{command}.manifest.json")
}

/// Record of one artifact-producing invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub revision: String,
    pub version: String,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    /// Hex SHA-256 of each checkpoint read or written, keyed like `inputs`/`outputs`.
    pub checkpoint_sha256: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn start(command: &str, config: &impl Serialize, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            config: serde_json::to_value(config).unwrap_or(Value::Null),
            seed,
            revision: env!("AIRID_GIT_REVISION").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            checkpoint_sha256: BTreeMap::new(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.to_path_buf());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), path.to_path_buf());
    }

    pub fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> CliResult<()> {
        self.checkpoint_sha256.insert(name.into(), ck.digest()?);
        Ok(())
    }

    pub fn finish(mut self, dir: &Path) -> CliResult<()> {
        self.finished_at = now();
        let path = dir.join(manifest_file(&self.command));
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        fs::write(&path, text + "\n").ctx(format!("writing {}", path.display()))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
