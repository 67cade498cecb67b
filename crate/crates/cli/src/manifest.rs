use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::commands::CliError;

/// Content id of a file the way git computes object ids:
/// `sha256("blob <len>\0" + bytes)`.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    let digest = h.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Everything needed to rerun a command.
pub struct RunManifest {
    pub command: &'static str,
    pub argv: Vec<String>,
    pub config: String,
    pub seeds: Map<String, Value>,
    pub started: f64,
    pub artifacts: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub extra: Map<String, Value>,
}

impl RunManifest {
    pub fn new(command: &'static str, config: String) -> Self {
        Self {
            command,
            argv: std::env::args().collect(),
            config,
            seeds: Map::new(),
            started: unix_now(),
            artifacts: Vec::new(),
            checkpoint: None,
            extra: Map::new(),
        }
    }

    pub fn seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.into(), json!(seed));
        self
    }

    /// Written next to `out` via a temporary file and a rename.
    pub fn write(&self, out: &Path) -> Result<PathBuf, CliError> {
        let checkpoint_hash = match &self.checkpoint {
            Some(p) => Some(git_blob_hash(&std::fs::read(p).map_err(|e| CliError::io(p, e))?)),
            None => None,
        };
        let mut doc = json!({
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seeds": self.seeds,
            "started_unix": self.started,
            "finished_unix": unix_now(),
            "artifacts": self.artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "checkpoint_hash": checkpoint_hash,
        });
        doc.as_object_mut().expect("object literal").extend(self.extra.clone());
        let path = manifest_path(out);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(&doc).expect("json values serialize") + "\n";
        std::fs::write(&tmp, text).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
