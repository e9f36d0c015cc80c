//! Run-directory management: manifests, input hashing, lock files, and
//! loading a trained model back from its run directory.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IrweError, Result};
use crate::model::{Checkpoint, StatsCache, TrainConfig};
use crate::train::{latest_checkpoint, TrainedModel};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

/// A hashed input file reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written atomically into every run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
    pub artifacts: Vec<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// SHA-256 of a file's contents, hex-encoded.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| IrweError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf).map_err(|e| IrweError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn input_record(path: &Path) -> Result<InputRecord> {
    Ok(InputRecord {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

/// Serialize JSON to `path` atomically (write temp file, then rename).
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let data = serde_json::to_vec_pretty(value)
        .map_err(|e| IrweError::Invalid(format!("manifest serialization failed: {e}")))?;
    std::fs::write(&tmp, data).map_err(|e| IrweError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| IrweError::io(path, e))
}

/// Exclusive advisory lock on a run directory, held for the process lifetime
/// of a command; released (file removed) on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock> {
        std::fs::create_dir_all(dir).map_err(|e| IrweError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(IrweError::Invalid(format!(
                    "run directory {} is locked by another process (stale? remove {})",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(IrweError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Write the training-config snapshot into a run directory.
pub fn save_config_snapshot(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| IrweError::Invalid(format!("config serialization failed: {e}")))?;
    let path = dir.join(CONFIG_SNAPSHOT);
    std::fs::write(&path, text).map_err(|e| IrweError::io(&path, e))
}

/// Reassemble a trained model from a run directory: config snapshot,
/// statistics cache, and the latest checkpoint.
pub fn load_model(dir: &Path) -> Result<TrainedModel> {
    let cfg = TrainConfig::load(&dir.join(CONFIG_SNAPSHOT))?;
    let cache = StatsCache::load(&dir.join("stats.bin"))?;
    let ck_path = latest_checkpoint(dir)?;
    let ck = Checkpoint::load(&ck_path)?;
    if ck.l != cfg.l || ck.d != cfg.d || ck.e != cfg.e || ck.seed != cfg.seed {
        return Err(IrweError::Invalid(format!(
            "checkpoint {} disagrees with the config snapshot",
            ck_path.display()
        )));
    }
    Ok(TrainedModel {
        config: cfg,
        params: ck.params,
        running: ck.running,
        cache,
        loss_history: vec![],
    })
}
