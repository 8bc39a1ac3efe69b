//! Run manifests, model directories and all-or-nothing output directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use steer_core::dataset::sha256_hex;
use steer_nn::Network;

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const CURVE_FILE: &str = "curve.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// Input name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to content hash.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub wall_ms: u64,
    #[serde(default)]
    pub details: serde_json::Value,
}

/// Collects a manifest while a stage runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(stage: &str, config_hash: &str, seed: u64) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        ManifestBuilder {
            manifest: RunManifest {
                stage: stage.into(),
                config_hash: config_hash.into(),
                seed,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_unix,
                wall_ms: 0,
                details: serde_json::Value::Null,
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, name: &str, hash: impl Into<String>) -> &mut Self {
        self.manifest.inputs.insert(name.into(), hash.into());
        self
    }

    pub fn output(&mut self, name: &str, hash: impl Into<String>) -> &mut Self {
        self.manifest.outputs.insert(name.into(), hash.into());
        self
    }

    pub fn details(&mut self, details: serde_json::Value) -> &mut Self {
        self.manifest.details = details;
        self
    }

    pub fn finish(&mut self) -> RunManifest {
        self.manifest.wall_ms = self.started.elapsed().as_millis() as u64;
        self.manifest.clone()
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(value)?;
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes =
        fs::read(path).map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `model.ckpt` into `dir` and returns its content hash.
pub fn write_model(dir: &Path, net: &Network<f32>) -> Result<String, CliError> {
    let mut bytes = Vec::new();
    steer_nn::write_checkpoint(net, &mut bytes)?;
    let path = dir.join(MODEL_FILE);
    fs::write(&path, &bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    Ok(sha256_hex(&bytes))
}

/// A checkpoint loaded from a model directory (or a bare checkpoint file).
pub struct LoadedModel {
    pub net: Network<f32>,
    pub hash: String,
    pub manifest: Option<RunManifest>,
}

pub fn load_model(path: &Path) -> Result<LoadedModel, CliError> {
    let (ckpt, manifest_path) = if path.is_dir() {
        (path.join(MODEL_FILE), Some(path.join(MANIFEST_FILE)))
    } else {
        (path.to_path_buf(), None)
    };
    let bytes = fs::read(&ckpt).map_err(|e| CliError::MissingInput(format!("model {}: {e}", ckpt.display())))?;
    let net = steer_nn::read_checkpoint(bytes.as_slice())?;
    let manifest = match manifest_path {
        Some(p) if p.is_file() => Some(read_json(&p)?),
        _ => None,
    };
    Ok(LoadedModel {
        net,
        hash: sha256_hex(&bytes),
        manifest,
    })
}

/// A sibling directory that becomes `target` only on `commit`; dropped
/// uncommitted, it is removed so an aborted stage leaves no outputs.
pub struct Staging {
    path: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self, CliError> {
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| CliError::io(format!("creating {}", parent.display()), e))?;
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("output path {} has no final component", target.display())))?;
        let path = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if path.exists() {
            fs::remove_dir_all(&path).map_err(|e| CliError::io(format!("clearing {}", path.display()), e))?;
        }
        fs::create_dir(&path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
        Ok(Staging {
            path,
            target: target.to_path_buf(),
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn commit(mut self) -> Result<PathBuf, CliError> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target)
                .map_err(|e| CliError::io(format!("replacing {}", self.target.display()), e))?;
        }
        fs::rename(&self.path, &self.target)
            .map_err(|e| CliError::io(format!("moving outputs to {}", self.target.display()), e))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.path);
        }
    }
}
