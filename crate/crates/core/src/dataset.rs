//! Demonstration and labeled datasets and their on-disk layout.
//!
//! A dataset directory holds three files:
//!
//! * `frames.bin`: magic `STEERDS1`, then `count`, `channels`, `height`,
//!   `width` as little-endian `u32`, then `count` observations of
//!   `channels * height * width` bytes each.
//! * `labels.txt`: one integer per line (action index or `1`/`-1`).
//! * `manifest.json`: counts, provenance and content hashes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::render::{Observation, OBS_CHANNELS};
use crate::world::Action;
use crate::{CoreError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"STEERDS1";
const FRAMES_FILE: &str = "frames.bin";
const LABELS_FILE: &str = "labels.txt";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_bool(positive: bool) -> Label {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn value(self) -> f32 {
        match self {
            Label::Negative => -1.0,
            Label::Positive => 1.0,
        }
    }

    pub fn from_value(v: i64) -> Option<Label> {
        match v {
            1 => Some(Label::Positive),
            -1 => Some(Label::Negative),
            _ => None,
        }
    }
}

/// A per-record training target with a one-integer text encoding.
pub trait Target: Copy + PartialEq + std::fmt::Debug {
    const KIND: DatasetKind;
    fn encode(self) -> i64;
    fn decode(v: i64) -> Option<Self>;
}

impl Target for Action {
    const KIND: DatasetKind = DatasetKind::Demo;

    fn encode(self) -> i64 {
        self.index() as i64
    }

    fn decode(v: i64) -> Option<Self> {
        usize::try_from(v).ok().and_then(Action::from_index)
    }
}

impl Target for Label {
    const KIND: DatasetKind = DatasetKind::Labeled;

    fn encode(self) -> i64 {
        self.value() as i64
    }

    fn decode(v: i64) -> Option<Self> {
        Label::from_value(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Demo,
    Labeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Reward,
    Safety,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    pub fraction: f64,
    pub seed: u64,
}

/// Where a dataset came from and how it was produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// `oracle` or `human:<session id>`.
    pub provenance: String,
    pub track: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<Channel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_bias: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<Subsample>,
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(flatten)]
    pub meta: DatasetMeta,
    pub frames_sha256: String,
    pub labels_sha256: String,
    /// Hash of the two content hashes; identifies the dataset as a whole.
    pub dataset_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Target> {
    pub meta: DatasetMeta,
    pub observations: Vec<Observation>,
    pub targets: Vec<T>,
}

pub type DemoDataset = Dataset<Action>;
pub type LabeledDataset = Dataset<Label>;

impl<T: Target> Dataset<T> {
    pub fn new(meta: DatasetMeta, observations: Vec<Observation>, targets: Vec<T>) -> Result<Self> {
        if observations.len() != targets.len() {
            return Err(CoreError::Dataset(format!(
                "{} observations but {} targets",
                observations.len(),
                targets.len()
            )));
        }
        if let Some(first) = observations.first() {
            if observations.iter().any(|o| o.shape() != first.shape()) {
                return Err(CoreError::Dataset("observations differ in shape".into()));
            }
        }
        Ok(Dataset {
            meta,
            observations,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn obs_shape(&self) -> Option<[usize; 3]> {
        self.observations.first().map(Observation::shape)
    }

    /// Records at `indices`, in that order, with the same metadata.
    pub fn select(&self, indices: &[usize]) -> Self {
        Dataset {
            meta: self.meta.clone(),
            observations: indices.iter().map(|&i| self.observations[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    fn encode_frames(&self) -> Vec<u8> {
        let [c, h, w] = self.obs_shape().unwrap_or([OBS_CHANNELS, 0, 0]);
        let mut buf = Vec::with_capacity(24 + self.len() * c * h * w);
        buf.extend_from_slice(DATASET_MAGIC);
        for v in [self.len(), c, h, w] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for o in &self.observations {
            buf.extend_from_slice(&o.data);
        }
        buf
    }

    fn encode_labels(&self) -> Vec<u8> {
        let mut text = String::with_capacity(3 * self.len());
        for t in &self.targets {
            text.push_str(&t.encode().to_string());
            text.push('\n');
        }
        text.into_bytes()
    }

    pub fn manifest(&self) -> DatasetManifest {
        let frames = sha256_hex(&self.encode_frames());
        let labels = sha256_hex(&self.encode_labels());
        self.manifest_with(frames, labels)
    }

    fn manifest_with(&self, frames_sha256: String, labels_sha256: String) -> DatasetManifest {
        let [channels, height, width] = self.obs_shape().unwrap_or([OBS_CHANNELS, 0, 0]);
        DatasetManifest {
            kind: T::KIND,
            count: self.len(),
            channels,
            height,
            width,
            meta: self.meta.clone(),
            dataset_sha256: sha256_hex(format!("{frames_sha256}{labels_sha256}").as_bytes()),
            frames_sha256,
            labels_sha256,
        }
    }

    /// Writes the dataset into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        if self.is_empty() {
            return Err(CoreError::Dataset("refusing to write an empty dataset".into()));
        }
        fs::create_dir_all(dir).map_err(|e| CoreError::io(format!("creating {}", dir.display()), e))?;
        let frames = self.encode_frames();
        let labels = self.encode_labels();
        let manifest = self.manifest_with(sha256_hex(&frames), sha256_hex(&labels));
        write_file(&dir.join(FRAMES_FILE), &frames)?;
        write_file(&dir.join(LABELS_FILE), &labels)?;
        write_file(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.kind != T::KIND {
            return Err(CoreError::Dataset(format!(
                "{} holds a {:?} dataset, expected {:?}",
                dir.display(),
                manifest.kind,
                T::KIND
            )));
        }
        let frames = read_file(&dir.join(FRAMES_FILE))?;
        let labels = read_file(&dir.join(LABELS_FILE))?;
        if sha256_hex(&frames) != manifest.frames_sha256 || sha256_hex(&labels) != manifest.labels_sha256 {
            return Err(CoreError::Dataset(format!("{}: content hash mismatch", dir.display())));
        }
        let observations = decode_frames(&frames)?;
        let targets = std::str::from_utf8(&labels)
            .map_err(|_| CoreError::Dataset("labels file is not UTF-8".into()))?
            .lines()
            .enumerate()
            .map(|(i, line)| {
                line.trim()
                    .parse::<i64>()
                    .ok()
                    .and_then(T::decode)
                    .ok_or_else(|| CoreError::Dataset(format!("labels line {}: invalid value `{line}`", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if observations.len() != manifest.count || targets.len() != manifest.count {
            return Err(CoreError::Dataset(format!(
                "manifest count {} but {} frames and {} labels",
                manifest.count,
                observations.len(),
                targets.len()
            )));
        }
        Dataset::new(manifest.meta, observations, targets)
    }
}

impl LabeledDataset {
    pub fn positive_fraction(&self) -> f64 {
        let pos = self.targets.iter().filter(|&&l| l == Label::Positive).count();
        pos as f64 / self.len().max(1) as f64
    }

    pub fn has_both_classes(&self) -> bool {
        let pos = self.targets.contains(&Label::Positive);
        let neg = self.targets.contains(&Label::Negative);
        pos && neg
    }
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = read_file(&dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_slice(&text)?)
}

fn decode_frames(bytes: &[u8]) -> Result<Vec<Observation>> {
    if bytes.len() < 24 || &bytes[..8] != DATASET_MAGIC {
        return Err(CoreError::Dataset("frames file lacks the STEERDS1 header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (count, c, h, w) = (dim(0), dim(1), dim(2), dim(3));
    if c != OBS_CHANNELS {
        return Err(CoreError::Dataset(format!("frames carry {c} channels, expected {OBS_CHANNELS}")));
    }
    let per = c * h * w;
    let payload = &bytes[24..];
    if payload.len() != count * per {
        return Err(CoreError::Dataset(format!(
            "frames payload is {} bytes, header implies {}",
            payload.len(),
            count * per
        )));
    }
    Ok(payload
        .chunks_exact(per.max(1))
        .take(count)
        .map(|chunk| Observation::new(h, w, chunk.to_vec()))
        .collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CoreError::io(format!("creating {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    out.write_all(bytes)
        .and_then(|_| out.flush())
        .map_err(|e| CoreError::io(format!("writing {}", path.display()), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CoreError::io(format!("reading {}", path.display()), e))
}
