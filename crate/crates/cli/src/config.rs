//! The single pipeline configuration file and its hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steer_core::dataset::sha256_hex;
use steer_core::env::EnvConfig;
use steer_core::reward::ScalarInit;
use steer_core::rl::RLConfig;
use steer_core::safety::SafetyConfig;
use steer_core::teacher::{DemoStarts, Driver, ExcursionConfig, LaneDriver, LaneSweepDriver, OffsetDriver, TARGET_LANE};
use steer_core::train::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoStage {
    pub ticks: usize,
    pub noise_rate: f64,
    pub starts: DemoStarts,
}

impl Default for DemoStage {
    fn default() -> Self {
        DemoStage {
            ticks: 10_000,
            noise_rate: 0.05,
            starts: DemoStarts::default(),
        }
    }
}

/// Scripted driver used while recording instructor labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DriverSpec {
    /// Re-draws a lane every `dwell` ticks.
    LaneSweep { dwell: usize },
    Lane { lane: usize },
    Offset { d: f64 },
}

impl DriverSpec {
    pub fn build(self, seed: u64) -> Box<dyn Driver> {
        match self {
            DriverSpec::LaneSweep { dwell } => Box::new(LaneSweepDriver::new(dwell, seed)),
            DriverSpec::Lane { lane } => Box::new(LaneDriver(lane)),
            DriverSpec::Offset { d } => Box::new(OffsetDriver(d)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelStage {
    pub ticks: usize,
    pub driver: DriverSpec,
    pub excursions: ExcursionConfig,
}

impl LabelStage {
    pub fn reward_default() -> Self {
        LabelStage {
            ticks: 10_000,
            driver: DriverSpec::LaneSweep { dwell: 100 },
            excursions: ExcursionConfig::new(0.3),
        }
    }

    pub fn safety_default() -> Self {
        LabelStage {
            ticks: 10_000,
            driver: DriverSpec::Lane { lane: TARGET_LANE },
            excursions: ExcursionConfig::new(0.5),
        }
    }
}

impl Default for LabelStage {
    fn default() -> Self {
        LabelStage::reward_default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalarStage {
    pub train: TrainConfig,
    pub init: ScalarInit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyStage {
    pub train: TrainConfig,
    pub init: ScalarInit,
    pub gate: SafetyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Bundled track name or path to a track JSON file.
    pub track: String,
    pub env: EnvConfig,
    pub demo: DemoStage,
    pub reward_labels: LabelStage,
    pub safety_labels: LabelStage,
    pub imitation: TrainConfig,
    pub reward: ScalarStage,
    pub safety: SafetyStage,
    pub rl: RLConfig,
    pub evaluate_ticks: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            track: "county".into(),
            env: EnvConfig::default(),
            demo: DemoStage::default(),
            reward_labels: LabelStage::reward_default(),
            safety_labels: LabelStage::safety_default(),
            imitation: TrainConfig::default(),
            reward: ScalarStage::default(),
            safety: SafetyStage::default(),
            rl: RLConfig::default(),
            evaluate_ticks: 2000,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::MissingInput(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn primary_seed(&self) -> u64 {
        self.seeds.first().copied().unwrap_or(0)
    }

    /// Hash of the configuration with seeds and output location removed, so
    /// runs that differ only by seed share it.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.seeds.clear();
        canonical.output_dir = PathBuf::new();
        canonical.rl.seed = 0;
        for t in [&mut canonical.imitation, &mut canonical.reward.train, &mut canonical.safety.train] {
            t.seed = 0;
        }
        sha256_hex(&serde_json::to_vec(&canonical).expect("config serializes"))
    }
}
