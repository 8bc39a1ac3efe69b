//! Safety network, threshold gate and fallback takeover.

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::env::Env;
use crate::nets::{PolicyNet, SafetyNet};
use crate::render::Observation;
use crate::reward::train_scalar;
use crate::train::{TrainConfig, TrainingCurve};
use crate::world::StepEvents;
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    Agent,
    Safe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyConfig {
    pub threshold: f32,
    /// Consecutive safe verdicts needed before control returns.
    pub hysteresis_ticks: usize,
    /// Takeover length after which the car is forcibly respawned.
    pub max_ticks: usize,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        SafetyConfig {
            threshold: 0.0,
            hysteresis_ticks: 3,
            max_ticks: 300,
        }
    }
}

pub fn train_safety(
    train: &LabeledDataset,
    validation: &LabeledDataset,
    config: &TrainConfig,
    trunk_from: Option<&PolicyNet>,
) -> Result<(SafetyNet, TrainingCurve)> {
    train_scalar(train, validation, config, trunk_from)
}

#[derive(Clone, Debug)]
pub struct SafetyModule {
    pub net: SafetyNet,
    pub safe_policy: PolicyNet,
    pub config: SafetyConfig,
}

impl SafetyModule {
    pub fn new(net: SafetyNet, safe_policy: PolicyNet, config: SafetyConfig) -> Result<Self> {
        if !(config.threshold > -1.0 && config.threshold < 1.0) {
            return Err(CoreError::Config(format!(
                "threshold {} must lie strictly inside (-1, 1)",
                config.threshold
            )));
        }
        if net.obs_shape() != safe_policy.obs_shape() {
            return Err(CoreError::Config("safety net and safe policy disagree on input shape".into()));
        }
        Ok(SafetyModule {
            net,
            safe_policy,
            config,
        })
    }

    /// Agent control only when the score is strictly above the threshold.
    pub fn gate(&self, obs: &Observation) -> Result<Control> {
        Ok(gate_score(self.net.value(obs)?, self.config.threshold))
    }
}

pub fn gate_score(score: f32, threshold: f32) -> Control {
    if score > threshold {
        Control::Agent
    } else {
        Control::Safe
    }
}

/// Counts consecutive safe verdicts while the fallback policy drives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Takeover {
    pub ticks: usize,
    streak: usize,
}

impl Takeover {
    /// Records the gate verdict for the tick about to be driven by the
    /// fallback policy. Returns true when this is the last fallback tick.
    pub fn observe(&mut self, verdict: Control, hysteresis: usize) -> bool {
        self.ticks += 1;
        self.streak = match verdict {
            Control::Agent => self.streak + 1,
            Control::Safe => 0,
        };
        self.streak >= hysteresis
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TakeoverReport {
    pub ticks_used: usize,
    pub timed_out: bool,
    pub events: Vec<StepEvents>,
}

/// Lets the safe policy drive until the gate has approved the observed state
/// on `hysteresis_ticks` consecutive ticks, or respawns the car after
/// `max_ticks` with a timeout.
pub fn safe_takeover(module: &SafetyModule, env: &mut Env, max_ticks: usize) -> Result<TakeoverReport> {
    let mut takeover = Takeover::default();
    let mut report = TakeoverReport::default();
    loop {
        if takeover.ticks >= max_ticks {
            report.timed_out = true;
            report.events.push(env.force_restart());
            break;
        }
        let obs = env.observation().clone();
        let done = takeover.observe(module.gate(&obs)?, module.config.hysteresis_ticks);
        let action = module.safe_policy.act(&obs)?;
        report.events.push(env.step(action).events);
        if done {
            break;
        }
    }
    report.ticks_used = takeover.ticks;
    Ok(report)
}
