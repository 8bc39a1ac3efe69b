//! Scripted demonstrator and instructors. They read ground truth through
//! probes; nothing here is ever handed to a learner except the datasets.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Channel, DatasetMeta, DemoDataset, Label, LabeledDataset};
use crate::env::{Env, EnvConfig};
use crate::render::Observation;
use crate::track::Track;
use crate::world::{Action, CarState, Probe, World};
use crate::{CoreError, Result};

/// Lane that earns positive reward labels (second from the right).
pub const TARGET_LANE: usize = 2;
pub const DEADBAND_M: f64 = 0.2;
/// Distance over which the heading error is projected when steering.
pub const LOOKAHEAD_M: f64 = 8.0;
const EXCURSION_BLOCK: usize = 50;

/// Steers toward lateral offset `target_d` using the heading-projected
/// offset `d + L sin(psi)`.
pub fn steer_toward(state: &CarState, target_d: f64) -> Action {
    let predicted = state.d + LOOKAHEAD_M * state.psi.sin();
    let error = target_d - predicted;
    if error > DEADBAND_M {
        Action::Left
    } else if error < -DEADBAND_M {
        Action::Right
    } else {
        Action::NoAction
    }
}

pub fn oracle_drive(world: &World, target_lane: usize) -> Action {
    steer_toward(world.state(), world.track().lane_center(target_lane))
}

pub fn oracle_reward_label(world: &World) -> Label {
    reward_label(&world.probe())
}

pub fn oracle_safety_label(world: &World) -> Label {
    safety_label(&world.probe())
}

pub fn reward_label(probe: &Probe) -> Label {
    Label::from_bool(probe.lane_index == Some(TARGET_LANE))
}

pub fn safety_label(probe: &Probe) -> Label {
    Label::from_bool(probe.on_road && probe.aligned)
}

pub fn label_for(channel: Channel, probe: &Probe) -> Label {
    match channel {
        Channel::Reward => reward_label(probe),
        Channel::Safety => safety_label(probe),
    }
}

/// Something that picks an action each tick. Scripted drivers may read the
/// world; learned policies implement this by looking only at the observation.
pub trait Driver {
    fn act(&mut self, world: &World, obs: &Observation) -> Action;
}

/// Oracle holding a fixed lateral offset.
#[derive(Clone, Copy, Debug)]
pub struct OffsetDriver(pub f64);

impl Driver for OffsetDriver {
    fn act(&mut self, world: &World, _obs: &Observation) -> Action {
        steer_toward(world.state(), self.0)
    }
}

/// Oracle keeping to one lane.
#[derive(Clone, Copy, Debug)]
pub struct LaneDriver(pub usize);

impl Driver for LaneDriver {
    fn act(&mut self, world: &World, _obs: &Observation) -> Action {
        oracle_drive(world, self.0)
    }
}

/// Oracle that visits every lane, switching to a uniformly drawn lane every
/// `dwell` ticks.
#[derive(Clone, Debug)]
pub struct LaneSweepDriver {
    dwell: usize,
    ticks: usize,
    lane: usize,
    rng: ChaCha8Rng,
}

impl LaneSweepDriver {
    pub fn new(dwell: usize, seed: u64) -> Self {
        LaneSweepDriver {
            dwell: dwell.max(1),
            ticks: 0,
            lane: 1,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Driver for LaneSweepDriver {
    fn act(&mut self, world: &World, _obs: &Observation) -> Action {
        if self.ticks.is_multiple_of(self.dwell) {
            self.lane = self.rng.gen_range(1..=world.track().lane_count());
        }
        self.ticks += 1;
        oracle_drive(world, self.lane)
    }
}

impl<F: FnMut(&World, &Observation) -> Action> Driver for F {
    fn act(&mut self, world: &World, obs: &Observation) -> Action {
        self(world, obs)
    }
}

fn stream_seed(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Where demonstration episodes begin. Each episode starts from a pose drawn
/// uniformly along the track with a bounded lateral offset and heading, so
/// the recording covers recoveries and not only the centered steady state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoStarts {
    /// Ticks per episode; 0 records one continuous run from the spawn point.
    pub episode_ticks: usize,
    pub max_offset_m: f64,
    pub max_heading: f64,
}

impl Default for DemoStarts {
    fn default() -> Self {
        DemoStarts {
            episode_ticks: 100,
            max_offset_m: 4.0,
            max_heading: 0.15,
        }
    }
}

impl DemoStarts {
    pub fn spawn_only() -> Self {
        DemoStarts {
            episode_ticks: 0,
            ..DemoStarts::default()
        }
    }
}

/// Records the road-center oracle closed loop with the default episode
/// starts. With probability `noise_rate` the executed (and recorded) action
/// is replaced by a uniform one.
pub fn record_demonstrations(
    track: Arc<Track>,
    env_config: &EnvConfig,
    ticks: usize,
    noise_rate: f64,
    seed: u64,
) -> Result<DemoDataset> {
    record_demonstrations_with(track, env_config, ticks, noise_rate, DemoStarts::default(), seed)
}

pub fn record_demonstrations_with(
    track: Arc<Track>,
    env_config: &EnvConfig,
    ticks: usize,
    noise_rate: f64,
    starts: DemoStarts,
    seed: u64,
) -> Result<DemoDataset> {
    if ticks == 0 {
        return Err(CoreError::Config("ticks must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(CoreError::Config(format!("noise_rate {noise_rate} outside [0, 1]")));
    }
    if !(starts.max_offset_m >= 0.0 && starts.max_offset_m < track.half_width())
        || !(0.0..std::f64::consts::FRAC_PI_2).contains(&starts.max_heading)
    {
        return Err(CoreError::Config(format!("invalid episode starts {starts:?}")));
    }
    let mut rng = stream_seed(seed, 1);
    let mut start_rng = stream_seed(seed, 3);
    let mut env = Env::new(track.clone(), env_config);
    let mut driver = OffsetDriver(0.0);
    let mut observations = Vec::with_capacity(ticks);
    let mut actions = Vec::with_capacity(ticks);
    for t in 0..ticks {
        if starts.episode_ticks > 0 && t % starts.episode_ticks == 0 {
            let s = start_rng.gen_range(0.0..track.length());
            let d = start_rng.gen_range(-starts.max_offset_m..=starts.max_offset_m);
            let psi = start_rng.gen_range(-starts.max_heading..=starts.max_heading);
            env.place(s, d, psi);
        }
        let mut action = driver.act(env.world(), env.observation());
        if rng.gen::<f64>() < noise_rate {
            action = Action::ALL[rng.gen_range(0..Action::COUNT)];
        }
        observations.push(env.observation().clone());
        actions.push(action);
        env.step(action);
    }
    let meta = DatasetMeta {
        provenance: "oracle".into(),
        track: track.name().to_string(),
        seed,
        noise_rate: Some(noise_rate),
        ..DatasetMeta::default()
    };
    DemoDataset::new(meta, observations, actions)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExcursionConfig {
    /// Probability that a 50-tick block starts with a forced excursion.
    pub edge_bias: f64,
    pub min_ticks: usize,
    pub max_ticks: usize,
}

impl Default for ExcursionConfig {
    fn default() -> Self {
        ExcursionConfig {
            edge_bias: 0.0,
            min_ticks: 6,
            max_ticks: 24,
        }
    }
}

impl ExcursionConfig {
    pub fn new(edge_bias: f64) -> Self {
        ExcursionConfig {
            edge_bias,
            ..ExcursionConfig::default()
        }
    }
}

/// A labeled recording plus the per-record ground truth it was labeled
/// from. The probes exist for tests and diagnostics only.
#[derive(Clone, Debug)]
pub struct LabelRecording {
    pub dataset: LabeledDataset,
    pub probes: Vec<Probe>,
}

/// Drives with `driver`, occasionally forcing steering toward a road edge,
/// and labels every reached state with the channel's oracle. A step that ends
/// in a restart contributes the state it reached before respawning.
pub fn record_labels(
    track: Arc<Track>,
    env_config: &EnvConfig,
    driver: &mut dyn Driver,
    ticks: usize,
    channel: Channel,
    excursions: ExcursionConfig,
    seed: u64,
) -> Result<LabelRecording> {
    if ticks == 0 {
        return Err(CoreError::Config("ticks must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&excursions.edge_bias) || excursions.min_ticks > excursions.max_ticks {
        return Err(CoreError::Config(format!("invalid excursion settings {excursions:?}")));
    }
    let mut rng = stream_seed(seed, 2);
    let mut env = Env::new(track.clone(), env_config);
    let mut observations = Vec::with_capacity(ticks);
    let mut labels = Vec::with_capacity(ticks);
    let mut probes = Vec::with_capacity(ticks);
    let mut forced: Option<(Action, usize)> = None;
    for t in 0..ticks {
        if t % EXCURSION_BLOCK == 0 && rng.gen::<f64>() < excursions.edge_bias {
            let side = if rng.gen::<bool>() { Action::Left } else { Action::Right };
            forced = Some((side, rng.gen_range(excursions.min_ticks..=excursions.max_ticks)));
        }
        let action = match forced.as_mut() {
            Some((side, left)) if *left > 0 => {
                *left -= 1;
                *side
            }
            _ => driver.act(env.world(), env.observation()),
        };
        let outcome = env.step(action);
        let reached = env.world().terminal_state().copied().unwrap_or(*env.world().state());
        let probe = crate::world::probe_state(env.world().track(), &reached);
        observations.push(outcome.next_obs);
        labels.push(label_for(channel, &probe));
        probes.push(probe);
    }
    let meta = DatasetMeta {
        provenance: "oracle".into(),
        track: track.name().to_string(),
        seed,
        channel: Some(channel),
        edge_bias: Some(excursions.edge_bias),
        ..DatasetMeta::default()
    };
    let dataset = LabeledDataset::new(meta, observations, labels)?;
    if !dataset.has_both_classes() {
        return Err(CoreError::Untrainable(format!(
            "all {} {channel:?} labels are {:?}; raise edge_bias or vary the driver",
            dataset.len(),
            dataset.targets[0]
        )));
    }
    Ok(LabelRecording { dataset, probes })
}
