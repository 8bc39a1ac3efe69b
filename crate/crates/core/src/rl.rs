//! Double DQN with replay memory, imitation initialization, the frozen-trunk
//! policy-evaluation phase, optional safety gating and per-epoch metrics.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use steer_nn::{Adam, AdamConfig, Mode, Network, Tensor};

use crate::env::{Env, EnvConfig};
use crate::nets::{argmax, PolicyNet, QNet, RewardNet, OUTPUT_LAYER, TRUNK_LAYERS};
use crate::render::{batch_tensor, Observation};
use crate::safety::{Control, SafetyModule, Takeover};
use crate::track::Track;
use crate::world::{Action, StepEvents};
use crate::{CoreError, Result};

/// Half-width of the uniform range for the re-drawn output layer.
pub const IL_INIT_RANGE: f32 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Observation,
    pub a: usize,
    pub r: f32,
    pub s_next: Observation,
    pub terminal: bool,
}

/// Bounded FIFO of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            pushed: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total pushes since creation.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.pushed += 1;
    }

    /// Stored transitions from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `n` distinct transitions drawn uniformly (all of them if fewer).
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<&Transition> {
        let n = n.min(self.items.len());
        sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect()
    }
}

/// Per-transition targets: `r` when terminal, otherwise
/// `r + gamma * Q_target(s', argmax_a Q_online(s', a))`.
pub fn ddqn_targets(
    batch: &[&Transition],
    online: &Network<f32>,
    target: &Network<f32>,
    gamma: f32,
) -> Result<Vec<f32>> {
    if batch.is_empty() {
        return Err(CoreError::Config("ddqn_targets needs a non-empty batch".into()));
    }
    let live: Vec<&Observation> = batch.iter().filter(|t| !t.terminal).map(|t| &t.s_next).collect();
    let (q_online, q_target) = if live.is_empty() {
        (None, None)
    } else {
        let x = batch_tensor(&live);
        (Some(online.predict(&x)?), Some(target.predict(&x)?))
    };
    let mut row = 0;
    Ok(batch
        .iter()
        .map(|t| {
            if t.terminal {
                return t.r;
            }
            let (qo, qt) = (q_online.as_ref().expect("live rows"), q_target.as_ref().expect("live rows"));
            let a = argmax(qo.row(row));
            let y = t.r + gamma * qt.row(row)[a];
            row += 1;
            y
        })
        .collect())
}

/// Online and target networks with their optimizer.
#[derive(Clone, Debug)]
pub struct Ddqn {
    pub online: Network<f32>,
    pub target: Network<f32>,
    adam: Adam<f32>,
    pub gamma: f32,
    pub sync_period: u64,
    updates: u64,
}

impl Ddqn {
    pub fn new(mut online: Network<f32>, gamma: f32, learning_rate: f64, sync_period: u64) -> Self {
        online.set_mode(Mode::Eval);
        let adam = Adam::new(&online, AdamConfig::with_lr(learning_rate));
        Ddqn {
            target: online.clone(),
            online,
            adam,
            gamma,
            sync_period: sync_period.max(1),
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn sync_target(&mut self) {
        self.target.copy_params_from(&self.online).expect("same topology");
    }

    /// One ADAM step on the mean squared error between `Q(s, a)` and the
    /// DDQN targets; the target copy is refreshed every `sync_period`
    /// updates. Returns the loss.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<f64> {
        let y = ddqn_targets(batch, &self.online, &self.target, self.gamma)?;
        let x = batch_tensor(&batch.iter().map(|t| &t.s).collect::<Vec<_>>());
        let q = self.online.forward(&x)?;
        let width = q.row_len();
        let n = batch.len() as f32;
        let mut grad = vec![0.0f32; q.len()];
        let mut loss = 0.0f64;
        for (i, (t, &yi)) in batch.iter().zip(&y).enumerate() {
            let diff = q.row(i)[t.a] - yi;
            loss += (diff as f64).powi(2);
            grad[i * width + t.a] = 2.0 * diff / n;
        }
        loss /= batch.len() as f64;
        if !loss.is_finite() {
            self.online.zero_grads();
            return Err(CoreError::Diverged {
                iteration: self.updates as usize,
                detail: format!("TD loss {loss}"),
            });
        }
        self.online.backward(&Tensor::new(q.shape().to_vec(), grad)?)?;
        self.adam.step(&mut self.online)?;
        self.updates += 1;
        if self.updates.is_multiple_of(self.sync_period) {
            self.sync_target();
        }
        Ok(loss)
    }
}

/// ε-greedy choice: uniform with probability `epsilon`, else the argmax with
/// ties broken toward the lowest index.
pub fn select_action(q: &[f32], epsilon: f64, rng: &mut ChaCha8Rng) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax(q)
    }
}

/// Q network copying every parameter of `policy` except the output layer,
/// which is drawn uniformly from `±IL_INIT_RANGE`.
pub fn il_initialize(policy: &PolicyNet, seed: u64) -> Result<QNet> {
    let mut q = QNet::new(policy.obs_shape(), seed)?;
    q.network_mut().copy_prefix_from(policy.network(), OUTPUT_LAYER)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in q.network_mut().layer_mut(OUTPUT_LAYER).params_mut() {
        p.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-IL_INIT_RANGE..=IL_INIT_RANGE));
    }
    Ok(q)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    Il,
    #[default]
    IlPolicyEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RLConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub target_sync_period: u64,
    pub epoch_frames: usize,
    pub total_frames: usize,
    pub latency_ticks: usize,
    pub safety_enabled: bool,
    pub init_mode: InitMode,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
    /// Environment ticks per gradient update.
    pub train_every: usize,
    /// Ticks the imitation policy drives during the policy-evaluation phase.
    pub policy_eval_frames: usize,
    /// Store transitions produced while the safe policy drives.
    pub push_takeover_transitions: bool,
    pub seed: u64,
}

impl Default for RLConfig {
    fn default() -> Self {
        RLConfig {
            gamma: 0.9,
            epsilon: 0.05,
            batch_size: 32,
            target_sync_period: 300,
            epoch_frames: 2000,
            total_frames: 120_000,
            latency_ticks: 0,
            safety_enabled: false,
            init_mode: InitMode::IlPolicyEval,
            learning_rate: AdamConfig::default().lr,
            buffer_capacity: 5000,
            train_every: 1,
            policy_eval_frames: 2000,
            push_takeover_transitions: true,
            seed: 0,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if self.batch_size == 0 || self.epoch_frames < self.batch_size {
            return bad(format!(
                "epoch_frames {} must be at least batch_size {} (> 0)",
                self.epoch_frames, self.batch_size
            ));
        }
        if self.buffer_capacity < self.batch_size || self.train_every == 0 || self.target_sync_period == 0 {
            return bad("buffer_capacity >= batch_size, train_every > 0 and target_sync_period > 0 required".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub avg_reward: f64,
    pub avg_action_value: f64,
    pub accidents: usize,
    pub takeover_fraction: f64,
    pub restarts: usize,
    pub wall_ms: u64,
}

/// Everything that happened during one tick, as counted for accidents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TickEvents {
    pub step: StepEvents,
    pub takeover_timeout: bool,
}

impl TickEvents {
    pub fn restarts(&self) -> usize {
        usize::from(self.step.restart_stuck || self.step.restart_wrong_direction || self.takeover_timeout)
    }
}

/// Off-road entries plus forced restarts (stuck, wrong direction, takeover
/// timeout); an excursion counts once, at entry.
pub fn count_accidents(events: &[TickEvents]) -> usize {
    events
        .iter()
        .map(|e| {
            usize::from(e.step.off_road_entry)
                + usize::from(e.step.restart_stuck)
                + usize::from(e.step.restart_wrong_direction)
                + usize::from(e.takeover_timeout)
        })
        .sum()
}

/// Receives progress from the training loop. All methods default to no-ops.
pub trait RlObserver {
    fn on_tick(&mut self, _tick: u64, _obs: &Observation, _control: Control, _events: &TickEvents) {}
    fn on_takeover(&mut self, _tick: u64, _on: bool) {}
    fn on_epoch(&mut self, _metrics: &EpochMetrics) {}
}

impl RlObserver for () {}

pub struct RlSetup<'a> {
    pub config: &'a RLConfig,
    pub track: Arc<Track>,
    pub env_config: &'a EnvConfig,
    /// Supplies the training reward.
    pub reward_net: &'a RewardNet,
    /// Scores `avg_reward` when set; defaults to `reward_net`.
    pub metric_net: Option<&'a RewardNet>,
    pub safety: Option<&'a SafetyModule>,
    /// Required for the imitation init modes.
    pub policy: Option<&'a PolicyNet>,
}

#[derive(Clone, Debug)]
pub struct RlOutcome {
    pub q: QNet,
    pub metrics: Vec<EpochMetrics>,
    /// Set when training stopped on a non-finite loss; `q` then holds the
    /// parameters from the start of the failing epoch.
    pub aborted: Option<String>,
}

/// Builds the initial Q network for `mode`.
pub fn initial_q(mode: InitMode, obs_shape: [usize; 3], policy: Option<&PolicyNet>, seed: u64) -> Result<QNet> {
    match (mode, policy) {
        (InitMode::Random, _) => QNet::new(obs_shape, seed),
        (_, Some(p)) => il_initialize(p, seed),
        (_, None) => Err(CoreError::Config(format!("init mode {mode:?} needs an imitation policy"))),
    }
}

/// Lets `actor` drive for `frames` ticks while only the dense layers of the
/// Q network learn. Fills `buffer`.
#[allow(clippy::too_many_arguments)]
pub fn policy_evaluation_phase(
    learner: &mut Ddqn,
    actor: &PolicyNet,
    env: &mut Env,
    reward_net: &RewardNet,
    buffer: &mut ReplayBuffer,
    frames: usize,
    config: &RLConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if frames == 0 {
        return Ok(());
    }
    learner.online.freeze_prefix(TRUNK_LAYERS);
    for tick in 0..frames {
        let obs = env.observation().clone();
        let action = actor.act(&obs)?.index();
        let out = env.step(Action::ALL[action]);
        let r = reward_net.value(&out.next_obs)?;
        buffer.push(Transition {
            s: obs,
            a: action,
            r,
            s_next: out.next_obs,
            terminal: out.terminal,
        });
        if buffer.len() >= config.batch_size && tick % config.train_every == 0 {
            let batch = buffer.sample(config.batch_size, rng);
            learner.update(&batch)?;
        }
    }
    learner.online.freeze_prefix(0);
    Ok(())
}

struct EpochAccumulator {
    ticks: usize,
    reward: f64,
    action_value: f64,
    safe_ticks: usize,
    events: Vec<TickEvents>,
    started: Instant,
}

impl EpochAccumulator {
    fn new() -> Self {
        EpochAccumulator {
            ticks: 0,
            reward: 0.0,
            action_value: 0.0,
            safe_ticks: 0,
            events: Vec::new(),
            started: Instant::now(),
        }
    }

    fn finish(&self, epoch: usize) -> EpochMetrics {
        let n = self.ticks.max(1) as f64;
        EpochMetrics {
            epoch,
            avg_reward: self.reward / n,
            avg_action_value: self.action_value / n,
            accidents: count_accidents(&self.events),
            takeover_fraction: self.safe_ticks as f64 / n,
            restarts: self.events.iter().map(TickEvents::restarts).sum(),
            wall_ms: self.started.elapsed().as_millis() as u64,
        }
    }
}

/// Runs the full reinforcement-learning stage.
pub fn rl_train(setup: &RlSetup<'_>, observer: &mut dyn RlObserver) -> Result<RlOutcome> {
    let cfg = setup.config;
    cfg.validate()?;
    if cfg.safety_enabled && setup.safety.is_none() {
        return Err(CoreError::Config("safety_enabled requires a safety module".into()));
    }
    let shape = setup.env_config.obs_shape();
    let q0 = initial_q(cfg.init_mode, shape, setup.policy, cfg.seed)?;
    let mut env = Env::new(setup.track.clone(), setup.env_config);
    setup.reward_net.check(env.observation())?;
    q0.check(env.observation())?;
    let mut learner = Ddqn::new(q0.into_network(), cfg.gamma as f32, cfg.learning_rate, cfg.target_sync_period);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut explore = ChaCha8Rng::seed_from_u64(cfg.seed);
    explore.set_stream(1);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(2);

    if cfg.init_mode == InitMode::IlPolicyEval {
        let actor = setup.policy.expect("checked by initial_q");
        policy_evaluation_phase(
            &mut learner,
            actor,
            &mut env,
            setup.reward_net,
            &mut buffer,
            cfg.policy_eval_frames,
            cfg,
            &mut sample_rng,
        )?;
        env.reset();
    }

    let safety = if cfg.safety_enabled { setup.safety } else { None };
    let metric_net = setup.metric_net.unwrap_or(setup.reward_net);
    let mut pending: VecDeque<usize> = std::iter::repeat_n(Action::NoAction.index(), cfg.latency_ticks).collect();
    let mut takeover: Option<Takeover> = None;
    let mut metrics = Vec::new();
    let mut acc = EpochAccumulator::new();
    let mut healthy = learner.online.clone();

    for tick in 0..cfg.total_frames as u64 {
        let obs = env.observation().clone();
        let q = learner.online.predict(&obs.to_tensor())?;
        let q = q.data();
        acc.action_value += q.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;

        let mut control = Control::Agent;
        let mut release = false;
        if let Some(module) = safety {
            let verdict = module.gate(&obs)?;
            if takeover.is_none() && verdict == Control::Safe {
                takeover = Some(Takeover::default());
                observer.on_takeover(tick, true);
            }
            if let Some(t) = takeover.as_mut() {
                control = Control::Safe;
                release = t.observe(verdict, module.config.hysteresis_ticks);
            }
        }
        let chosen = match (control, safety) {
            (Control::Safe, Some(module)) => module.safe_policy.act(&obs)?.index(),
            _ => select_action(q, cfg.epsilon, &mut explore),
        };
        pending.push_back(chosen);
        let action = pending.pop_front().expect("queue holds at least the new choice");

        let out = env.step(Action::ALL[action]);
        let r = setup.reward_net.value(&out.next_obs)?;
        acc.reward += if std::ptr::eq(metric_net, setup.reward_net) {
            r as f64
        } else {
            metric_net.value(&out.next_obs)? as f64
        };
        let mut events = TickEvents {
            step: out.events,
            takeover_timeout: false,
        };
        let mut terminal = out.terminal;
        if let (Some(module), Some(t)) = (safety, takeover.as_ref()) {
            if release {
                takeover = None;
                observer.on_takeover(tick, false);
            } else if t.ticks >= module.config.max_ticks && !terminal {
                events.takeover_timeout = true;
                let reset = env.force_restart();
                events.step.on_road_entry |= reset.on_road_entry;
                terminal = true;
                takeover = None;
                observer.on_takeover(tick, false);
            }
        }
        if control == Control::Agent || cfg.push_takeover_transitions {
            buffer.push(Transition {
                s: obs,
                a: action,
                r,
                s_next: out.next_obs,
                terminal,
            });
        }
        if control == Control::Safe {
            acc.safe_ticks += 1;
        }
        acc.ticks += 1;
        acc.events.push(events);
        observer.on_tick(tick, env.observation(), control, &events);

        if buffer.len() >= cfg.batch_size && tick % cfg.train_every as u64 == 0 {
            let batch = buffer.sample(cfg.batch_size, &mut sample_rng);
            if let Err(e) = learner.update(&batch) {
                return Ok(RlOutcome {
                    q: QNet::from_network(healthy)?,
                    metrics,
                    aborted: Some(e.to_string()),
                });
            }
        }

        if acc.ticks == cfg.epoch_frames {
            let m = acc.finish(metrics.len());
            observer.on_epoch(&m);
            metrics.push(m);
            acc = EpochAccumulator::new();
            healthy = learner.online.clone();
        }
    }
    Ok(RlOutcome {
        q: QNet::from_network(learner.online)?,
        metrics,
        aborted: None,
    })
}
