//! Session state machine, independent of transport.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use steer_core::dataset::{Channel, DatasetMeta, DemoDataset, Label, LabeledDataset};
use steer_core::env::{Env, EnvConfig};
use steer_core::render::Observation;
use steer_core::teacher::{Driver, LaneSweepDriver};
use steer_core::track::Track;
use steer_core::world::{Action, StepEvents};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Demo,
    LabelReward,
    LabelSafety,
    Spectate,
}

impl Mode {
    /// Whether the mode owns a simulated world.
    pub fn drives(self) -> bool {
        self != Mode::Spectate
    }

    pub fn channel(self) -> Option<Channel> {
        match self {
            Mode::LabelReward => Some(Channel::Reward),
            Mode::LabelSafety => Some(Channel::Safety),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("{0} messages are not accepted in {1:?} mode")]
    WrongMode(&'static str, Mode),
    #[error("session is closed")]
    Closed,
    #[error("session is still active")]
    NotClosed,
    #[error("label value {0} is not 1 or -1")]
    BadLabel(i64),
    #[error("ingest queue is full")]
    QueueFull,
    #[error("session recorded no frames")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ingest {
    Queued,
    /// Older than the stale window; dropped.
    Stale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SessionLimits {
    /// Inputs older than `current - stale_window` are dropped.
    pub stale_window: u64,
    /// Pending inputs held for future ticks.
    pub queue_limit: usize,
}

impl Default for SessionLimits {
    fn default() -> Self {
        SessionLimits {
            stale_window: 10,
            queue_limit: 4096,
        }
    }
}

/// A recorded session's dataset.
#[derive(Clone, Debug)]
pub enum Recording {
    Demo(DemoDataset),
    Labeled(LabeledDataset),
}

/// The result of one simulated tick.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stepped {
    pub tick: u64,
    pub action: Action,
    pub recorded: bool,
    pub events: StepEvents,
}

pub struct SessionCore {
    pub id: String,
    pub mode: Mode,
    track: Arc<Track>,
    env: Env,
    driver: Option<Box<dyn Driver + Send>>,
    limits: SessionLimits,
    tick: u64,
    held: Action,
    label: Option<Label>,
    actions: BTreeMap<u64, Action>,
    labels: BTreeMap<u64, Label>,
    observations: Vec<Observation>,
    recorded_actions: Vec<Action>,
    recorded_labels: Vec<Label>,
    stale_dropped: u64,
    closed: bool,
    seed: u64,
}

impl SessionCore {
    /// Label sessions are driven by a lane-sweeping teacher; demo sessions
    /// by the ingested keys.
    pub fn new(id: String, mode: Mode, track: Arc<Track>, env: &EnvConfig, seed: u64, limits: SessionLimits) -> Self {
        let driver: Option<Box<dyn Driver + Send>> = match mode.channel() {
            Some(_) => Some(Box::new(LaneSweepDriver::new(100, seed))),
            None => None,
        };
        SessionCore {
            id,
            mode,
            env: Env::new(track.clone(), env),
            track,
            driver,
            limits,
            tick: 0,
            held: Action::NoAction,
            label: None,
            actions: BTreeMap::new(),
            labels: BTreeMap::new(),
            observations: Vec::new(),
            recorded_actions: Vec::new(),
            recorded_labels: Vec::new(),
            stale_dropped: 0,
            closed: false,
            seed,
        }
    }

    /// The tick whose frame is currently shown.
    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn observation(&self) -> &Observation {
        self.env.observation()
    }

    pub fn stale_dropped(&self) -> u64 {
        self.stale_dropped
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn recorded(&self) -> usize {
        self.observations.len()
    }

    pub fn held(&self) -> Action {
        self.held
    }

    fn admit(&mut self, tick: u64, pending: usize) -> Result<Ingest, SessionError> {
        if self.closed {
            return Err(SessionError::Closed);
        }
        if tick + self.limits.stale_window < self.tick {
            self.stale_dropped += 1;
            return Ok(Ingest::Stale);
        }
        if pending >= self.limits.queue_limit {
            return Err(SessionError::QueueFull);
        }
        Ok(Ingest::Queued)
    }

    /// Queues a key for `tick`; late keys apply at the next simulated tick.
    pub fn ingest_action(&mut self, tick: u64, action: Action) -> Result<Ingest, SessionError> {
        if self.mode != Mode::Demo {
            return Err(SessionError::WrongMode("action", self.mode));
        }
        let verdict = self.admit(tick, self.actions.len())?;
        if verdict == Ingest::Queued {
            self.actions.insert(tick.max(self.tick), action);
        }
        Ok(verdict)
    }

    pub fn ingest_label(&mut self, tick: u64, value: i64) -> Result<Ingest, SessionError> {
        if self.mode.channel().is_none() {
            return Err(SessionError::WrongMode("label", self.mode));
        }
        let label = Label::from_value(value).ok_or(SessionError::BadLabel(value))?;
        let verdict = self.admit(tick, self.labels.len())?;
        if verdict == Ingest::Queued {
            self.labels.insert(tick.max(self.tick), label);
        }
        Ok(verdict)
    }

    fn take_due<T: Copy>(queue: &mut BTreeMap<u64, T>, tick: u64) -> Option<T> {
        let later = queue.split_off(&(tick + 1));
        let due = std::mem::replace(queue, later);
        due.into_values().last()
    }

    /// Applies inputs due at the current tick, records the shown frame and
    /// advances the world.
    pub fn step(&mut self) -> Result<Stepped, SessionError> {
        if self.closed {
            return Err(SessionError::Closed);
        }
        let tick = self.tick;
        if let Some(a) = Self::take_due(&mut self.actions, tick) {
            self.held = a;
        }
        if let Some(l) = Self::take_due(&mut self.labels, tick) {
            self.label = Some(l);
        }
        let obs = self.env.observation().clone();
        let action = match self.driver.as_mut() {
            Some(d) => d.act(self.env.world(), &obs),
            None => self.held,
        };
        let recorded = match self.mode {
            Mode::Demo => {
                self.recorded_actions.push(action);
                true
            }
            _ => match self.label {
                Some(l) => {
                    self.recorded_labels.push(l);
                    true
                }
                None => false,
            },
        };
        if recorded {
            self.observations.push(obs);
        }
        let out = self.env.step(action);
        self.tick += 1;
        Ok(Stepped {
            tick,
            action,
            recorded,
            events: out.events,
        })
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn recording(&self) -> Result<Recording, SessionError> {
        if !self.closed {
            return Err(SessionError::NotClosed);
        }
        if self.observations.is_empty() {
            return Err(SessionError::Empty);
        }
        let meta = DatasetMeta {
            provenance: format!("human:{}", self.id),
            track: self.track.name().to_string(),
            seed: self.seed,
            channel: self.mode.channel(),
            ..DatasetMeta::default()
        };
        let obs = self.observations.clone();
        let rec = match self.mode.channel() {
            None => Recording::Demo(DemoDataset::new(meta, obs, self.recorded_actions.clone()).expect("lengths agree")),
            Some(_) => {
                Recording::Labeled(LabeledDataset::new(meta, obs, self.recorded_labels.clone()).expect("lengths agree"))
            }
        };
        Ok(rec)
    }
}
