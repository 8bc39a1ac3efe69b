//! Frenet-frame car kinematics, restart rules and ground-truth probes.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::track::{normalize_angle, Track};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    NoAction,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::NoAction, Action::Left, Action::Right];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    /// Steering sign: +1 left, -1 right.
    pub fn steer(self) -> f64 {
        match self {
            Action::NoAction => 0.0,
            Action::Left => 1.0,
            Action::Right => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub speed: f64,
    pub steer_step: f64,
    /// Arclength of the deterministic spawn point.
    pub spawn_s: f64,
    /// Lane the car spawns in (1 = rightmost).
    pub spawn_lane: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.1,
            speed: 13.9,
            steer_step: 0.035,
            spawn_s: 0.0,
            spawn_lane: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarState {
    pub s: f64,
    pub d: f64,
    pub psi: f64,
    pub speed: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    pub off_road_entry: bool,
    pub on_road_entry: bool,
    pub restart_stuck: bool,
    pub restart_wrong_direction: bool,
    /// Open tracks only: the car ran past the last segment and was respawned.
    pub end_of_track: bool,
}

impl StepEvents {
    pub fn restarted(&self) -> bool {
        self.restart_stuck || self.restart_wrong_direction || self.end_of_track
    }

    fn merge(&mut self, other: StepEvents) {
        self.off_road_entry |= other.off_road_entry;
        self.on_road_entry |= other.on_road_entry;
        self.restart_stuck |= other.restart_stuck;
        self.restart_wrong_direction |= other.restart_wrong_direction;
        self.end_of_track |= other.end_of_track;
    }
}

/// Ground truth available to teachers and tests only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Probe {
    pub lane_index: Option<usize>,
    pub on_road: bool,
    pub aligned: bool,
}

#[derive(Clone, Debug)]
pub struct World {
    track: Arc<Track>,
    config: SimConfig,
    state: CarState,
    on_road: bool,
    tick: u64,
    terminal_state: Option<CarState>,
}

impl World {
    pub fn new(track: Arc<Track>, config: SimConfig) -> Self {
        let mut world = World {
            track,
            state: CarState {
                s: 0.0,
                d: 0.0,
                psi: 0.0,
                speed: config.speed,
            },
            config,
            on_road: true,
            tick: 0,
            terminal_state: None,
        };
        world.state = world.spawn_state();
        world
    }

    pub fn track(&self) -> &Track {
        &self.track
    }

    pub fn track_arc(&self) -> &Arc<Track> {
        &self.track
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn state(&self) -> &CarState {
        &self.state
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// The pre-reset state of the most recent step if that step restarted.
    pub fn terminal_state(&self) -> Option<&CarState> {
        self.terminal_state.as_ref()
    }

    pub fn spawn_state(&self) -> CarState {
        CarState {
            s: self.track.wrap(self.config.spawn_s),
            d: self.track.lane_center(self.config.spawn_lane),
            psi: 0.0,
            speed: self.config.speed,
        }
    }

    /// Places the car without emitting events. The road-membership flag
    /// follows the new position.
    pub fn set_state(&mut self, s: f64, d: f64, psi: f64) {
        self.state = CarState {
            s: self.track.wrap(s),
            d,
            psi: normalize_angle(psi),
            speed: self.config.speed,
        };
        self.on_road = self.probe().on_road;
        self.terminal_state = None;
    }

    pub fn reset(&mut self) {
        let spawn = self.spawn_state();
        self.set_state(spawn.s, spawn.d, spawn.psi);
    }

    pub fn step(&mut self, action: Action) -> StepEvents {
        self.terminal_state = None;
        let c = &self.config;
        let st = &mut self.state;
        let kappa = self.track.curvature(st.s);
        st.psi = normalize_angle(st.psi + action.steer() * c.steer_step - kappa * st.speed * c.dt * st.psi.cos());
        st.d += st.speed * c.dt * st.psi.sin();
        let advanced = st.s + st.speed * c.dt * st.psi.cos();
        let ran_off_end = !self.track.closed() && advanced >= self.track.length();
        st.s = self.track.wrap(advanced);
        self.tick += 1;

        let mut events = self.road_transition();
        let mut restart = self.check_restart();
        restart.end_of_track = ran_off_end && !restart.restarted();
        if restart.end_of_track {
            self.terminal_state = Some(self.state);
            self.reset_with_events(&mut restart);
        }
        events.merge(restart);
        events
    }

    fn road_transition(&mut self) -> StepEvents {
        let now = self.probe().on_road;
        let events = StepEvents {
            off_road_entry: self.on_road && !now,
            on_road_entry: !self.on_road && now,
            ..StepEvents::default()
        };
        self.on_road = now;
        events
    }

    /// Applies the wrong-direction and far-off-road restart rules; on either
    /// the car respawns and the returned flags say why.
    pub fn check_restart(&mut self) -> StepEvents {
        let mut events = StepEvents {
            restart_wrong_direction: self.state.psi.abs() > FRAC_PI_2,
            restart_stuck: self.state.d.abs() > self.track.half_width() + 2.0 * self.track.lane_width(),
            ..StepEvents::default()
        };
        if events.restarted() {
            self.terminal_state = Some(self.state);
            self.reset_with_events(&mut events);
        }
        events
    }

    fn reset_with_events(&mut self, events: &mut StepEvents) {
        let was_on_road = self.on_road;
        let spawn = self.spawn_state();
        self.state = spawn;
        self.on_road = self.probe().on_road;
        events.on_road_entry |= !was_on_road && self.on_road;
        events.off_road_entry |= was_on_road && !self.on_road;
    }

    pub fn probe(&self) -> Probe {
        probe_state(&self.track, &self.state)
    }
}

/// The left road edge `d = half_width` is on-road but closes no half-open lane
/// interval; it is assigned to the leftmost lane.
pub fn probe_state(track: &Track, state: &CarState) -> Probe {
    let on_road = state.d.abs() <= track.half_width();
    Probe {
        lane_index: on_road.then(|| track.lane_index(state.d).unwrap_or(track.lane_count())),
        on_road,
        aligned: state.psi.abs() <= FRAC_PI_2,
    }
}
