//! World plus camera: the pixels-only interface learners drive through.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::render::{Camera, Observation, RenderConfig};
use crate::track::Track;
use crate::world::{Action, SimConfig, StepEvents, World};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub render: RenderConfig,
}

impl EnvConfig {
    pub fn with_frame(height: usize, width: usize) -> Self {
        EnvConfig {
            sim: SimConfig::default(),
            render: RenderConfig::with_size(height, width),
        }
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        self.render.obs_shape()
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub events: StepEvents,
    /// Observation of the state the step reached, before any respawn.
    pub next_obs: Observation,
    /// The step ended in a restart.
    pub terminal: bool,
}

#[derive(Clone, Debug)]
pub struct Env {
    world: World,
    camera: Camera,
    obs: Observation,
}

impl Env {
    pub fn new(track: Arc<Track>, config: &EnvConfig) -> Self {
        let world = World::new(track, config.sim.clone());
        let mut camera = Camera::new(config.render.clone());
        let obs = camera.reset(&world);
        Env { world, camera, obs }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    /// Repositions the car and restarts the frame history there.
    pub fn place(&mut self, s: f64, d: f64, psi: f64) {
        self.world.set_state(s, d, psi);
        self.obs = self.camera.reset(&self.world);
    }

    pub fn reset(&mut self) {
        self.world.reset();
        self.obs = self.camera.reset(&self.world);
    }

    pub fn step(&mut self, action: Action) -> Outcome {
        let events = self.world.step(action);
        let (next_obs, fresh) = self.camera.after_step(&self.world);
        let terminal = fresh.is_some();
        self.obs = fresh.unwrap_or_else(|| next_obs.clone());
        Outcome {
            events,
            next_obs,
            terminal,
        }
    }

    /// Respawns after an external decision (such as a takeover timeout).
    pub fn force_restart(&mut self) -> StepEvents {
        let on_road = self.world.probe().on_road;
        self.reset();
        StepEvents {
            on_road_entry: !on_road,
            ..StepEvents::default()
        }
    }
}
