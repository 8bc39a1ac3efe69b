//! Behavioral cloning of the demonstrator and closed-loop evaluation.

use std::sync::Arc;

use crate::dataset::DemoDataset;
use crate::env::{Env, EnvConfig};
use crate::nets::{PolicyNet, QNet, RewardNet};
use crate::render::Observation;
use crate::teacher::Driver;
use crate::track::Track;
use crate::train::{train_network, TrainConfig, TrainingCurve};
use crate::world::{Action, World};
use crate::{CoreError, Result};

/// Minimizes the negative log-likelihood of the demonstrated actions.
pub fn train_policy(
    train: &DemoDataset,
    validation: &DemoDataset,
    config: &TrainConfig,
) -> Result<(PolicyNet, TrainingCurve)> {
    let shape = train
        .obs_shape()
        .ok_or_else(|| CoreError::Dataset("empty training split".into()))?;
    let mut policy = PolicyNet::new(shape, config.seed)?;
    let curve = train_network(policy.network_mut(), train, validation, config)?;
    Ok((policy, curve))
}

/// Drives by the policy's most probable action.
pub struct PolicyDriver<'a>(pub &'a PolicyNet);

impl Driver for PolicyDriver<'_> {
    fn act(&mut self, _world: &World, obs: &Observation) -> Action {
        self.0.act(obs).expect("observation shape checked by caller")
    }
}

/// Drives greedily by action value.
pub struct GreedyDriver<'a>(pub &'a QNet);

impl Driver for GreedyDriver<'_> {
    fn act(&mut self, _world: &World, obs: &Observation) -> Action {
        let q = self.0.q_values(obs).expect("observation shape checked by caller");
        Action::ALL[crate::nets::argmax(&q)]
    }
}

/// Mean reward-network output over the states reached in `ticks` closed-loop
/// steps from the spawn point.
pub fn evaluate_policy(
    driver: &mut dyn Driver,
    track: Arc<Track>,
    env_config: &EnvConfig,
    reward_net: &RewardNet,
    ticks: usize,
) -> Result<f64> {
    if ticks == 0 {
        return Err(CoreError::Config("evaluation needs at least one tick".into()));
    }
    let mut env = Env::new(track, env_config);
    reward_net.check(env.observation())?;
    let mut total = 0.0;
    for _ in 0..ticks {
        let action = driver.act(env.world(), env.observation());
        let outcome = env.step(action);
        total += reward_net.value(&outcome.next_obs)? as f64;
    }
    Ok(total / ticks as f64)
}
