//! Reward networks regressed onto instructor labels.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, LabeledDataset, Subsample};
use crate::nets::{PolicyNet, ScalarNet, TRUNK_LAYERS};
use crate::render::Observation;
use crate::train::{evaluate, train_network, TrainConfig, TrainingCurve};
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarInit {
    Fresh,
    /// Copy the convolutional trunk from the imitation policy.
    #[default]
    TrunkFromPolicy,
}

/// Trains a tanh-headed network on ±1 labels by MSE, selecting the
/// parameters with the best validation sign-accuracy.
pub fn train_scalar(
    train: &LabeledDataset,
    validation: &LabeledDataset,
    config: &TrainConfig,
    trunk_from: Option<&PolicyNet>,
) -> Result<(ScalarNet, TrainingCurve)> {
    if !train.has_both_classes() {
        return Err(CoreError::Untrainable(format!(
            "training split of {} records holds a single label class",
            train.len()
        )));
    }
    let shape = train
        .obs_shape()
        .ok_or_else(|| CoreError::Dataset("empty training split".into()))?;
    let mut net = ScalarNet::new(shape, config.seed)?;
    if let Some(policy) = trunk_from {
        if policy.obs_shape() != shape {
            return Err(CoreError::ObservationShape {
                expected: policy.obs_shape().to_vec(),
                actual: shape.to_vec(),
            });
        }
        net.network_mut().copy_prefix_from(policy.network(), TRUNK_LAYERS)?;
    }
    let curve = train_network(net.network_mut(), train, validation, config)?;
    Ok((net, curve))
}

pub fn train_reward(
    train: &LabeledDataset,
    validation: &LabeledDataset,
    config: &TrainConfig,
    trunk_from: Option<&PolicyNet>,
) -> Result<(ScalarNet, TrainingCurve)> {
    train_scalar(train, validation, config, trunk_from)
}

pub fn reward_of(net: &ScalarNet, obs: &Observation) -> Result<f32> {
    net.value(obs)
}

/// Fraction of records whose output sign matches the label; exactly zero
/// counts as negative.
pub fn sign_accuracy(net: &ScalarNet, data: &LabeledDataset) -> Result<f64> {
    Ok(evaluate(net.network(), data)?.0)
}

/// Uniform subsample without replacement, keeping the original order.
pub fn subsample(data: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = ((data.len() as f64 * fraction).round() as usize).clamp(1, data.len());
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), data.len(), k).into_vec();
    idx.sort_unstable();
    let mut out = data.select(&idx);
    if !out.has_both_classes() {
        let only = out.targets.first().copied().unwrap_or(Label::Negative);
        return Err(CoreError::Untrainable(format!(
            "subsample of {k} records holds only {only:?} labels"
        )));
    }
    out.meta.subsample = Some(Subsample { fraction, seed });
    Ok(out)
}
