//! Minibatch ADAM training with best-validation selection, shared by the
//! policy, reward and safety stages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use steer_nn::{mse_loss, nll_loss, Adam, AdamConfig, Mode, Network, Tensor};

use crate::dataset::{Dataset, Label, Target};
use crate::nets::{argmax, predict_rows};
use crate::render::batch_tensor;
use crate::world::Action;
use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iterations: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_iterations: 15000,
            eval_every: 200,
            patience: 10,
            learning_rate: AdamConfig::default().lr,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub train_loss: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub best_iteration: usize,
    pub best_accuracy: f64,
}

/// Disjoint shuffled 80/20 split; the validation share is `round(0.2 n)`.
pub fn split_dataset<T: Target>(d: &Dataset<T>, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    if d.len() < 10 {
        return Err(CoreError::Dataset(format!("{} records are too few to split", d.len())));
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (d.len() as f64 * 0.2).round() as usize;
    let (val, train) = idx.split_at(n_val);
    Ok((d.select(train), d.select(val)))
}

/// How network outputs are scored against a target type.
pub trait Objective: Target {
    fn loss(outputs: &Tensor<f32>, targets: &[Self]) -> Result<(f64, Tensor<f32>)>;
    fn correct(output: &[f32], target: Self) -> bool;
}

impl Objective for Action {
    fn loss(outputs: &Tensor<f32>, targets: &[Self]) -> Result<(f64, Tensor<f32>)> {
        let labels: Vec<usize> = targets.iter().map(|a| a.index()).collect();
        let v = nll_loss(outputs, &labels)?;
        Ok((v.value as f64, v.grad))
    }

    fn correct(output: &[f32], target: Self) -> bool {
        argmax(output) == target.index()
    }
}

impl Objective for Label {
    fn loss(outputs: &Tensor<f32>, targets: &[Self]) -> Result<(f64, Tensor<f32>)> {
        let t: Vec<f32> = targets.iter().map(|l| l.value()).collect();
        let v = mse_loss(outputs, &t)?;
        Ok((v.value as f64, v.grad))
    }

    fn correct(output: &[f32], target: Self) -> bool {
        sign_label(output[0]) == target
    }
}

/// Positive iff strictly above zero.
pub fn sign_label(v: f32) -> Label {
    Label::from_bool(v > 0.0)
}

/// Accuracy and mean loss of `net` on a dataset, evaluated without dropout.
pub fn evaluate<T: Objective>(net: &Network<f32>, data: &Dataset<T>) -> Result<(f64, f64)> {
    let obs: Vec<_> = data.observations.iter().collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for (part, targets) in obs.chunks(256).zip(data.targets.chunks(256)) {
        let rows = predict_rows(net, part, 256)?;
        correct += rows.iter().zip(targets).filter(|(r, &t)| T::correct(r, t)).count();
        let flat: Vec<f32> = rows.concat();
        let out = Tensor::new(vec![rows.len(), flat.len() / rows.len()], flat)?;
        loss_sum += T::loss(&out, targets)?.0 * targets.len() as f64;
    }
    let n = data.len().max(1) as f64;
    Ok((correct as f64 / n, loss_sum / n))
}

/// Trains `net` in place and leaves it holding the parameters with the best
/// validation accuracy (ties go to the lower validation loss; iteration 0 is
/// evaluated before any update). Patience counts evaluations without an
/// accuracy gain.
pub fn train_network<T: Objective>(
    net: &mut Network<f32>,
    train: &Dataset<T>,
    validation: &Dataset<T>,
    config: &TrainConfig,
) -> Result<TrainingCurve> {
    if train.is_empty() || validation.is_empty() {
        return Err(CoreError::Dataset("training and validation splits must be non-empty".into()));
    }
    if config.batch_size == 0 || config.eval_every == 0 {
        return Err(CoreError::Config("batch_size and eval_every must be positive".into()));
    }
    net.reseed(config.seed);
    let mut adam = Adam::new(net, AdamConfig::with_lr(config.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut curve = TrainingCurve::default();

    let (acc, loss) = evaluate(net, validation)?;
    curve.evals.push(EvalPoint {
        iteration: 0,
        accuracy: acc,
        loss,
    });
    curve.best_accuracy = acc;
    let mut best_loss = loss;
    let mut best = net.clone();
    let mut stale = 0;

    for iteration in 1..=config.max_iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let obs: Vec<_> = batch.iter().map(|&i| &train.observations[i]).collect();
        let targets: Vec<T> = batch.iter().map(|&i| train.targets[i]).collect();
        net.set_mode(Mode::Train);
        let out = net.forward(&batch_tensor(&obs))?;
        let (loss, grad) = T::loss(&out, &targets)?;
        if !loss.is_finite() {
            net.set_mode(Mode::Eval);
            return Err(CoreError::Diverged {
                iteration,
                detail: format!("training loss {loss}"),
            });
        }
        net.backward(&grad)?;
        adam.step(net)?;
        curve.train_loss.push(loss);

        if iteration % config.eval_every == 0 || iteration == config.max_iterations {
            net.set_mode(Mode::Eval);
            let (acc, val_loss) = evaluate(net, validation)?;
            if !val_loss.is_finite() {
                return Err(CoreError::Diverged {
                    iteration,
                    detail: format!("validation loss {val_loss}"),
                });
            }
            curve.evals.push(EvalPoint {
                iteration,
                accuracy: acc,
                loss: val_loss,
            });
            let gained = acc > curve.best_accuracy;
            if gained || (acc == curve.best_accuracy && val_loss < best_loss) {
                curve.best_accuracy = acc;
                curve.best_iteration = iteration;
                best_loss = val_loss;
                best = net.clone();
            }
            if gained {
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
    }
    *net = best;
    net.set_mode(Mode::Eval);
    Ok(curve)
}
