//! The shared convolutional trunk and the four network heads built on it.

use steer_nn::{LayerKind, Mode, Network, NetworkBuilder, Tensor};

use crate::render::{batch_tensor, Observation};
use crate::world::Action;
use crate::{CoreError, Result};

/// Layers up to and including the fourth conv block's pool.
pub const TRUNK_LAYERS: usize = 12;
pub const HIDDEN_UNITS: usize = 100;
pub const DROPOUT_RATE: f32 = 0.5;
/// Index of the hidden dense layer right after the trunk.
pub const HIDDEN_LAYER: usize = TRUNK_LAYERS;
/// Index of the output dense layer.
pub const OUTPUT_LAYER: usize = TRUNK_LAYERS + 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Three action probabilities.
    Policy,
    /// One value in (-1, 1).
    Scalar,
    /// Three unbounded action values.
    Q,
}

pub fn build(obs_shape: [usize; 3], head: Head, seed: u64) -> Result<Network<f32>> {
    let mut b = NetworkBuilder::new(&obs_shape);
    for channels in [6, 8, 16, 16] {
        b = b.conv(channels, 4, 4).relu().max_pool();
    }
    b = b.dense(HIDDEN_UNITS).relu().dropout(DROPOUT_RATE);
    b = match head {
        Head::Policy => b.dense(Action::COUNT).softmax(),
        Head::Scalar => b.dense(1).tanh(),
        Head::Q => b.dense(Action::COUNT),
    };
    Ok(b.build(seed)?)
}

fn expected_kinds(net: &Network<f32>, head: Head) -> bool {
    let Ok(reference) = build_kinds(head) else {
        return false;
    };
    net.input_shape().len() == 3 && net.kinds() == reference
}

fn build_kinds(head: Head) -> Result<Vec<LayerKind>> {
    Ok(build([6, 16, 16], head, 0)?.kinds())
}

fn check_obs(net: &Network<f32>, obs: &Observation) -> Result<()> {
    if net.input_shape() != obs.shape() {
        return Err(CoreError::ObservationShape {
            expected: net.input_shape().to_vec(),
            actual: obs.shape().to_vec(),
        });
    }
    Ok(())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Runs `net` on observations in chunks, returning one output row per input.
pub fn predict_rows(net: &Network<f32>, obs: &[&Observation], chunk: usize) -> Result<Vec<Vec<f32>>> {
    let mut rows = Vec::with_capacity(obs.len());
    for part in obs.chunks(chunk.max(1)) {
        let out = net.predict(&batch_tensor(part))?;
        rows.extend((0..out.rows()).map(|i| out.row(i).to_vec()));
    }
    Ok(rows)
}

macro_rules! wrapper {
    ($name:ident, $head:expr, $what:literal) => {
        #[derive(Clone, Debug)]
        pub struct $name {
            net: Network<f32>,
        }

        impl $name {
            pub fn new(obs_shape: [usize; 3], seed: u64) -> Result<Self> {
                let mut net = build(obs_shape, $head, seed)?;
                net.set_mode(Mode::Eval);
                Ok($name { net })
            }

            pub fn from_network(net: Network<f32>) -> Result<Self> {
                if !expected_kinds(&net, $head) {
                    return Err(CoreError::Config(format!(
                        concat!("network layers {:?} are not a ", $what),
                        net.kinds()
                    )));
                }
                Ok($name { net })
            }

            pub fn network(&self) -> &Network<f32> {
                &self.net
            }

            pub fn network_mut(&mut self) -> &mut Network<f32> {
                &mut self.net
            }

            pub fn into_network(self) -> Network<f32> {
                self.net
            }

            pub fn obs_shape(&self) -> [usize; 3] {
                let s = self.net.input_shape();
                [s[0], s[1], s[2]]
            }

            pub fn check(&self, obs: &Observation) -> Result<()> {
                check_obs(&self.net, obs)
            }
        }
    };
}

wrapper!(PolicyNet, Head::Policy, "policy network");
wrapper!(ScalarNet, Head::Scalar, "scalar (reward or safety) network");
wrapper!(QNet, Head::Q, "Q network");

pub type RewardNet = ScalarNet;
pub type SafetyNet = ScalarNet;

impl PolicyNet {
    pub fn probabilities(&self, obs: &Observation) -> Result<[f32; 3]> {
        self.check(obs)?;
        let out = self.net.predict(&obs.to_tensor())?;
        Ok([out.data()[0], out.data()[1], out.data()[2]])
    }

    /// Most probable action, preferring the lowest index on ties.
    pub fn act(&self, obs: &Observation) -> Result<Action> {
        let probs = self.probabilities(obs)?;
        Ok(Action::ALL[argmax(&probs)])
    }
}

impl ScalarNet {
    pub fn value(&self, obs: &Observation) -> Result<f32> {
        self.check(obs)?;
        Ok(self.net.predict(&obs.to_tensor())?.data()[0])
    }

    pub fn values(&self, obs: &[&Observation]) -> Result<Vec<f32>> {
        if let Some(o) = obs.first() {
            self.check(o)?;
        }
        Ok(predict_rows(&self.net, obs, 128)?.into_iter().map(|r| r[0]).collect())
    }
}

impl QNet {
    pub fn q_values(&self, obs: &Observation) -> Result<[f32; 3]> {
        self.check(obs)?;
        let out = self.net.predict(&obs.to_tensor())?;
        Ok([out.data()[0], out.data()[1], out.data()[2]])
    }

    pub fn q_batch(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.net.predict(batch)?)
    }
}
