use crate::{Network, NnError, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Bias-corrected ADAM state for one network.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &Network<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = net.params().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Frozen layers keep their parameters and moments.
    pub fn step(&mut self, net: &mut Network<T>) -> Result<()> {
        let expected: Vec<&[usize]> = self.first_moment.iter().map(|m| m.shape()).collect();
        let actual: Vec<&[usize]> = net.params().map(|p| p.shape()).collect();
        if expected != actual {
            return Err(NnError::ShapeMismatch {
                layer: "optimizer state".into(),
                expected: expected.iter().map(|s| s.iter().product()).collect(),
                actual: actual.iter().map(|s| s.iter().product()).collect(),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.epsilon);
        let corr1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let corr2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));

        let mut slot = 0;
        for li in 0..net.layers().len() {
            let layer = net.layer_mut(li);
            let frozen = layer.is_frozen();
            let (params, grads) = layer.params_and_grads_mut();
            for (p, g) in params.iter_mut().zip(grads.iter_mut()) {
                if !frozen {
                    let m = self.first_moment[slot].data_mut();
                    let v = self.second_moment[slot].data_mut();
                    for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let m_hat = *m / corr1;
                        let v_hat = *v / corr2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                g.fill(T::zero());
                slot += 1;
            }
        }
        Ok(())
    }
}
