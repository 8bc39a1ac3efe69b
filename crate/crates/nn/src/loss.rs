use crate::{NnError, Result, Scalar, Tensor};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Scalar loss with its gradient with respect to the loss input.
#[derive(Clone, Debug)]
pub struct LossValue<T: Scalar> {
    pub value: T,
    pub grad: Tensor<T>,
    /// How many labeled probabilities hit [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Mean negative log-likelihood of `labels` under row-wise probability vectors.
pub fn nll_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<LossValue<T>> {
    let n = probs.rows();
    if n == 0 || n != labels.len() {
        return Err(NnError::Loss(format!(
            "{} label(s) for a batch of {n}",
            labels.len()
        )));
    }
    let classes = probs.row_len();
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut grad = Tensor::zeros(probs.shape());
    let mut total = T::zero();
    let mut clamped = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = probs.row(i);
        if label >= classes {
            return Err(NnError::Loss(format!("label {label} out of range for {classes} classes")));
        }
        let sum: T = row.iter().copied().sum();
        if (sum - T::one()).abs().as_f64() > 1e-5 {
            return Err(NnError::Loss(format!("row {i} sums to {:?}, not 1", sum)));
        }
        let mut p = row[label];
        if p < floor {
            p = floor;
            clamped += 1;
        }
        total -= p.ln();
        grad.data_mut()[i * classes + label] = -inv_n / p;
    }
    Ok(LossValue {
        value: total * inv_n,
        grad,
        clamped,
    })
}

/// Mean squared error between a batch of scalar predictions and targets.
pub fn mse_loss<T: Scalar>(preds: &Tensor<T>, targets: &[T]) -> Result<LossValue<T>> {
    if targets.is_empty() {
        return Err(NnError::Loss("empty batch".into()));
    }
    if preds.len() != targets.len() {
        return Err(NnError::Loss(format!(
            "{} prediction(s) for {} target(s)",
            preds.len(),
            targets.len()
        )));
    }
    let n = T::from_usize(targets.len()).unwrap();
    let two = T::one() + T::one();
    let mut total = T::zero();
    let mut grad = Tensor::zeros(preds.shape());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(preds.data()).zip(targets) {
        let d = p - t;
        total += d * d;
        *g = two * d / n;
    }
    Ok(LossValue {
        value: total / n,
        grad,
        clamped: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn nll_of_uniform_is_ln3() {
        let p = t(vec![2, 3], &[1.0 / 3.0; 6]);
        let l = nll_loss(&p, &[0, 2]).unwrap();
        assert!((l.value - 3f64.ln()).abs() < 1e-12);
        assert!((l.value - 1.09861).abs() < 1e-5);
    }

    #[test]
    fn nll_is_zero_for_certain_correct_labels() {
        let p = t(vec![2, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(nll_loss(&p, &[1, 0]).unwrap().value, 0.0);
    }

    #[test]
    fn nll_of_half_and_quarter() {
        let p = t(vec![2, 2], &[0.5, 0.5, 0.75, 0.25]);
        let l = nll_loss(&p, &[0, 1]).unwrap();
        assert!((l.value - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((l.value - 1.03972).abs() < 1e-5);
    }

    #[test]
    fn nll_clamps_zero_probability() {
        let p = t(vec![1, 2], &[1.0, 0.0]);
        let l = nll_loss(&p, &[1]).unwrap();
        assert_eq!(l.clamped, 1);
        assert!((l.value + PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(l.value.is_finite());
    }

    #[test]
    fn nll_rejects_bad_inputs() {
        let p = t(vec![1, 2], &[0.5, 0.5]);
        assert!(nll_loss(&p, &[2]).is_err());
        assert!(nll_loss(&p, &[0, 1]).is_err());
        let q = t(vec![1, 2], &[0.5, 0.6]);
        assert!(nll_loss(&q, &[0]).is_err());
    }

    #[test]
    fn mse_examples() {
        let p = t(vec![2], &[1.0, -1.0]);
        assert_eq!(mse_loss(&p, &[1.0, -1.0]).unwrap().value, 0.0);
        assert_eq!(mse_loss(&t(vec![1], &[0.0]), &[1.0]).unwrap().value, 1.0);
        let l = mse_loss(&t(vec![2, 1], &[0.5, -0.5]), &[1.0, -1.0]).unwrap();
        assert!((l.value - 0.25).abs() < 1e-15);
        assert!(mse_loss(&p, &[]).is_err());
    }
}
