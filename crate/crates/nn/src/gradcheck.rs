use crate::{mse_loss, nll_loss, Network, NnError, Result, Tensor};

/// Loss applied to the network output during a gradient check.
#[derive(Clone, Debug)]
pub enum LossSpec {
    Mse(Vec<f64>),
    Nll(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over parameters of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_relative_error: f64,
    /// Same measure over the input gradient.
    pub input_max_relative_error: f64,
    pub checked_params: usize,
    /// Parameters whose step-`h` difference straddled a ReLU or pooling kink
    /// and were re-measured with smaller steps.
    pub refined_params: usize,
}

/// Central differences with step `h` that disagree by more than this are
/// re-measured at `h / 10` and `h / 100`.
const REFINE_ABOVE: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn eval_loss(out: &Tensor<f64>, loss: &LossSpec) -> Result<crate::LossValue<f64>> {
    match loss {
        LossSpec::Mse(t) => mse_loss(out, t),
        LossSpec::Nll(l) => nll_loss(out, l),
    }
}

/// Forward pass plus loss, reusing the dropout stream position so repeated
/// calls see the same masks.
pub fn loss_value(net: &mut Network<f64>, input: &Tensor<f64>, loss: &LossSpec) -> Result<f64> {
    let rng = net.rng_state();
    let out = net.forward(input)?;
    net.restore_rng(rng);
    Ok(eval_loss(&out, loss)?.value)
}

/// Compares backpropagated gradients against central finite differences with
/// step `h`, perturbing every parameter and every input element.
///
/// Piecewise-linear layers make the loss non-smooth; when a step crosses a
/// kink the difference quotient no longer measures the local derivative, so a
/// failing parameter is re-measured with two smaller steps and the best
/// agreement is kept.
pub fn grad_check(
    net: &mut Network<f64>,
    input: &Tensor<f64>,
    loss: &LossSpec,
    h: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(NnError::Loss(format!("finite-difference step {h} must be positive")));
    }
    let rng = net.rng_state();
    net.zero_grads();
    let out = net.forward(input)?;
    let lv = eval_loss(&out, loss)?;
    let input_grad = net.backward_with_input_grad(&lv.grad)?;
    let analytic: Vec<Vec<f64>> = net.grads().map(|g| g.data().to_vec()).collect();
    net.zero_grads();

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut refined = 0;
    for (ti, grads) in analytic.iter().enumerate() {
        for (idx, &g) in grads.iter().enumerate() {
            let orig = param_at(net, ti, idx);
            let mut err = f64::INFINITY;
            for (attempt, step) in [h, h / 10.0, h / 100.0].into_iter().enumerate() {
                set_param(net, ti, idx, orig + step);
                net.restore_rng(rng.clone());
                let plus = loss_value(net, input, loss)?;
                set_param(net, ti, idx, orig - step);
                net.restore_rng(rng.clone());
                let minus = loss_value(net, input, loss)?;
                set_param(net, ti, idx, orig);
                let numeric = (plus - minus) / (2.0 * step);
                err = err.min(rel_err(g, numeric));
                if err <= REFINE_ABOVE {
                    break;
                }
                if attempt == 0 {
                    refined += 1;
                }
            }
            worst = worst.max(err);
            checked += 1;
        }
    }

    let mut input_worst: f64 = 0.0;
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        net.restore_rng(rng.clone());
        let plus = loss_value(net, &x, loss)?;
        x.data_mut()[i] = orig - h;
        net.restore_rng(rng.clone());
        let minus = loss_value(net, &x, loss)?;
        x.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        input_worst = input_worst.max(rel_err(input_grad.data()[i], numeric));
    }
    net.restore_rng(rng);

    Ok(GradCheckReport {
        max_relative_error: worst,
        input_max_relative_error: input_worst,
        checked_params: checked,
        refined_params: refined,
    })
}

fn param_at(net: &Network<f64>, tensor: usize, idx: usize) -> f64 {
    net.params().nth(tensor).expect("tensor index").data()[idx]
}

fn set_param(net: &mut Network<f64>, tensor: usize, idx: usize, value: f64) {
    net.params_mut().nth(tensor).expect("tensor index").data_mut()[idx] = value;
}
