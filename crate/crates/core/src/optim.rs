//! Adam optimizer and the central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-parameter Adam accumulators plus hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Accumulators sized to match `param_lens` (one entry per parameter tensor).
    pub fn new(param_lens: &[usize], learning_rate: f64) -> Self {
        AdamState {
            first_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.epsilon = epsilon;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }
}

/// One Adam update over a parameter collection. `grads` must align with
/// `params` one-to-one.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Usage(format!(
            "adam_step: {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if state.first_moment.len() != params.len() {
        return Err(Error::Usage(format!(
            "adam_step: optimizer state tracks {} tensors, model has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if grads[i].len() != p.len() {
            return Err(Error::Usage(format!(
                "adam_step: gradient {} has length {}, parameter has {}",
                i,
                grads[i].len(),
                p.len()
            )));
        }
    }

    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);

    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let g = &grads[i];
        let data = p.data_mut();
        for j in 0..data.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        if !p.all_finite() {
            return Err(Error::Numeric(format!(
                "adam_step produced non-finite values in parameter {i}"
            )));
        }
    }
    Ok(())
}

/// Central finite differences: `(L(θ+h·e_i) − L(θ−h·e_i)) / 2h` per coordinate.
///
/// This is the independent oracle against which tape gradients are checked;
/// it never touches the tape.
pub fn finite_difference_gradient<F>(
    mut loss_fn: F,
    params: &[Tensor],
    h: f64,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Usage(format!("finite differences require h > 0, got {h}")));
    }
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = vec![0.0; params[pi].len()];
        for j in 0..params[pi].len() {
            let mut plus: Vec<Tensor> = params.to_vec();
            plus[pi].data_mut()[j] += h;
            let lp = loss_fn(&plus)?;
            let mut minus: Vec<Tensor> = params.to_vec();
            minus[pi].data_mut()[j] -= h;
            let lm = loss_fn(&minus)?;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Numeric(
                    "loss non-finite at a perturbed point".into(),
                ));
            }
            g[j] = (lp - lm) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}
