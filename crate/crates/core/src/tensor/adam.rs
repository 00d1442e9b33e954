//! Adam optimizer state and the stepped learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// Per-parameter Adam moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
    beta1: T,
    beta2: T,
    epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments with the usual defaults (0.9, 0.999, 1e-8).
    pub fn new(param_len: usize) -> Self {
        Self::with_hyperparams(param_len, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(param_len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            m: vec![T::zero(); param_len],
            v: vec![T::zero(); param_len],
            t: 0,
            beta1: T::from_f64(beta1),
            beta2: T::from_f64(beta2),
            epsilon: T::from_f64(epsilon),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update applied to `param` in place.
///
/// Requires a populated gradient; the gradient buffer is consumed.
pub fn adam_step<T: Scalar>(
    param: &mut Matrix<T>,
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    let grad = param.grad().ok_or_else(|| Error::MissingGradient {
        path: "<unnamed>".into(),
    })?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "adam gradient".into(),
        });
    }
    assert_eq!(grad.len(), state.m.len(), "adam state shape mismatch");

    state.t += 1;
    let t = state.t as i32;
    let one = T::one();
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);

    let grad = grad.to_vec();
    for (i, g) in grad.iter().enumerate() {
        let g = *g;
        state.m[i] = state.beta1 * state.m[i] + (one - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (one - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let update = lr * m_hat / (v_hat.sqrt() + state.epsilon);
        param.data_mut()[i] -= update;
    }
    param.clear_grad();
    param.debug_assert_finite("adam step");
    Ok(())
}

/// Stepped exponential decay: `base * decay^(epoch / every)`.
pub fn lr_at(base: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    assert!(every > 0, "decay interval must be positive");
    base * decay.powi((epoch / every) as i32)
}
