use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]))
            .unzip();
        Self { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[&[T]],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(dim_err!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(dim_err!(
                "parameter of {} values got a gradient of {} (moments {})",
                p.len(),
                g.len(),
                m.len()
            ));
        }
    }
    state.t += 1;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(*g).zip(m).zip(v) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
