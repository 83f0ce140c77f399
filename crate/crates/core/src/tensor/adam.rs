use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{dim, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<S>>, config: AdamConfig) -> Self {
        let first: Vec<Vec<S>> = params.into_iter().map(|p| vec![S::zero(); p.len()]).collect();
        let second = first.clone();
        Self {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Parameters without a gradient buffer are
/// treated as having zero gradient. Gradients are consumed (reset to `None`).
pub fn adam_step<S: Scalar>(params: &mut [&mut Tensor<S>], state: &mut AdamState<S>, lr: f64) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(dim(format!(
            "optimizer tracks {} tensors, got {}",
            state.first.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.first[i].len() != p.len() {
            return Err(dim(format!(
                "parameter {i} has {} values, moments have {}",
                p.len(),
                state.first[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (S::of(beta1), S::of(beta2));
    let (one_b1, one_b2) = (S::of(1.0 - beta1), S::of(1.0 - beta2));
    let step_size = S::of(lr / bc1);
    let bc2_sqrt = S::of(bc2.sqrt());
    let eps = S::of(eps);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = p.take_grad() else { continue };
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + one_b1 * gv;
            *vv = b2 * *vv + one_b2 * gv * gv;
            *w -= step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}
