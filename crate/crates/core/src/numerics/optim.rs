use serde::{Deserialize, Serialize};

use super::{ensure_finite, RealArray};
use crate::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
        }
    }
}

/// One bias-corrected Adam descent step on `params`.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![state.first_moment.len()],
            actual: vec![params.len(), grads.len()],
        });
    }
    ensure_finite(grads, "adam gradient")?;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let step_size = learning_rate / c1;
    for i in 0..params.len() {
        let g = grads[i];
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params[i] -= step_size * m / ((v / c2).sqrt() + eps);
    }
    Ok(())
}

/// `target <- (1 - tau) * target + tau * online`.
pub fn polyak_update(target: &mut [f64], online: &[f64], tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("polyak rate {tau} outside [0, 1]")));
    }
    if target.len() != online.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![target.len()],
            actual: vec![online.len()],
        });
    }
    if tau == 1.0 {
        target.copy_from_slice(online);
    } else if tau > 0.0 {
        for (t, o) in target.iter_mut().zip(online) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
    Ok(())
}

/// Rescales `g` onto the unit ball if its 2-norm exceeds 1.
pub fn clip_to_unit_norm(g: &[f64]) -> Result<Vec<f64>> {
    let mut out = g.to_vec();
    clip_in_place(&mut out)?;
    Ok(out)
}

fn clip_in_place(g: &mut [f64]) -> Result<()> {
    ensure_finite(g, "gradient to clip")?;
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1.0 {
        for v in g.iter_mut() {
            *v /= norm;
        }
    }
    Ok(())
}

/// Applies [`clip_to_unit_norm`] independently to every row of a batch.
pub fn clip_rows_to_unit_norm(g: &mut RealArray) -> Result<()> {
    for r in 0..g.rows() {
        clip_in_place(g.row_mut(r))?;
    }
    Ok(())
}
