//! Bias-corrected Adam and the step-halving learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step over parallel lists of parameters and gradients.
pub fn adam_update(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "Adam got {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape != g.shape || p.shape != m.shape {
            return Err(Error::contract(format!(
                "Adam shape mismatch: param {:?}, grad {:?}",
                p.shape, g.shape
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[k].data;
        let v = &mut state.v[k].data;
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p.data[i] -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Fractions of training after which the rate is halved.
pub fn halving_milestones(halvings: usize) -> Vec<f64> {
    if halvings == 4 {
        vec![0.4, 0.6, 0.8, 0.9]
    } else {
        (1..=halvings)
            .map(|k| k as f64 / (halvings + 1) as f64)
            .collect()
    }
}

/// Learning rate at `step` of `total_steps`.
pub fn scheduled_lr(base: f64, halvings: usize, step: usize, total_steps: usize) -> f64 {
    let progress = step as f64 / total_steps.max(1) as f64;
    let passed = halving_milestones(halvings)
        .iter()
        .filter(|&&m| progress >= m)
        .count();
    base * 0.5f64.powi(passed as i32)
}
