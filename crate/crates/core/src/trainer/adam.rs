use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::model::{Gradients, MlpModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m_w: Vec<DMatrix<f64>>,
    v_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_b: Vec<DVector<f64>>,
}

impl AdamState {
    pub fn new(model: &MlpModel) -> Self {
        let zeros = Gradients::zeros_like(model);
        AdamState {
            step: 0,
            m_w: zeros.weights.clone(),
            v_w: zeros.weights,
            m_b: zeros.biases.clone(),
            v_b: zeros.biases,
        }
    }
}

/// One Adam update using the bias-corrected step size
/// `lr * sqrt(1 - β2^t) / (1 - β1^t)`. Masks are re-applied afterwards.
pub fn adam_step(
    model: &mut MlpModel,
    grads: &Gradients,
    state: &mut AdamState,
    config: &AdamConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let lr_t =
        config.learning_rate * (1.0 - config.beta2.powi(t)).sqrt() / (1.0 - config.beta1.powi(t));
    let (b1, b2, eps) = (config.beta1, config.beta2, config.epsilon);
    let update = |param: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *param -= lr_t * *m / (v.sqrt() + eps);
    };
    for s in 0..model.weights.len() {
        let w = model.weights[s].as_mut_slice();
        let g = grads.weights[s].as_slice();
        let m = state.m_w[s].as_mut_slice();
        let v = state.v_w[s].as_mut_slice();
        for i in 0..w.len() {
            update(&mut w[i], g[i], &mut m[i], &mut v[i]);
        }
        let b = model.biases[s].as_mut_slice();
        let g = grads.biases[s].as_slice();
        let m = state.m_b[s].as_mut_slice();
        let v = state.v_b[s].as_mut_slice();
        for i in 0..b.len() {
            update(&mut b[i], g[i], &mut m[i], &mut v[i]);
        }
    }
    model.apply_masks();
}
