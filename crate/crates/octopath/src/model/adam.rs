//! Adam with bias correction over the canonical parameter tensors.

use serde::{Deserialize, Serialize};

use super::{ModelError, ModelParams, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 0.0003, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(spec: ModelSpec) -> Result<AdamState, ModelError> {
        Ok(AdamState { m: ModelParams::zeros(spec)?, v: ModelParams::zeros(spec)?, t: 0 })
    }
}

/// One Adam update in place; tensors are visited in canonical order so the
/// result is a pure function of (params, grads, state, config).
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lr = cfg.learning_rate;
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);

    let mut p_t = params.tensors_mut();
    let mut m_t = state.m.tensors_mut();
    let mut v_t = state.v.tensors_mut();
    let g_t = grads.tensors();
    for i in 0..g_t.len() {
        let g = &g_t[i].1;
        let p = &mut p_t[i].1;
        let m = &mut m_t[i].1;
        let v = &mut v_t[i].1;
        for (((pv, mv), vv), gv) in
            p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.iter())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
