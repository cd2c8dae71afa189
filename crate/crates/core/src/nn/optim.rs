use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{AtmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            peak_lr: 1e-3,
            warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Linear warmup then inverse-square-root decay, peaking at `warmup`.
pub fn scheduled_lr(peak: f64, warmup: u64, step: u64) -> f64 {
    assert!(step >= 1, "learning-rate schedule starts at step 1");
    let (n, w) = (step as f64, warmup.max(1) as f64);
    peak * (n / w).min((w / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
            config,
        }
    }

    pub fn current_lr(&self) -> f64 {
        scheduled_lr(self.config.peak_lr, self.config.warmup_steps, self.step.max(1))
    }
}

/// One Adam update at the scheduled learning rate. Frozen parameters
/// (`requires_grad == false`) are skipped. Returns the learning rate used.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState) -> Result<f64> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(AtmError::Contract(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        let p = params.get(id);
        if p.shape() != g.shape() || p.shape() != state.m[id.0].shape() {
            return Err(AtmError::Contract(format!(
                "adam: shape mismatch for {}: param {:?}, grad {:?}",
                params.name(id),
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let lr = scheduled_lr(cfg.peak_lr, cfg.warmup_steps, state.step);
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let p = params.get_mut(id);
        if !p.requires_grad() {
            continue;
        }
        let g = grads[id.0].data();
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gd = gv as f64;
            let m_new = cfg.beta1 * *mv as f64 + (1.0 - cfg.beta1) * gd;
            let v_new = cfg.beta2 * *vv as f64 + (1.0 - cfg.beta2) * gd * gd;
            *mv = m_new as f32;
            *vv = v_new as f32;
            let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + cfg.eps);
            *pv = (*pv as f64 - update) as f32;
        }
    }
    Ok(lr)
}

/// Sums per-item gradient lists in item order and multiplies by `scale`.
/// The fixed order makes the result independent of how items were computed.
pub fn reduce_gradients(per_item: Vec<Vec<Tensor>>, scale: f32) -> Vec<Tensor> {
    let mut it = per_item.into_iter();
    let Some(mut total) = it.next() else {
        return Vec::new();
    };
    for grads in it {
        for (t, g) in total.iter_mut().zip(&grads) {
            t.add_assign(g);
        }
    }
    for t in &mut total {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    total
}
