//! AdamW with decoupled weight decay and a linearly decaying learning rate.

use ndarray::{ArrayViewD, ArrayViewMutD, Zip};

use crate::float::Float;
use crate::nn::Parameters;

/// `lr0 * (1 - step / total_steps)`, no warmup.
pub fn lr_at(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    lr0 * (1.0 - step.min(total_steps) as f64 / total_steps as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of a single tensor at step `t >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Float>(
    mut param: ArrayViewMutD<T>,
    grad: ArrayViewD<T>,
    mut m: ArrayViewMutD<T>,
    mut v: ArrayViewMutD<T>,
    t: u64,
    lr: f64,
    decay: bool,
    cfg: &AdamWConfig,
) {
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let correction1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let correction2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::of(lr);
    let eps = T::of(cfg.eps);
    let shrink = if decay { T::one() - lr * T::of(cfg.weight_decay) } else { T::one() };
    Zip::from(&mut param)
        .and(&grad)
        .and(&mut m)
        .and(&mut v)
        .for_each(|p, &g, m, v| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p = *p * shrink - lr * m_hat / (v_hat.sqrt() + eps);
        });
}

/// Optimizer state: first and second moments per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    m: Vec<ndarray::ArrayD<T>>,
    v: Vec<ndarray::ArrayD<T>>,
    step: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new<P: Parameters<T>>(params: &P, cfg: AdamWConfig) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, _, t| m.push(ndarray::ArrayD::zeros(t.raw_dim())));
        let v = m.clone();
        Self { cfg, m, v, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Only tensors whose kind
    /// decays receive weight decay.
    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.step += 1;
        let mut grad_views = Vec::with_capacity(self.m.len());
        grads.visit("", &mut |_, _, g| grad_views.push(g));
        let mut i = 0;
        let (m, v, t, cfg) = (&mut self.m, &mut self.v, self.step, &self.cfg);
        params.visit_mut("", &mut |_, kind, p| {
            adamw_update(p, grad_views[i].view(), m[i].view_mut(), v[i].view_mut(), t, lr, kind.decays(), cfg);
            i += 1;
        });
    }
}
