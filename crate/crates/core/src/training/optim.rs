use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::nn::{Matrix, ParamStore, Scalar};

/// Learning rate after `step` updates out of `total_steps`: a linear ramp
/// from zero over the warmup steps, then half-cosine decay to zero.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    lr_at_continuous(step.min(total_steps) as f64, total_steps, config)
}

/// [`lr_at`] extended to fractional steps.
pub fn lr_at_continuous(step: f64, total_steps: usize, config: &TrainConfig) -> f64 {
    let base = config.learning_rate;
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = config.warmup_steps(total_steps) as f64;
    if step < warmup {
        return base * step / warmup;
    }
    let total = total_steps as f64;
    if warmup >= total {
        return base;
    }
    let progress = ((step - warmup) / (total - warmup)).min(1.0);
    base * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn matches<T: Scalar>(&self, store: &ParamStore<T>) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(&self.m)
                .zip(&self.v)
                .all(|(((_, p), m), v)| m.len() == p.value.len() && v.len() == p.value.len())
    }

    /// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)` for every trainable parameter.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Matrix<T>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if store.get(id).frozen {
                continue;
            }
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let g = grads[k].data();
            for (i, p) in store.value_mut(id).data_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p = T::of(p.as_f64() * decay - lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
    }
}
