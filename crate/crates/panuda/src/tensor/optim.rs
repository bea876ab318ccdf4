//! AdamW with decoupled weight decay and the warmup + polynomial-decay
//! learning-rate schedule.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::real::Real;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 6e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AdamW<T: Real> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        let m = params.ids().map(|id| ArrayD::zeros(params.value(id).raw_dim())).collect();
        let v = params.ids().map(|id| ArrayD::zeros(params.value(id).raw_dim())).collect();
        AdamW { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i]` corresponds to `ParamId(i)`; `None` means
    /// the parameter received no gradient this step (it is still decayed).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<ArrayD<T>>], lr: f64) {
        self.step += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(self.cfg.weight_decay * lr);
        let bias1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bias2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        for id in 0..params.len() {
            let Some(g) = grads.get(id).and_then(|g| g.as_ref()) else {
                continue;
            };
            let p = params.value_mut(ParamId(id));
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mhat = *m / bias1;
                    let vhat = *v / bias2;
                    *p = *p - lr_t * mhat / (vhat.sqrt() + eps) - wd * *p;
                });
        }
    }
}

/// Linear warmup followed by polynomial decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
    pub poly_power: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, iter: u64) -> f64 {
        if self.warmup_iters > 0 && iter < self.warmup_iters {
            return self.base_lr * (iter + 1) as f64 / self.warmup_iters as f64;
        }
        let total = self.total_iters.max(self.warmup_iters + 1);
        let progress =
            (iter - self.warmup_iters) as f64 / (total - self.warmup_iters) as f64;
        self.base_lr * (1.0 - progress.min(1.0)).powf(self.poly_power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::params::Init;

    #[test]
    fn adamw_moves_against_gradient() {
        let mut params: ParamStore<f64> = ParamStore::new();
        params.add("w", Init::constant(&[2], 1.0));
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
            &params,
        );
        let g = ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0);
        opt.step(&mut params, &[Some(g)], 0.1);
        assert!(params.value(ParamId(0))[[0]] < 1.0);
    }

    #[test]
    fn schedule_warmup_and_decay() {
        let s = LrSchedule {
            base_lr: 1.0,
            warmup_iters: 10,
            total_iters: 110,
            poly_power: 1.0,
        };
        assert!((s.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(60) - 0.5).abs() < 1e-12);
        assert!(s.lr_at(109) > 0.0);
        assert!((s.lr_at(110)).abs() < 1e-12);
    }
}
