//! Adam with an inverse-square-root schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Mat;

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
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then `peak·sqrt(warmup/step)`.
/// Steps are 1-based; with no warmup the decay starts immediately.
pub fn inverse_sqrt_lr(peak: f64, warmup: u64, step: u64) -> f64 {
    let s = step.max(1) as f64;
    if warmup > 0 && step < warmup {
        peak * s / warmup as f64
    } else {
        peak * (warmup.max(1) as f64 / s).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Mat<f64>>,
    pub v: Vec<Mat<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        Self {
            cfg,
            m: store.zero_grads(),
            v: store.zero_grads(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat<f64>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::arg("gradient buffer does not match the parameter store"));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i].data, &mut self.v[i].data, &grads[i].data);
            for j in 0..p.value.data.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p.value.data[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedule_shape() {
        assert_abs_diff_eq!(inverse_sqrt_lr(1.0, 4, 1), 0.25);
        assert_abs_diff_eq!(inverse_sqrt_lr(1.0, 4, 4), 1.0);
        assert_abs_diff_eq!(inverse_sqrt_lr(1.0, 4, 16), 0.5);
        assert_abs_diff_eq!(inverse_sqrt_lr(2.0, 0, 1), 2.0);
        assert_abs_diff_eq!(inverse_sqrt_lr(2.0, 0, 4), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first update ±lr regardless of scale
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Mapper, Mat::row_vector(&[1.0, -1.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = vec![Mat::row_vector(&[1e3, -1e-3])];
        adam.step(&mut store, &g, 0.1).unwrap();
        let w = &store.value(id).data;
        assert_abs_diff_eq!(w[0], 0.9, epsilon = 1e-6);
        assert_abs_diff_eq!(w[1], -0.9, epsilon = 1e-4);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Mapper, Mat::row_vector(&[3.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..2000 {
            let w = store.value(id).data[0];
            adam.step(&mut store, &[Mat::row_vector(&[2.0 * (w - 1.0)])], 0.01).unwrap();
        }
        assert_abs_diff_eq!(store.value(id).data[0], 1.0, epsilon = 1e-2);
    }
}
