//! Adam with bias correction, fixed learning rate, no weight decay.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Frozen parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if store.is_frozen(id) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.get_mut(id).data_mut();
            for (((w, g), m), v) in w.iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::vector(vec![1.0, -1.0, 0.5]));
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.step(&mut s, &[Tensor::vector(vec![3.0, -0.2, 0.0])]);
        let w = s.iter().next().unwrap().value.data().to_vec();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimises_quadratic() {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &s,
        );
        for _ in 0..2000 {
            let g = s.get(id).map(|x| 2.0 * (x - 0.5));
            opt.step(&mut s, &[g]);
        }
        for x in s.get(id).data() {
            assert!((x - 0.5).abs() < 1e-3, "{x}");
        }
    }
}
