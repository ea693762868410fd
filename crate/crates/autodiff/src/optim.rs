//! Adam with bias correction. Frozen or non-trainable parameters are skipped
//! entirely, moments included, so their bits stay put.

use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)]) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);

        for (pid, g) in grads {
            {
                let p = store.get(*pid);
                if !p.trainable || p.frozen {
                    continue;
                }
                debug_assert_eq!(p.data.len(), g.len(), "grad size for {}", p.name);
            }
            let slot = pid.0;
            if self.m.len() <= slot {
                self.m.resize_with(slot + 1, || None);
                self.v.resize_with(slot + 1, || None);
            }
            let m = self.m[slot].get_or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v[slot].get_or_insert_with(|| vec![T::zero(); g.len()]);
            let data = store.data_mut(*pid);
            for i in 0..g.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
