//! Adam optimizer over a parameter store. Fully deterministic: parameters
//! update in name-sorted order and no randomness is involved.

use super::tape::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
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

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m = (0..store.len())
            .map(|id| Tensor::zeros(store.value(id).shape()))
            .collect();
        let v = (0..store.len())
            .map(|id| Tensor::zeros(store.value(id).shape()))
            .collect();
        Adam { cfg, m, v, t: 0 }
    }

    /// One update from the accumulated gradients. Does not clear them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let ids: Vec<usize> = store.sorted_ids().collect();
        for id in ids {
            let g: Vec<f64> = store.grad(id).values().to_vec();
            let m = self.m[id].values_mut();
            let v = self.v[id].values_mut();
            let w = store.value_mut(id).values_mut();
            for i in 0..g.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(&[1.5, -2.0])).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
        adam.step(&mut store);
        assert_eq!(store.value(0).values(), &[1.5, -2.0]);
    }

    #[test]
    fn single_step_moves_against_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
        let mut tape = Tape::new();
        let wn = tape.param(&store, w).unwrap();
        let loss = tape.mul(wn, wn).unwrap();
        tape.backward(loss, &mut store).unwrap();
        adam.step(&mut store);
        assert!(store.value(w).item() < 1.0);
    }

    #[test]
    fn quadratic_bowl_converges_in_two_hundred_steps() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(&[1.0, -1.3])).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), &store);
        let mut loss_val = f64::MAX;
        for _ in 0..200 {
            store.zero_grads();
            let mut tape = Tape::new();
            let wn = tape.param(&store, w).unwrap();
            let loss = tape.dot(wn, wn).unwrap();
            loss_val = tape.value(loss).item();
            tape.backward(loss, &mut store).unwrap();
            adam.step(&mut store);
        }
        assert!(loss_val < 1e-6, "final loss {loss_val}");
    }
}
