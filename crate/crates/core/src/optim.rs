//! Adam and the halve-on-plateau learning-rate schedule.

use crate::error::{config_err, Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return config_err(format!("learning rate must be positive, got {lr}"));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if lr <= 0.0 || !lr.is_finite() {
            return config_err(format!("learning rate must be positive, got {lr}"));
        }
        self.lr = lr;
        Ok(())
    }

    /// One update of every unfrozen weight from its accumulated gradient.
    /// Gradients are left in place; call [`ParamStore::zero_grad`] afterwards.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.kind != ParamKind::Weight || p.frozen {
                continue;
            }
            if !p.grad.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient for '{}'",
                    p.name
                )));
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..grad.len() {
                let gj = grad[j];
                let mj = &mut m.data_mut()[j];
                *mj = b1 * *mj + (1.0 - b1) * gj;
                let mhat = *mj / bc1;
                let vj = &mut v.data_mut()[j];
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                let vhat = *vj / bc2;
                value[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Halves the learning rate whenever the monitored loss has not improved for
/// `patience` consecutive observations, never going below `floor`.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    lr: f64,
    floor: f64,
    patience: usize,
    threshold: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(initial: f64, floor: f64, patience: usize) -> Result<Self> {
        if initial <= 0.0 || floor <= 0.0 || floor > initial {
            return config_err(format!("invalid learning-rate range {initial} -> {floor}"));
        }
        if patience == 0 {
            return config_err("plateau patience must be at least 1");
        }
        Ok(Self {
            lr: initial,
            floor,
            patience,
            threshold: 1e-4,
            best: f64::INFINITY,
            stale: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records a loss and returns the (possibly reduced) learning rate.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr / 2.0).max(self.floor);
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn rejects_non_positive_lr() {
        assert!(matches!(Adam::new(0.0), Err(Error::Config(_))));
        assert!(matches!(Adam::new(-1e-3), Err(Error::Config(_))));
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut store = ParamStore::new();
        let w = store
            .register("w", Tensor::from_vec(vec![1.5, -2.0]))
            .unwrap();
        let mut adam = Adam::new(0.1).unwrap();
        for _ in 0..5 {
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.value(w).data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(0.0)).unwrap();
        store.get_mut(w).grad = Tensor::scalar(1.0);
        let mut adam = Adam::new(0.01).unwrap();
        adam.step(&mut store).unwrap();
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((store.value(w).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(0.0)).unwrap();
        let mut adam = Adam::new(0.3).unwrap();
        for _ in 0..100 {
            let grads = {
                let mut g = Graph::with_params(&store);
                let wv = g.param(w);
                let d = g.add_scalar(wv, -3.0);
                let sq = g.mul(d, d).unwrap();
                let loss = g.sum(sq);
                g.backward(loss).unwrap()
            };
            store.zero_grad();
            store.accumulate(&grads);
            adam.step(&mut store).unwrap();
        }
        let w = store.value(w).item();
        // Endpoint from an independent scripted run of the same 100 updates.
        assert!((w - 2.99118997160107).abs() < 1e-9, "{w}");
        assert!((w - 3.0).abs() < 1e-2);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let w = store.register("ae/w", Tensor::scalar(1.0)).unwrap();
        store.get_mut(w).grad = Tensor::scalar(1.0);
        store.set_frozen("ae/", true);
        let mut adam = Adam::new(0.1).unwrap();
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(w).item(), 1.0);
    }

    #[test]
    fn plateau_halves_down_to_floor() {
        let mut s = PlateauSchedule::new(1e-4, 5e-6, 2).unwrap();
        s.observe(1.0);
        for _ in 0..100 {
            s.observe(1.0);
            assert!(s.lr() >= 5e-6);
        }
        assert_eq!(s.lr(), 5e-6);
        let mut s = PlateauSchedule::new(1e-4, 5e-6, 2).unwrap();
        s.observe(1.0);
        s.observe(1.0);
        assert_eq!(s.lr(), 1e-4);
        s.observe(1.0);
        assert_eq!(s.lr(), 5e-5);
        s.observe(0.5);
        assert_eq!(s.lr(), 5e-5);
    }
}
