use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamStore};
use crate::autograd::Tape;
use crate::error::{Error, Result};

/// Step decay: `lr0 · gamma^floor(epoch / period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepSchedule {
    pub lr0: f64,
    pub gamma: f64,
    pub period: usize,
    pub total_epochs: usize,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule {
            lr0: 1e-3,
            gamma: 0.1,
            period: 5,
            total_epochs: 15,
        }
    }
}

impl StepSchedule {
    pub fn lr_at_epoch(&self, epoch: i64) -> Result<f64> {
        if epoch < 0 {
            return Err(Error::contract(format!("negative epoch {epoch}")));
        }
        if epoch as usize >= self.total_epochs {
            return Err(Error::contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        let decays = epoch as usize / self.period.max(1);
        // dividing by 10^k keeps decimal rates exact where 0.1^k would not
        Ok(self.lr0 / self.gamma.recip().powi(decays as i32))
    }

    pub fn trace(&self) -> Vec<f64> {
        (0..self.total_epochs as i64)
            .map(|e| self.lr_at_epoch(e).expect("in range"))
            .collect()
    }
}

/// SGD with Polyak momentum: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Updates one parameter buffer in place. `slot` identifies its velocity.
    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) {
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, None);
        }
        let v = self.velocity[slot].get_or_insert_with(|| vec![0.0; param.len()]);
        for ((w, v), g) in param.iter_mut().zip(v.iter_mut()).zip(grad) {
            *v = self.momentum * *v + g;
            *w -= self.lr * *v;
        }
    }

    pub fn velocity(&self, slot: usize) -> Option<&[f64]> {
        self.velocity.get(slot).and_then(|v| v.as_deref())
    }

    /// Applies one step to every trainable entry of `store`, reading the
    /// gradients recorded on `tape` through `bound`.
    pub fn step(&mut self, store: &mut ParamStore, tape: &Tape, bound: &Bound) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.entries()[id.index()].trainable {
                continue;
            }
            let grad = tape.grad(bound.var(id)).ok_or_else(|| {
                Error::contract(format!("missing gradient for parameter `{}`", store.name(id)))
            })?;
            let grad = grad.to_vec();
            let entry = &mut store.entries_mut()[id.index()];
            self.update(id.index(), entry.value.data_mut(), &grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn two_momentum_steps() {
        let mut opt = SgdMomentum::new(1e-3, 0.9);
        let mut w = vec![0.0];
        opt.update(0, &mut w, &[1.0]);
        assert!((w[0] + 0.001).abs() < 1e-15);
        let before = w[0];
        opt.update(0, &mut w, &[1.0]);
        assert!((opt.velocity(0).unwrap()[0] - 1.9).abs() < 1e-15);
        assert!((w[0] - before + 0.0019).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut opt = SgdMomentum::new(1e-3, 0.9);
        let mut w = vec![0.3, -0.2];
        opt.update(0, &mut w, &[0.0, 0.0]);
        assert_eq!(w, vec![0.3, -0.2]);
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut opt = SgdMomentum::new(0.1, 0.0);
        let mut w = vec![1.0];
        for g in [0.5, -0.25, 2.0] {
            let expect = w[0] - 0.1 * g;
            opt.update(0, &mut w, &[g]);
            assert_eq!(w[0], expect);
        }
    }

    #[test]
    fn schedule_values() {
        let s = StepSchedule::default();
        assert_eq!(s.lr_at_epoch(0).unwrap(), 1e-3);
        assert!((s.lr_at_epoch(5).unwrap() - 1e-4).abs() < 1e-18);
        assert!((s.lr_at_epoch(14).unwrap() - 1e-5).abs() < 1e-19);
        assert!(s.lr_at_epoch(-1).is_err());
        assert!(s.lr_at_epoch(15).is_err());
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut store = ParamStore::new();
        store.add("lonely.weight", Tensor::ones(&[2]), true);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let err = SgdMomentum::new(0.1, 0.9)
            .step(&mut store, &tape, &bound)
            .unwrap_err();
        assert!(err.to_string().contains("lonely.weight"));
    }
}
