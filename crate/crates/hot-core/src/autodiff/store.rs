//! Named parameter storage for training: values, gradient accumulators,
//! and Adam moment estimates, all keyed by parameter name so updates are
//! order-independent and deterministic.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mat::Mat;

struct Slot {
    value: Mat,
    grad: Mat,
    m: Mat,
    v: Mat,
}

/// Parameter set with per-name gradient accumulators and Adam state.
#[derive(Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Snapshot of a model's named parameters.
    pub fn from_named(params: &[(String, &Mat)]) -> Self {
        let mut store = ParamStore::new();
        for (name, m) in params {
            store.insert(name, (*m).clone());
        }
        store
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        let (r, c) = (value.rows(), value.cols());
        self.slots.insert(
            name.to_string(),
            Slot {
                value,
                grad: Mat::zeros(r, c),
                m: Mat::zeros(r, c),
                v: Mat::zeros(r, c),
            },
        );
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }

    pub fn value(&self, name: &str) -> Option<&Mat> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Mat> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            for g in slot.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Adds `scale * g` to the accumulator of `name`.
    pub fn accumulate(&mut self, name: &str, g: &Mat, scale: f64) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if (g.rows(), g.cols()) != (slot.grad.rows(), slot.grad.cols()) {
            return Err(Error::Shape(format!(
                "gradient shape {}x{} does not match parameter {name}",
                g.rows(),
                g.cols()
            )));
        }
        for (a, &b) in slot.grad.data_mut().iter_mut().zip(g.data()) {
            *a += scale * b;
        }
        Ok(())
    }

    /// One Adam update from the accumulated gradients, with bias
    /// correction. Any non-finite gradient aborts before touching state.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        for (name, slot) in &self.slots {
            if !slot.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        let t = self.step + 1;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for slot in self.slots.values_mut() {
            for i in 0..slot.value.data().len() {
                let g = slot.grad.data()[i];
                let m = beta1 * slot.m.data()[i] + (1.0 - beta1) * g;
                let v = beta2 * slot.v.data()[i] + (1.0 - beta2) * g * g;
                slot.m.data_mut()[i] = m;
                slot.v.data_mut()[i] = v;
                let mh = m / bc1;
                let vh = v / bc2;
                slot.value.data_mut()[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        self.step = t;
        Ok(())
    }

    /// Writes stored values back into a model's parameter slots; every
    /// target name must exist in the store.
    pub fn write_to(&self, targets: Vec<(String, &mut Mat)>) -> Result<()> {
        for (name, m) in targets {
            let slot = self
                .slots
                .get(&name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if (m.rows(), m.cols()) != (slot.value.rows(), slot.value.cols()) {
                return Err(Error::Shape(format!("parameter {name} changed shape")));
            }
            m.data_mut().copy_from_slice(slot.value.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Mat::from_vec(1, 1, vec![x]));
        s
    }

    #[test]
    fn adam_matches_a_handwritten_iterate() {
        // Two steps with constant gradient 0.5 on a scalar, lr 0.1.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut store = scalar_store(1.0);
        let mut x = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2u32 {
            store.zero_grads();
            store
                .accumulate("x", &Mat::from_vec(1, 1, vec![0.5]), 1.0)
                .unwrap();
            store.adam_step(lr, b1, b2, eps).unwrap();
            m = b1 * m + (1.0 - b1) * 0.5;
            v = b2 * v + (1.0 - b2) * 0.25;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!(
                (store.value("x").unwrap().get(0, 0) - x).abs() < 1e-15,
                "step {t}"
            );
        }
        assert_eq!(store.step(), 2);
    }

    #[test]
    fn first_adam_step_moves_by_roughly_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut store = scalar_store(0.0);
        store
            .accumulate("x", &Mat::from_vec(1, 1, vec![-3.0]), 1.0)
            .unwrap();
        store.adam_step(0.01, 0.9, 0.999, 1e-8).unwrap();
        let got = store.value("x").unwrap().get(0, 0);
        assert!((got - 0.01).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut store = scalar_store(2.0);
        store
            .accumulate("x", &Mat::from_vec(1, 1, vec![f64::NAN]), 1.0)
            .unwrap();
        let err = store.adam_step(0.1, 0.9, 0.999, 1e-8);
        assert!(err.is_err());
        assert_eq!(store.value("x").unwrap().get(0, 0), 2.0);
        assert_eq!(store.step(), 0);
    }

    #[test]
    fn accumulate_scales_and_sums() {
        let mut store = scalar_store(0.0);
        store
            .accumulate("x", &Mat::from_vec(1, 1, vec![2.0]), 0.25)
            .unwrap();
        store
            .accumulate("x", &Mat::from_vec(1, 1, vec![4.0]), 0.25)
            .unwrap();
        assert_eq!(store.grad("x").unwrap().get(0, 0), 1.5);
        assert!(store.accumulate("y", &Mat::zeros(1, 1), 1.0).is_err());
    }

    #[test]
    fn write_to_restores_model_parameters() {
        let mut store = ParamStore::new();
        store.insert("a", Mat::from_vec(1, 2, vec![5.0, 6.0]));
        let mut target = Mat::zeros(1, 2);
        store
            .write_to(vec![("a".to_string(), &mut target)])
            .unwrap();
        assert_eq!(target.data(), &[5.0, 6.0]);
        let mut missing = Mat::zeros(1, 1);
        assert!(store
            .write_to(vec![("b".to_string(), &mut missing)])
            .is_err());
    }
}
