use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments of one parameter and the number of updates it has seen.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

/// Optimizer state, indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub slots: Vec<Option<Moments>>,
}

impl OptimState {
    pub fn new(config: AdamConfig, params: usize) -> Self {
        Self { config, slots: vec![None; params] }
    }

    /// Bias-corrected Adam update of every trainable parameter that has a
    /// gradient in `grads`. Parameters of frozen groups are never touched.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &GradBuffer, lr: f64) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (index, grad) in grads.slots.iter().enumerate() {
            let Some(g) = grad else { continue };
            let id = ParamId(index);
            if !store.is_trainable(store.param(id).group) {
                continue;
            }
            let value = store.value(id);
            if value.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: parameter {:?}, gradient {:?}", store.param(id).name, value.shape(), g.shape()),
                ));
            }
            let slot = self.slots[index].get_or_insert_with(|| Moments {
                step: 0,
                m: Tensor::zeros(value.shape()),
                v: Tensor::zeros(value.shape()),
            });
            slot.step += 1;
            let c1 = 1.0 - beta1.powi(slot.step as i32);
            let c2 = 1.0 - beta2.powi(slot.step as i32);
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            let p = store.value_mut(id).data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Sum of per-sample gradients over a batch.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    slots: Vec<Option<Tensor>>,
}

impl GradBuffer {
    pub fn new(params: usize) -> Self {
        Self { slots: vec![None; params] }
    }

    pub fn add(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            match &mut self.slots[id.index()] {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::shape("grad_accumulate", format!("{:?} vs {:?}", acc.shape(), g.shape())));
                    }
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Inserts a gradient directly (used by tests and tools).
    pub fn set(&mut self, id: ParamId, g: Tensor) {
        self.slots[id.index()] = Some(g);
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots[id.index()].as_ref()
    }
}
