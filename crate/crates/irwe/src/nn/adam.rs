//! Adam with global gradient-norm clipping, applied to a named subset of a
//! parameter store.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{IrweError, Result};
use crate::nn::params::{ParamStore, Partition};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Default)]
pub struct Adam {
    /// First/second moment per tensor, created lazily.
    state: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
    /// Step counters per tensor (bias correction).
    steps: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new() -> Adam {
        Adam::default()
    }

    /// Clip the gradient set to global norm `CLIP_NORM`, then take one Adam
    /// step at learning rate `lr` on every named tensor. Frozen tensors are
    /// rejected; a non-finite gradient aborts naming the offending tensor.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[(String, Array2<f64>)],
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if params.partition(name) == Partition::Frozen {
                return Err(IrweError::Invalid(format!(
                    "attempted to update frozen tensor `{name}`"
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(IrweError::NonFinite(name.clone()));
            }
        }
        let total_sq: f64 = grads.iter().map(|(_, g)| g.mapv(|x| x * x).sum()).sum();
        let norm = total_sq.sqrt();
        let clip = if norm > CLIP_NORM { CLIP_NORM / norm } else { 1.0 };
        for (name, g) in grads {
            let t = {
                let c = self.steps.entry(name.clone()).or_insert(0);
                *c += 1;
                *c
            };
            let dim = g.dim();
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (Array2::zeros(dim), Array2::zeros(dim)));
            let gc = g * clip;
            *m = &*m * BETA1 + &gc * (1.0 - BETA1);
            *v = &*v * BETA2 + &gc.mapv(|x| x * x) * (1.0 - BETA2);
            let mhat = &*m / (1.0 - BETA1.powi(t as i32));
            let vhat = &*v / (1.0 - BETA2.powi(t as i32));
            let update = &mhat / &(vhat.mapv(f64::sqrt) + EPS);
            let p = params.get_mut(name);
            *p -= &(update * lr);
        }
        params.check_finite()
    }
}
