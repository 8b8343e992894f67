use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numcore::Tensor;
use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Amsgrad,
}

/// Moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Running maximum of `v`; empty for Adam.
    pub v_max: Vec<Tensor>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        OptimizerState {
            kind,
            m: zeros(),
            v: zeros(),
            v_max: if kind == OptimizerKind::Amsgrad { zeros() } else { Vec::new() },
            t: 0,
        }
    }

    /// One bias-corrected update. A non-finite gradient aborts before any
    /// parameter or moment changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<(), TrainError> {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        for (spec, g) in params.specs().iter().zip(grads) {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(spec.name.clone()));
            }
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let second = match self.kind {
                    OptimizerKind::Adam => v[k],
                    OptimizerKind::Amsgrad => {
                        let vm = &mut self.v_max[i].data_mut()[k];
                        *vm = vm.max(v[k]);
                        *vm
                    }
                };
                *w -= lr * (m[k] / c1) / ((second / c2).sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

/// Scales every gradient by `max_norm / ‖g‖₂` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.iter().map(Tensor::l2_norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
