//! First-order optimizers over a subset of parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamGroup, ParamId, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive moments with decay rates 0.9 / 0.999 and eps 1e-8.
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer bound to a fixed set of parameter groups.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParameterSet, groups: &[ParamGroup]) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be finite and >= 0")));
        }
        let ids: Vec<ParamId> = params.ids().filter(|&id| groups.contains(&params.get(id).group)).collect();
        let zeros: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; params.value(id).len()]).collect();
        Ok(Self {
            kind,
            lr,
            ids,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of the bound parameters; every other parameter is left
    /// untouched regardless of its gradient.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParamGrads) -> Result<()> {
        self.t += 1;
        if self.lr == 0.0 {
            return Ok(());
        }
        let (bc1, bc2) = (1.0 - BETA1.powi(self.t as i32), 1.0 - BETA2.powi(self.t as i32));
        for (k, &id) in self.ids.iter().enumerate() {
            let g = grads.get(id).data();
            let w = params.value_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(g) {
                        *wi -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..w.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        w[i] -= self.lr * mh / (vh.sqrt() + EPS);
                    }
                }
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer step" });
            }
        }
        Ok(())
    }
}
