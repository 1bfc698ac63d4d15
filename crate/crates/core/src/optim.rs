//! Momentum SGD with decoupled velocity state.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{GradMap, ModelParams};
use crate::tensor::Tensor;

/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`, with one velocity buffer per parameter.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &GradMap, lr: f64) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(name, _)| !grads.contains_key(*name)) {
            return Err(Error::MissingGradient(name.clone()));
        }
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let step = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + step;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
