//! Adam and plain SGD over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected adam|sgd)"
            ))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(dims: &[usize]) -> Self {
        OptimizerState {
            m: Tensor::zeros(dims),
            v: Tensor::zeros(dims),
            step: 0,
        }
    }
}

/// One optimizer step on a single tensor. Non-finite gradients abort the step
/// without touching `weights` or `state`.
pub fn optimizer_step(weights: &mut Tensor, grad: &Tensor, state: &mut OptimizerState, hyper: &Hyper) -> Result<()> {
    if !weights.same_dims(grad) || !weights.same_dims(&state.m) || !weights.same_dims(&state.v) {
        return Err(Error::shape(format!(
            "optimizer dims disagree: weights {:?}, grad {:?}, moments {:?}",
            weights.dims(),
            grad.dims(),
            state.m.dims()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite gradient entry; step aborted".into()));
    }
    match hyper.kind {
        OptimizerKind::Sgd => {
            weights.axpy(-hyper.lr, grad);
            state.step += 1;
        }
        OptimizerKind::Adam => {
            state.step += 1;
            let t = state.step as i32;
            let bc1 = 1.0 - hyper.beta1.powi(t);
            let bc2 = 1.0 - hyper.beta2.powi(t);
            let w = weights.data_mut();
            let m = state.m.data_mut();
            let v = state.v.data_mut();
            for i in 0..w.len() {
                let g = grad.data()[i];
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
            }
        }
    }
    Ok(())
}

/// Optimizer over a set of named parameters, creating moment buffers lazily.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub hyper: Hyper,
    states: BTreeMap<String, OptimizerState>,
}

impl Optimizer {
    pub fn new(hyper: Hyper) -> Self {
        Optimizer {
            hyper,
            states: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, weights: &mut Tensor, grad: &Tensor) -> Result<()> {
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| OptimizerState::new(weights.dims()));
        optimizer_step(weights, grad, state, &self.hyper)
    }
}
