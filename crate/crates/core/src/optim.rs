//! First-order optimizers over a list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers, created lazily on the first step.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            ..Default::default()
        }
    }
}

/// One update of every parameter in place. Adam uses bias-corrected moments.
pub fn optimizer_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::arg(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "optimizer_step" });
        }
    }
    state.step += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
        }
        OptimizerKind::Adam => {
            if state.m.is_empty() {
                state.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                state.v = state.m.clone();
            } else if state.m.len() != grads.len() {
                return Err(Error::arg("optimizer state belongs to a different parameter list"));
            }
            let t = state.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let m = state.m[k].data_mut();
                let v = state.v[k].data_mut();
                for (i, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * d;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * d * d;
                    *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}
