//! Embedding heads: per-domain batch normalization and l2 normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, SQRT_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

/// Batch normalization over the embedding dimension.
///
/// Normalization uses the biased batch variance; the running variance is
/// updated with that same biased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormHead {
    pub dim: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    pub mode: Mode,
}

impl BatchNormHead {
    pub fn new(dim: usize) -> Self {
        BatchNormHead {
            dim,
            gamma: Tensor::full(&[1, dim], 1.0),
            beta: Tensor::zeros(&[1, dim]),
            running_mean: Tensor::zeros(&[1, dim]),
            running_var: Tensor::full(&[1, dim], 1.0),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_BN_EPS,
            mode: Mode::Train,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    /// Records the head on `tape` with `gamma`/`beta` already bound as vars.
    /// In train mode the running statistics are updated from the batch.
    pub fn forward_on_tape(&mut self, tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.check_input(tape, x)?;
        if self.mode == Mode::Eval {
            return self.eval_on_tape(tape, x, gamma, beta);
        }
        if n < 2 {
            return Err(Error::arg(format!("train-mode batch norm needs at least 2 rows, got {n}")));
        }
        let sum = tape.sum_cols(x)?;
        let mean = tape.scale(sum, 1.0 / n as f64)?;
        let neg_mean = tape.scale(mean, -1.0)?;
        let centered = tape.add_row(x, neg_mean)?;
        let sq = tape.square(centered)?;
        let sq_sum = tape.sum_cols(sq)?;
        let var = tape.scale(sq_sum, 1.0 / n as f64)?;
        let shifted = tape.add_scalar(var, self.eps)?;
        let std = tape.sqrt(shifted, SQRT_EPS)?;
        let inv = tape.recip(std)?;

        let m = self.momentum;
        let (bm, bv) = (tape.value(mean).clone(), tape.value(var).clone());
        self.running_mean = self.running_mean.zip_map(&bm, |r, b| (1.0 - m) * r + m * b);
        self.running_var = self.running_var.zip_map(&bv, |r, b| (1.0 - m) * r + m * b);

        let xhat = tape.mul_row(centered, inv)?;
        let scaled = tape.mul_row(xhat, gamma)?;
        tape.add_row(scaled, beta)
    }

    /// Normalizes with the running statistics regardless of `mode`.
    pub fn eval_on_tape(&self, tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let neg_mean = tape.constant(self.running_mean.map(|v| -v))?;
        let eps = self.eps;
        let inv = tape.constant(self.running_var.map(|v| 1.0 / (v + eps).sqrt()))?;
        let centered = tape.add_row(x, neg_mean)?;
        let xhat = tape.mul_row(centered, inv)?;
        let scaled = tape.mul_row(xhat, gamma)?;
        tape.add_row(scaled, beta)
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<usize> {
        let xv = tape.value(x);
        if xv.shape().len() != 2 || xv.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: xv.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        Ok(xv.rows())
    }

    /// Applies the head outside of any training step.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let xv = t.constant(x.clone())?;
        let g = t.constant(self.gamma.clone())?;
        let b = t.constant(self.beta.clone())?;
        let y = self.forward_on_tape(&mut t, xv, g, b)?;
        Ok(t.value(y).clone())
    }
}

/// Row-wise l2 normalization; all-zero rows stay zero.
pub fn l2_normalize_on_tape(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.square(x)?;
    let sums = tape.sum_rows(sq)?;
    let norms = tape.sqrt(sums, SQRT_EPS)?;
    let guarded = tape.clamp_min(norms, 1e-12)?;
    let inv = tape.recip(guarded)?;
    tape.mul_col(x, inv)
}

pub fn l2_normalize(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}
