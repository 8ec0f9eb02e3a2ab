//! MLP encoders of configurable capacity with an optional embedding head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::norm::{l2_normalize_on_tape, BatchNormHead, Mode};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    #[default]
    Batchnorm,
    L2,
    None,
}

pub const DEFAULT_EMBEDDING_DIM: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default)]
    pub capacity_tag: String,
}

fn default_embedding_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

/// Hidden widths of the default capacity ladder.
pub fn ladder_hidden_dims(tag: &str) -> Option<Vec<usize>> {
    match tag {
        "tiny" => Some(vec![64]),
        "small" => Some(vec![128, 128]),
        "base" => Some(vec![256, 256]),
        "large" => Some(vec![512, 512, 512]),
        _ => None,
    }
}

impl EncoderConfig {
    /// A config from the capacity ladder (`tiny`, `small`, `base`, `large`).
    pub fn ladder(tag: &str, input_dim: usize, embedding_dim: usize, head: HeadKind) -> Result<Self> {
        let hidden_dims =
            ladder_hidden_dims(tag).ok_or_else(|| Error::config(format!("unknown capacity tag {tag:?}")))?;
        Ok(EncoderConfig {
            input_dim,
            hidden_dims,
            embedding_dim,
            head,
            capacity_tag: tag.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::config("encoder input_dim and embedding_dim must be >= 1"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::config("encoder hidden_dims must be non-empty and positive"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.embedding_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// in × out
    pub weight: Tensor,
    /// 1 × out
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<Linear>,
    pub head: Option<BatchNormHead>,
    pub frozen: bool,
}

/// Parameter vars of one encoder recorded on a tape, in declaration order.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    weights: Vec<Var>,
    biases: Vec<Var>,
    gamma: Option<Var>,
    beta: Option<Var>,
}

impl BoundEncoder {
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.weights.len() * 2 + 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(*w);
            out.push(*b);
        }
        out.extend(self.gamma);
        out.extend(self.beta);
        out
    }
}

/// Deterministic fan-in-scaled uniform initialization.
pub fn build_encoder(cfg: &EncoderConfig, seed: u64) -> Result<Encoder> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = cfg
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            Ok(Linear {
                weight: Tensor::matrix(fan_in, fan_out, w)?,
                bias: Tensor::matrix(1, fan_out, b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let head = (cfg.head == HeadKind::Batchnorm).then(|| BatchNormHead::new(cfg.embedding_dim));
    Ok(Encoder {
        config: cfg.clone(),
        layers,
        head,
        frozen: false,
    })
}

impl Encoder {
    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        if let Some(h) = &mut self.head {
            h.mode = Mode::Eval;
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        if let Some(h) = &self.head {
            out.push(&h.gamma);
            out.push(&h.beta);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(h) = &mut self.head {
            out.push(&mut h.gamma);
            out.push(&mut h.beta);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// SHA-256 over parameters and running statistics.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        if let Some(head) = &self.head {
            for v in head.running_mean.data().iter().chain(head.running_var.data()) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Records the parameters on `tape`; frozen encoders record constants.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundEncoder> {
        let trainable = !self.frozen;
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            weights.push(tape.leaf(l.weight.clone(), trainable)?);
            biases.push(tape.leaf(l.bias.clone(), trainable)?);
        }
        let (gamma, beta) = match &self.head {
            Some(h) => (
                Some(tape.leaf(h.gamma.clone(), trainable)?),
                Some(tape.leaf(h.beta.clone(), trainable)?),
            ),
            None => (None, None),
        };
        Ok(BoundEncoder {
            weights,
            biases,
            gamma,
            beta,
        })
    }

    fn trunk(&self, tape: &mut Tape, bound: &BoundEncoder, x: Var) -> Result<Var> {
        let xv = tape.value(x);
        if xv.shape().len() != 2 || xv.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: xv.shape().to_vec(),
                rhs: vec![self.config.input_dim],
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, (&w, &b)) in bound.weights.iter().zip(&bound.biases).enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = if k < last { tape.relu(z)? } else { z };
        }
        Ok(h)
    }

    /// Forward pass. Train mode updates batch-norm running statistics unless
    /// the encoder is frozen, in which case the running statistics are used.
    pub fn forward(&mut self, tape: &mut Tape, bound: &BoundEncoder, x: Var, mode: Mode) -> Result<Var> {
        let h = self.trunk(tape, bound, x)?;
        let frozen = self.frozen;
        match self.config.head {
            HeadKind::None => Ok(h),
            HeadKind::L2 => l2_normalize_on_tape(tape, h),
            HeadKind::Batchnorm => {
                let head = self.head.as_mut().expect("batchnorm head present");
                let (g, b) = (bound.gamma.expect("gamma bound"), bound.beta.expect("beta bound"));
                if frozen || mode == Mode::Eval {
                    head.eval_on_tape(tape, h, g, b)
                } else {
                    head.mode = Mode::Train;
                    head.forward_on_tape(tape, h, g, b)
                }
            }
        }
    }

    /// Eval-mode forward on a private tape.
    pub fn forward_eval(&self, tape: &mut Tape, bound: &BoundEncoder, x: Var) -> Result<Var> {
        let h = self.trunk(tape, bound, x)?;
        match self.config.head {
            HeadKind::None => Ok(h),
            HeadKind::L2 => l2_normalize_on_tape(tape, h),
            HeadKind::Batchnorm => {
                let head = self.head.as_ref().expect("batchnorm head present");
                head.eval_on_tape(tape, h, bound.gamma.expect("gamma bound"), bound.beta.expect("beta bound"))
            }
        }
    }

    /// Encodes a batch outside of training.
    pub fn encode_batch(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut t = Tape::new();
        let bound = self.bind(&mut t)?;
        let xv = t.constant(x.clone())?;
        let y = self.forward(&mut t, &bound, xv, mode)?;
        Ok(t.value(y).clone())
    }

    /// Eval-mode embeddings, chunked so large inputs keep tapes small.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 512;
        let n = x.rows();
        let mut data = Vec::with_capacity(n * self.embedding_dim());
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut t = Tape::new();
            let bound = self.bind_constants(&mut t)?;
            let xv = t.constant(x.select_rows(&idx))?;
            let y = self.forward_eval(&mut t, &bound, xv)?;
            data.extend_from_slice(t.value(y).data());
            start = end;
        }
        if n == 0 && x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        Tensor::matrix(n, self.embedding_dim(), data)
    }

    fn bind_constants(&self, tape: &mut Tape) -> Result<BoundEncoder> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in &self.layers {
            weights.push(tape.constant(l.weight.clone())?);
            biases.push(tape.constant(l.bias.clone())?);
        }
        let (gamma, beta) = match &self.head {
            Some(h) => (Some(tape.constant(h.gamma.clone())?), Some(tape.constant(h.beta.clone())?)),
            None => (None, None),
        };
        Ok(BoundEncoder {
            weights,
            biases,
            gamma,
            beta,
        })
    }
}
