//! Binary checkpoint holding a photo and a sketch encoder.
//!
//! Layout: magic `SBIRCKPT`, `u32` version, then per encoder a `u64`-prefixed
//! JSON config, a frozen flag byte, every parameter as a matrix record in
//! declaration order, and for batch-norm heads the running mean and variance.

use std::path::Path;

use crate::encoder::{build_encoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::io::{encode_matrix, read_file, write_file, Cursor, MATRIX_MAGIC};
use crate::norm::Mode;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SBIRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub photo: Encoder,
    pub sketch: Encoder,
}

fn encode_encoder(enc: &Encoder, out: &mut Vec<u8>) -> Result<()> {
    let cfg = serde_json::to_vec(&enc.config)?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.push(enc.frozen as u8);
    for p in enc.params() {
        encode_matrix(MATRIX_MAGIC, p, out);
    }
    if let Some(h) = &enc.head {
        encode_matrix(MATRIX_MAGIC, &h.running_mean, out);
        encode_matrix(MATRIX_MAGIC, &h.running_var, out);
        out.extend_from_slice(&h.momentum.to_le_bytes());
        out.extend_from_slice(&h.eps.to_le_bytes());
    }
    Ok(())
}

fn decode_encoder(cur: &mut Cursor<'_>, path: &Path) -> Result<Encoder> {
    let len = cur.u64()? as usize;
    let cfg: EncoderConfig = serde_json::from_slice(cur.take(len)?)?;
    let mut enc = build_encoder(&cfg, 0)?;
    let frozen = match cur.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::format(path, format!("bad frozen flag {b}"))),
    };
    for p in enc.params_mut() {
        let t = cur.matrix(MATRIX_MAGIC)?;
        if t.shape() != p.shape() {
            return Err(Error::format(path, "parameter shape does not match config"));
        }
        *p = t;
    }
    if let Some(h) = &mut enc.head {
        let mean = cur.matrix(MATRIX_MAGIC)?;
        let var = cur.matrix(MATRIX_MAGIC)?;
        if mean.shape() != h.running_mean.shape() || var.shape() != h.running_var.shape() {
            return Err(Error::format(path, "running statistics do not match config"));
        }
        h.running_mean = mean;
        h.running_var = var;
        h.momentum = cur.f64()?;
        h.eps = cur.f64()?;
        h.mode = Mode::Eval;
    }
    if frozen {
        enc.freeze();
    }
    Ok(enc)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        encode_encoder(&self.photo, &mut out)?;
        encode_encoder(&self.sketch, &mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor::new(bytes, path);
        cur.expect_magic(CHECKPOINT_MAGIC)?;
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let photo = decode_encoder(&mut cur, path)?;
        let sketch = decode_encoder(&mut cur, path)?;
        cur.finish()?;
        Ok(Checkpoint { photo, sketch })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}
