//! Regional maximum activation (RMAC) descriptors over C×W×H feature volumes
//! and the ambiguous-pair audit built on them.
//!
//! Region grid: at scale `l` the square side is `round(2·min(W,H)/(l+1))`
//! clamped to `[1, min(W,H)]`, the stride is `max(1, round(0.6·k_w))` with
//! `k_w` the unrounded side, and a last window is snapped to the far edge when
//! the regular steps stop short of it. Duplicate squares across scales are
//! dropped. No PCA-whitening is applied.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// Shape `[C, W, H]`.
    pub data: Tensor,
    pub source_id: usize,
    pub resolution_tag: String,
}

impl FeatureVolume {
    pub fn new(data: Tensor, source_id: usize, resolution_tag: impl Into<String>) -> Result<Self> {
        let &[c, w, h] = data.shape() else {
            return Err(Error::arg(format!("feature volume must be 3-D, got {:?}", data.shape())));
        };
        if c == 0 || w == 0 || h == 0 {
            return Err(Error::arg("feature volume dimensions must be >= 1"));
        }
        Ok(FeatureVolume {
            channels: c,
            width: w,
            height: h,
            data,
            source_id,
            resolution_tag: resolution_tag.into(),
        })
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data.data()[(c * self.width + x) * self.height + y]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionGrid {
    pub regions: Vec<Region>,
    pub scales_used: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Max,
    /// `Σ x^α` over the region, per channel.
    AlphaSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmacConfig {
    pub levels: usize,
    pub stride_fraction: f64,
    pub pooling: Pooling,
    pub alpha: f64,
    pub resolutions: Vec<String>,
}

impl Default for RmacConfig {
    fn default() -> Self {
        RmacConfig {
            levels: 3,
            stride_fraction: 0.6,
            pooling: Pooling::Max,
            alpha: 10.0,
            resolutions: vec!["384".into(), "512".into(), "768".into()],
        }
    }
}

impl RmacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("rmac levels must be >= 1"));
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return Err(Error::config("rmac stride_fraction must be in (0, 1]"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("rmac alpha must be > 0"));
        }
        Ok(())
    }
}

/// Per-channel global spatial maximum.
pub fn mac(fv: &FeatureVolume) -> Vec<f64> {
    pool_window(fv, 0, 0, fv.width, fv.height, Pooling::Max, 0.0)
}

fn positions(extent: usize, side: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 0;
    while p + side <= extent {
        out.push(p);
        p += stride;
    }
    let last = *out.last().expect("side <= extent");
    if last + side < extent {
        out.push(extent - side);
    }
    out
}

pub fn region_grid(width: usize, height: usize, cfg: &RmacConfig) -> Result<RegionGrid> {
    cfg.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::arg("region grid needs width and height >= 1"));
    }
    let min_dim = width.min(height);
    let mut seen = BTreeSet::new();
    let mut regions = Vec::new();
    for l in 1..=cfg.levels {
        let kw = 2.0 * min_dim as f64 / (l as f64 + 1.0);
        let side = (kw.round() as usize).clamp(1, min_dim);
        let stride = ((cfg.stride_fraction * kw).round() as usize).max(1);
        for &x0 in &positions(width, side, stride) {
            for &y0 in &positions(height, side, stride) {
                let r = Region { x0, y0, side };
                if seen.insert(r) {
                    regions.push(r);
                }
            }
        }
    }
    Ok(RegionGrid {
        regions,
        scales_used: cfg.levels,
    })
}

fn pool_window(fv: &FeatureVolume, x0: usize, y0: usize, w: usize, h: usize, pooling: Pooling, alpha: f64) -> Vec<f64> {
    (0..fv.channels)
        .map(|c| {
            let mut acc = match pooling {
                Pooling::Max => f64::NEG_INFINITY,
                Pooling::AlphaSum => 0.0,
            };
            for x in x0..x0 + w {
                for y in y0..y0 + h {
                    let v = fv.at(c, x, y);
                    match pooling {
                        Pooling::Max => acc = acc.max(v),
                        Pooling::AlphaSum => acc += v.powf(alpha),
                    }
                }
            }
            acc
        })
        .collect()
}

pub fn pool(fv: &FeatureVolume, r: Region, cfg: &RmacConfig) -> Vec<f64> {
    pool_window(fv, r.x0, r.y0, r.side, r.side, cfg.pooling, cfg.alpha)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Sum of l2-normalized region vectors, l2-normalized.
pub fn rmac_descriptor(fv: &FeatureVolume, cfg: &RmacConfig) -> Result<Vec<f64>> {
    let grid = region_grid(fv.width, fv.height, cfg)?;
    let mut acc = vec![0.0; fv.channels];
    for r in grid.regions {
        let mut v = pool(fv, r, cfg);
        normalize(&mut v);
        acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
    }
    normalize(&mut acc);
    Ok(acc)
}

/// Aggregates descriptors of one photo computed at several input resolutions.
pub fn multires_rmac(volumes: &[FeatureVolume], cfg: &RmacConfig) -> Result<Vec<f64>> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::arg("multi-resolution RMAC needs at least one volume"))?;
    if let Some(bad) = volumes.iter().find(|v| v.channels != first.channels) {
        return Err(Error::ShapeMismatch {
            op: "multires_rmac",
            lhs: vec![first.channels],
            rhs: vec![bad.channels],
        });
    }
    let mut acc = vec![0.0; first.channels];
    for v in volumes {
        let d = rmac_descriptor(v, cfg)?;
        acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
    }
    normalize(&mut acc);
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmbiguousPair {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
}

/// The `top_k` closest unordered pairs of descriptor rows by euclidean
/// distance, ties broken by `(i, j)`.
pub fn find_ambiguous_pairs(descriptors: &Tensor, top_k: usize) -> Result<Vec<AmbiguousPair>> {
    if descriptors.shape().len() != 2 || descriptors.rows() < 2 {
        return Err(Error::arg("ambiguous-pair search needs at least two descriptors"));
    }
    if top_k == 0 {
        return Err(Error::arg("top_k must be >= 1"));
    }
    let n = descriptors.rows();
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(AmbiguousPair {
                i,
                j,
                distance: sq_dist(descriptors.row(i), descriptors.row(j)).sqrt(),
            });
        }
    }
    let order = |a: &AmbiguousPair, b: &AmbiguousPair| -> Ordering {
        a.distance
            .total_cmp(&b.distance)
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    };
    let k = top_k.min(pairs.len());
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k - 1, order);
        pairs.truncate(k);
    }
    pairs.sort_by(order);
    Ok(pairs)
}
