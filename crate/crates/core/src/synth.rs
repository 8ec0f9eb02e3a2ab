//! Deterministic synthetic photo/sketch benchmark.
//!
//! Photos are drawn around per-category centers. Each sketch is a fixed
//! random map of its photo into the sketch space, followed by coordinate
//! dropout (lost detail) and gaussian noise. A share of photos is duplicated
//! with a small perturbation to create pairs no sketch can tell apart.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, read_matrix, write_file, write_matrix, MATRIX_MAGIC};
use crate::rmac::FeatureVolume;
use crate::tensor::{sq_dist, Tensor};

/// How sketches differ from photos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainGap {
    pub projection_seed: u64,
    /// Width of the tanh layer inside the photo→sketch map; 0 keeps it linear.
    pub hidden_width: usize,
    /// Pre-activation gain of that layer.
    pub gain: f64,
    pub dropout: f64,
    pub noise_sigma: f64,
}

impl Default for DomainGap {
    fn default() -> Self {
        DomainGap {
            projection_seed: 17,
            hidden_width: 0,
            gain: 1.0,
            dropout: 0.2,
            noise_sigma: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_categories: usize,
    pub photos_per_category: usize,
    pub sketches_per_photo: usize,
    pub photo_dim: usize,
    pub sketch_dim: usize,
    /// Standard deviation of the category centers.
    pub center_sigma: f64,
    /// Standard deviation of photos around their center.
    pub within_sigma: f64,
    pub domain_gap: DomainGap,
    pub ambiguity_rate: f64,
    pub dup_sigma: f64,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_categories: 25,
            photos_per_category: 20,
            sketches_per_photo: 5,
            photo_dim: 64,
            sketch_dim: 48,
            center_sigma: 1.0,
            within_sigma: 0.5,
            domain_gap: DomainGap::default(),
            ambiguity_rate: 0.1,
            dup_sigma: 0.01,
            split_fraction: 0.9,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.n_categories == 0 || self.photos_per_category == 0 {
            return bad("need at least one category and one photo per category");
        }
        if self.photos_per_category < 2 {
            return bad("photos_per_category must be >= 2 so both splits are populated");
        }
        if self.sketches_per_photo == 0 {
            return bad("sketches_per_photo must be >= 1");
        }
        if self.photo_dim == 0 || self.sketch_dim == 0 {
            return bad("photo_dim and sketch_dim must be >= 1");
        }
        if !(0.0..1.0).contains(&self.ambiguity_rate) {
            return bad("ambiguity_rate must be in [0, 1)");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split_fraction must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.domain_gap.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        for (name, v) in [
            ("center_sigma", self.center_sigma),
            ("within_sigma", self.within_sigma),
            ("dup_sigma", self.dup_sigma),
            ("noise_sigma", self.domain_gap.noise_sigma),
            ("gain", self.domain_gap.gain),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossDomainDataset {
    pub spec: SynthSpec,
    pub photos: Tensor,
    pub sketches: Tensor,
    /// Photo index of every sketch.
    pub sketch_photo: Vec<usize>,
    pub photo_category: Vec<usize>,
    /// `true` for training photos; a photo's sketches share its split.
    pub train_mask: Vec<bool>,
    /// (source, duplicate) photo indices.
    pub ambiguous_pairs: Vec<(usize, usize)>,
}

impl CrossDomainDataset {
    pub fn n_photos(&self) -> usize {
        self.photos.rows()
    }

    pub fn n_sketches(&self) -> usize {
        self.sketches.rows()
    }

    pub fn train_photos(&self) -> Vec<usize> {
        (0..self.n_photos()).filter(|&i| self.train_mask[i]).collect()
    }

    pub fn test_photos(&self) -> Vec<usize> {
        (0..self.n_photos()).filter(|&i| !self.train_mask[i]).collect()
    }

    pub fn sketches_of(&self, photo: usize) -> Vec<usize> {
        (0..self.n_sketches())
            .filter(|&s| self.sketch_photo[s] == photo)
            .collect()
    }

    /// Sketch indices grouped by photo.
    pub fn sketch_lists(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_photos()];
        for (s, &p) in self.sketch_photo.iter().enumerate() {
            out[p].push(s);
        }
        out
    }

    pub fn train_sketches(&self) -> Vec<usize> {
        (0..self.n_sketches())
            .filter(|&s| self.train_mask[self.sketch_photo[s]])
            .collect()
    }

    pub fn test_sketches(&self) -> Vec<usize> {
        (0..self.n_sketches())
            .filter(|&s| !self.train_mask[self.sketch_photo[s]])
            .collect()
    }
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// The fixed photo→sketch map before dropout and noise.
#[derive(Clone, Debug)]
pub struct SketchProjection {
    hidden: Option<(Tensor, f64)>,
    out: Tensor,
}

impl SketchProjection {
    pub fn new(spec: &SynthSpec) -> Self {
        let gap = &spec.domain_gap;
        let mut rng = stage_rng(gap.projection_seed, 100);
        if gap.hidden_width == 0 {
            let out = gaussian_matrix(&mut rng, spec.photo_dim, spec.sketch_dim, 1.0 / (spec.photo_dim as f64).sqrt());
            SketchProjection { hidden: None, out }
        } else {
            let h = gaussian_matrix(&mut rng, spec.photo_dim, gap.hidden_width, 1.0 / (spec.photo_dim as f64).sqrt());
            let out = gaussian_matrix(
                &mut rng,
                gap.hidden_width,
                spec.sketch_dim,
                1.0 / (gap.hidden_width as f64).sqrt(),
            );
            SketchProjection {
                hidden: Some((h, gap.gain)),
                out,
            }
        }
    }

    pub fn apply(&self, photo: &[f64]) -> Vec<f64> {
        let mat_vec = |x: &[f64], m: &Tensor| -> Vec<f64> {
            let mut y = vec![0.0; m.cols()];
            for (k, &xk) in x.iter().enumerate() {
                for (j, yj) in y.iter_mut().enumerate() {
                    *yj += xk * m.get(k, j);
                }
            }
            y
        };
        match &self.hidden {
            None => mat_vec(photo, &self.out),
            Some((h, gain)) => {
                let z: Vec<f64> = mat_vec(photo, h).into_iter().map(|v| (gain * v).tanh()).collect();
                mat_vec(&z, &self.out)
            }
        }
    }
}

/// Appends `round(rate·n)` perturbed copies of distinct photos.
pub fn inject_ambiguity(photos: &Tensor, rate: f64, dup_sigma: f64, seed: u64) -> (Tensor, Vec<(usize, usize)>) {
    let n = photos.rows();
    let d = photos.cols();
    let n_dup = ((rate * n as f64).round() as usize).min(n);
    let mut rng = stage_rng(seed, 3);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut sources = order[..n_dup].to_vec();
    sources.sort_unstable();

    let mut data = photos.data().to_vec();
    let mut pairs = Vec::with_capacity(n_dup);
    for (k, &src) in sources.iter().enumerate() {
        let row: Vec<f64> = photos
            .row(src)
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + dup_sigma * z
            })
            .collect();
        data.extend_from_slice(&row);
        pairs.push((src, n + k));
    }
    (Tensor::matrix(n + n_dup, d, data).expect("sized"), pairs)
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<CrossDomainDataset> {
    spec.validate()?;
    let (nc, ppc, pd) = (spec.n_categories, spec.photos_per_category, spec.photo_dim);
    let n0 = nc * ppc;

    let mut rng = stage_rng(spec.seed, 1);
    let centers = gaussian_matrix(&mut rng, nc, pd, spec.center_sigma);
    let mut rng = stage_rng(spec.seed, 2);
    let mut base = Vec::with_capacity(n0 * pd);
    let mut category = Vec::with_capacity(n0);
    for c in 0..nc {
        for _ in 0..ppc {
            for k in 0..pd {
                let z: f64 = StandardNormal.sample(&mut rng);
                base.push(centers.get(c, k) + spec.within_sigma * z);
            }
            category.push(c);
        }
    }
    let base = Tensor::matrix(n0, pd, base)?;
    let (photos, ambiguous_pairs) = inject_ambiguity(&base, spec.ambiguity_rate, spec.dup_sigma, spec.seed);
    let n = photos.rows();
    for &(src, _) in &ambiguous_pairs {
        category.push(category[src]);
    }

    // category-stratified split over the original photos; duplicates follow
    // their source
    let mut rng = stage_rng(spec.seed, 4);
    let n_test = (((1.0 - spec.split_fraction) * ppc as f64).round() as usize).clamp(1, ppc - 1);
    let mut train_mask = vec![true; n];
    for c in 0..nc {
        let mut members: Vec<usize> = (c * ppc..(c + 1) * ppc).collect();
        members.shuffle(&mut rng);
        for &i in &members[..n_test] {
            train_mask[i] = false;
        }
    }
    for &(src, dup) in &ambiguous_pairs {
        train_mask[dup] = train_mask[src];
    }

    let projection = SketchProjection::new(spec);
    let gap = &spec.domain_gap;
    let mut rng = stage_rng(spec.seed, 5);
    let noise = Normal::new(0.0, gap.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let sd = spec.sketch_dim;
    let mut sketches = Vec::with_capacity(n * spec.sketches_per_photo * sd);
    let mut sketch_photo = Vec::with_capacity(n * spec.sketches_per_photo);
    for p in 0..n {
        let clean = projection.apply(photos.row(p));
        for _ in 0..spec.sketches_per_photo {
            for &v in &clean {
                let kept = if rng.gen::<f64>() < gap.dropout { 0.0 } else { v };
                let eps = if gap.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                sketches.push(kept + eps);
            }
            sketch_photo.push(p);
        }
    }
    let sketches = Tensor::matrix(sketch_photo.len(), sd, sketches)?;

    Ok(CrossDomainDataset {
        spec: spec.clone(),
        photos,
        sketches,
        sketch_photo,
        photo_category: category,
        train_mask,
        ambiguous_pairs,
    })
}

/// Mean (matched, mismatched) distances between sketches and the clean
/// projection of photos. Matched must be smaller for the task to be learnable.
pub fn probe_distances(ds: &CrossDomainDataset) -> (f64, f64) {
    let proj = SketchProjection::new(&ds.spec);
    let clean: Vec<Vec<f64>> = (0..ds.n_photos()).map(|p| proj.apply(ds.photos.row(p))).collect();
    let n = ds.n_photos();
    let (mut matched, mut mismatched) = (0.0, 0.0);
    for s in 0..ds.n_sketches() {
        let p = ds.sketch_photo[s];
        let other = (p + n / 2 + 1) % n;
        matched += sq_dist(ds.sketches.row(s), &clean[p]).sqrt();
        mismatched += sq_dist(ds.sketches.row(s), &clean[other]).sqrt();
    }
    let m = ds.n_sketches() as f64;
    (matched / m, mismatched / m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMapSpec {
    pub channels: usize,
    pub sizes: Vec<usize>,
    pub seed: u64,
}

/// Half-normal volumes, one per entry of `sizes`.
pub fn synth_feature_maps(spec: &FeatureMapSpec) -> Result<Vec<FeatureVolume>> {
    if spec.channels == 0 || spec.sizes.contains(&0) {
        return Err(Error::config("feature map channels and sizes must be >= 1"));
    }
    let mut rng = stage_rng(spec.seed, 6);
    spec.sizes
        .iter()
        .map(|&s| {
            let data = (0..spec.channels * s * s)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z.abs()
                })
                .collect();
            FeatureVolume::new(Tensor::new(vec![spec.channels, s, s], data)?, 0, s.to_string())
        })
        .collect()
}

/// Feature volumes rendered deterministically from a photo vector, so that
/// near-identical photos give near-identical volumes. Each channel is a
/// rectified spatial wave whose amplitude and offset are linear in the photo.
pub fn photo_feature_maps(photo: &[f64], source_id: usize, spec: &FeatureMapSpec) -> Result<Vec<FeatureVolume>> {
    let c = spec.channels;
    let d = photo.len();
    let mut rng = stage_rng(spec.seed, 7);
    let amp = gaussian_matrix(&mut rng, c, d, 1.0 / (d as f64).sqrt());
    let off = gaussian_matrix(&mut rng, c, d, 1.0 / (d as f64).sqrt());
    let waves: Vec<(f64, f64, f64)> = (0..c)
        .map(|_| (rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let dot = |m: &Tensor, ch: usize| -> f64 { m.row(ch).iter().zip(photo).map(|(a, b)| a * b).sum() };
    let coeffs: Vec<(f64, f64)> = (0..c).map(|ch| (dot(&amp, ch), dot(&off, ch))).collect();

    spec.sizes
        .iter()
        .map(|&s| {
            if s == 0 {
                return Err(Error::config("feature map sizes must be >= 1"));
            }
            let mut data = Vec::with_capacity(c * s * s);
            for (ch, &(a, b)) in coeffs.iter().enumerate() {
                let (fx, fy, phase) = waves[ch];
                for x in 0..s {
                    for y in 0..s {
                        let u = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / s as f64 + phase;
                        data.push((a * u.cos() + b).max(0.0));
                    }
                }
            }
            FeatureVolume::new(Tensor::new(vec![c, s, s], data)?, source_id, s.to_string())
        })
        .collect()
}

const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format_version: u32,
    spec: SynthSpec,
    n_photos: usize,
    n_sketches: usize,
    sketch_photo: Vec<usize>,
    photo_category: Vec<usize>,
    train_mask: Vec<bool>,
    ambiguous_pairs: Vec<(usize, usize)>,
}

impl CrossDomainDataset {
    /// Writes `header.json`, `photos.bin` and `sketches.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let header = DatasetHeader {
            format_version: DATASET_VERSION,
            spec: self.spec.clone(),
            n_photos: self.n_photos(),
            n_sketches: self.n_sketches(),
            sketch_photo: self.sketch_photo.clone(),
            photo_category: self.photo_category.clone(),
            train_mask: self.train_mask.clone(),
            ambiguous_pairs: self.ambiguous_pairs.clone(),
        };
        write_file(&dir.join("header.json"), serde_json::to_string_pretty(&header)?.as_bytes())?;
        write_matrix(&dir.join("photos.bin"), MATRIX_MAGIC, &self.photos)?;
        write_matrix(&dir.join("sketches.bin"), MATRIX_MAGIC, &self.sketches)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("header.json");
        let header: DatasetHeader = serde_json::from_slice(&read_file(&path)?)?;
        if header.format_version != DATASET_VERSION {
            return Err(Error::format(&path, format!("unsupported version {}", header.format_version)));
        }
        let photos = read_matrix(&dir.join("photos.bin"), MATRIX_MAGIC)?;
        let sketches = read_matrix(&dir.join("sketches.bin"), MATRIX_MAGIC)?;
        let consistent = photos.rows() == header.n_photos
            && sketches.rows() == header.n_sketches
            && header.sketch_photo.len() == header.n_sketches
            && header.photo_category.len() == header.n_photos
            && header.train_mask.len() == header.n_photos
            && header.sketch_photo.iter().all(|&p| p < header.n_photos);
        if !consistent {
            return Err(Error::format(&path, "header does not match tensor files"));
        }
        Ok(CrossDomainDataset {
            spec: header.spec,
            photos,
            sketches,
            sketch_photo: header.sketch_photo,
            photo_category: header.photo_category,
            train_mask: header.train_mask,
            ambiguous_pairs: header.ambiguous_pairs,
        })
    }
}
