//! Training objectives: pairwise distances, the classic triplet-loss matrix,
//! the relative triplet loss (RTL), distillation losses and the
//! double-guidance composite.
//!
//! Batches are aligned by row: sketch `i` depicts photo `i`. Photos act as
//! anchors, the matching sketch is the positive and every other sketch in the
//! batch is a negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Tape, Tensor, Var, SQRT_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Sum,
    /// Sum divided by the number of strictly positive entries.
    MeanOverNonzero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RtlConfig {
    pub margin: f64,
    pub distance: Distance,
    pub reduction: Reduction,
    pub max_guard_eps: f64,
    /// Treat the photo-photo weighting matrix as a constant. Without this the
    /// photo encoder can lower the loss by shrinking photo-photo distances.
    pub detach_weighting: bool,
}

impl Default for RtlConfig {
    fn default() -> Self {
        RtlConfig {
            margin: 3.0,
            distance: Distance::Euclidean,
            reduction: Reduction::Sum,
            max_guard_eps: 1e-8,
            detach_weighting: true,
        }
    }
}

impl RtlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.max_guard_eps > 0.0) {
            return Err(Error::config(format!(
                "max_guard_eps must be > 0, got {}",
                self.max_guard_eps
            )));
        }
        Ok(())
    }
}

/// Values of every intermediate of a triplet-style loss on one batch.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub loss: f64,
    /// bs×1 anchor-positive distances.
    pub dist_ap: Tensor,
    /// bs×bs anchor-to-every-sketch distances; the diagonal equals `dist_ap`.
    pub dist_an: Tensor,
    pub tl_matrix: Tensor,
    pub w_matrix: Tensor,
    pub rtl_matrix: Tensor,
}

/// Tape handles of a triplet-style loss.
#[derive(Clone, Copy, Debug)]
pub struct TripletVars {
    pub loss: Var,
    pub dist: Var,
    pub dist_ap: Var,
    pub tl_matrix: Var,
    pub w_matrix: Option<Var>,
    pub weighted: Var,
}

pub fn pairwise_distance(tape: &mut Tape, a: Var, b: Var, distance: Distance) -> Result<Var> {
    let sq = tape.pairwise_sq_dist(a, b)?;
    match distance {
        Distance::SquaredEuclidean => Ok(sq),
        Distance::Euclidean => tape.sqrt(sq, SQRT_EPS),
    }
}

/// n×m matrix of distances between the rows of `a` and `b`.
pub fn pairwise_distance_matrix(a: &Tensor, b: &Tensor, distance: Distance) -> Result<Tensor> {
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a.clone())?, t.constant(b.clone())?);
    let d = pairwise_distance(&mut t, av, bv, distance)?;
    Ok(t.value(d).clone())
}

fn check_batch(tape: &Tape, photo: Var, sketch: Var) -> Result<usize> {
    let (p, s) = (tape.value(photo), tape.value(sketch));
    if p.shape().len() != 2 || p.shape() != s.shape() {
        return Err(Error::ShapeMismatch {
            op: "triplet_loss",
            lhs: p.shape().to_vec(),
            rhs: s.shape().to_vec(),
        });
    }
    let bs = p.rows();
    if bs < 2 {
        return Err(Error::arg(format!("triplet losses need a batch of at least 2, got {bs}")));
    }
    Ok(bs)
}

/// `D(P, P) / max(max D(P, P), eps)`.
pub fn weighting_on_tape(tape: &mut Tape, photo: Var, cfg: &RtlConfig) -> Result<Var> {
    let photo = if cfg.detach_weighting && tape.requires_grad(photo) {
        let v = tape.value(photo).clone();
        tape.constant(v)?
    } else {
        photo
    };
    let m = pairwise_distance(tape, photo, photo, cfg.distance)?;
    let top = tape.max(m)?;
    let guarded = tape.clamp_min(top, cfg.max_guard_eps)?;
    tape.div_by(m, guarded)
}

fn reduce(tape: &mut Tape, matrix: Var, reduction: Reduction) -> Result<Var> {
    let total = tape.sum(matrix)?;
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::MeanOverNonzero => {
            let count = tape.value(matrix).data().iter().filter(|&&v| v > 0.0).count();
            tape.div_scalar(total, count.max(1) as f64)
        }
    }
}

/// Records the (relative) triplet loss. With `weighted == false` the
/// weighting matrix is omitted and the classic triplet loss results.
pub fn triplet_on_tape(tape: &mut Tape, photo: Var, sketch: Var, cfg: &RtlConfig, weighted: bool) -> Result<TripletVars> {
    cfg.validate()?;
    let bs = check_batch(tape, photo, sketch)?;

    let dist = pairwise_distance(tape, photo, sketch, cfg.distance)?;
    let dist_ap = tape.diag(dist)?;
    let neg = tape.scale(dist, -1.0)?;
    let hinge = tape.add_col(neg, dist_ap)?;
    let hinge = tape.add_scalar(hinge, cfg.margin)?;
    let tl_raw = tape.relu(hinge)?;
    let off_diag = Tensor::full(&[bs, bs], 1.0).zip_map(&Tensor::identity(bs), |a, b| a - b);
    let off_diag = tape.constant(off_diag)?;
    let tl_matrix = tape.mul(tl_raw, off_diag)?;

    let (w_matrix, weighted_matrix) = if weighted {
        let w = weighting_on_tape(tape, photo, cfg)?;
        (Some(w), tape.mul(tl_matrix, w)?)
    } else {
        (None, tl_matrix)
    };
    let loss = reduce(tape, weighted_matrix, cfg.reduction)?;
    Ok(TripletVars {
        loss,
        dist,
        dist_ap,
        tl_matrix,
        w_matrix,
        weighted: weighted_matrix,
    })
}

fn report(tape: &Tape, vars: &TripletVars) -> LossReport {
    let bs = tape.value(vars.dist).rows();
    LossReport {
        loss: tape.value(vars.loss).item(),
        dist_ap: tape.value(vars.dist_ap).clone(),
        dist_an: tape.value(vars.dist).clone(),
        tl_matrix: tape.value(vars.tl_matrix).clone(),
        w_matrix: vars
            .w_matrix
            .map_or_else(|| Tensor::full(&[bs, bs], 1.0), |w| tape.value(w).clone()),
        rtl_matrix: tape.value(vars.weighted).clone(),
    }
}

fn run_report(photo: &Tensor, sketch: &Tensor, cfg: &RtlConfig, weighted: bool) -> Result<LossReport> {
    let mut t = Tape::new();
    let p = t.constant(photo.clone())?;
    let s = t.constant(sketch.clone())?;
    let vars = triplet_on_tape(&mut t, p, s, cfg, weighted)?;
    Ok(report(&t, &vars))
}

/// Classic triplet loss over every in-batch negative. `w_matrix` is all ones.
pub fn triplet_loss_matrix(photo_embs: &Tensor, sketch_embs: &Tensor, cfg: &RtlConfig) -> Result<LossReport> {
    run_report(photo_embs, sketch_embs, cfg, false)
}

pub fn rtl_loss(photo_embs: &Tensor, sketch_embs: &Tensor, cfg: &RtlConfig) -> Result<LossReport> {
    run_report(photo_embs, sketch_embs, cfg, true)
}

pub fn relative_weighting_matrix(photo_embs: &Tensor, cfg: &RtlConfig) -> Result<Tensor> {
    cfg.validate()?;
    if photo_embs.shape().len() != 2 || photo_embs.rows() < 2 {
        return Err(Error::arg("weighting matrix needs a batch of at least 2"));
    }
    let mut t = Tape::new();
    let p = t.constant(photo_embs.clone())?;
    let w = weighting_on_tape(&mut t, p, cfg)?;
    Ok(t.value(w).clone())
}

/// Objective used to regress a student's embeddings onto a teacher's.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistillVariant {
    Mse,
    Mae,
    MseMae { mse_weight: f64, mae_weight: f64 },
    Huber { delta: f64 },
    /// KL(teacher ‖ student) between temperature-`tau` softmaxes over the
    /// embedding dimension.
    Kl { tau: f64 },
    /// As [`DistillVariant::Kl`], but the teacher distribution is an
    /// untempered softmax; only the student is divided by `tau`.
    KlSoftmax { tau: f64 },
}

impl DistillVariant {
    pub const fn huber() -> Self {
        DistillVariant::Huber { delta: 1.0 }
    }

    pub const fn mse_mae() -> Self {
        DistillVariant::MseMae {
            mse_weight: 0.5,
            mae_weight: 0.5,
        }
    }

    pub const fn kl() -> Self {
        DistillVariant::Kl { tau: 1.0 }
    }

    pub const fn kl_softmax() -> Self {
        DistillVariant::KlSoftmax { tau: 1.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistillVariant::Mse => "mse",
            DistillVariant::Mae => "mae",
            DistillVariant::MseMae { .. } => "mse+mae",
            DistillVariant::Huber { .. } => "huber",
            DistillVariant::Kl { .. } => "kl",
            DistillVariant::KlSoftmax { .. } => "kl+softmax",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DistillVariant::Huber { delta } if !(delta > 0.0) => {
                Err(Error::config(format!("huber delta must be > 0, got {delta}")))
            }
            DistillVariant::Kl { tau } | DistillVariant::KlSoftmax { tau } if !(tau > 0.0) => {
                Err(Error::config(format!("temperature must be > 0, got {tau}")))
            }
            DistillVariant::MseMae { mse_weight, mae_weight } if mse_weight < 0.0 || mae_weight < 0.0 => {
                Err(Error::config("mse+mae weights must be non-negative"))
            }
            _ => Ok(()),
        }
    }
}

fn softmax_rows(x: &Tensor, tau: f64) -> (Tensor, Tensor) {
    let (n, m) = (x.rows(), x.cols());
    let mut logp = x.map(|v| v / tau).into_data();
    for i in 0..n {
        let row = &mut logp[i * m..(i + 1) * m];
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    let logp = Tensor::matrix(n, m, logp).expect("shape preserved");
    let p = logp.map(f64::exp);
    (p, logp)
}

/// Records a distillation loss. `teacher` never receives gradient.
pub fn distill_on_tape(tape: &mut Tape, student: Var, teacher: &Tensor, variant: DistillVariant) -> Result<Var> {
    variant.validate()?;
    let s = tape.value(student);
    if s.shape() != teacher.shape() || s.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            lhs: s.shape().to_vec(),
            rhs: teacher.shape().to_vec(),
        });
    }
    let numel = s.len() as f64;

    match variant {
        DistillVariant::Mse | DistillVariant::Mae | DistillVariant::MseMae { .. } | DistillVariant::Huber { .. } => {
            let t = tape.constant(teacher.clone())?;
            let r = tape.sub(student, t)?;
            match variant {
                DistillVariant::Mse => {
                    let sq = tape.square(r)?;
                    tape.mean(sq)
                }
                DistillVariant::Mae => {
                    let a = tape.abs(r)?;
                    tape.mean(a)
                }
                DistillVariant::MseMae { mse_weight, mae_weight } => {
                    let sq = tape.square(r)?;
                    let sq = tape.scale(sq, mse_weight)?;
                    let a = tape.abs(r)?;
                    let a = tape.scale(a, mae_weight)?;
                    let mix = tape.add(sq, a)?;
                    tape.mean(mix)
                }
                DistillVariant::Huber { delta } => {
                    let h = tape.huber(r, delta)?;
                    tape.mean(h)
                }
                _ => unreachable!(),
            }
        }
        DistillVariant::Kl { tau } | DistillVariant::KlSoftmax { tau } => {
            let teacher_tau = if matches!(variant, DistillVariant::Kl { .. }) { tau } else { 1.0 };
            let (p, logp) = softmax_rows(teacher, teacher_tau);
            let scaled = tape.scale(student, 1.0 / tau)?;
            let logq = tape.log_softmax_rows(scaled)?;
            let logp_v = tape.constant(logp)?;
            let diff = tape.sub(logp_v, logq)?;
            let p_v = tape.constant(p)?;
            let terms = tape.mul(p_v, diff)?;
            let total = tape.sum(terms)?;
            tape.div_scalar(total, numel)
        }
    }
}

pub fn distill_loss(student_embs: &Tensor, teacher_embs: &Tensor, variant: DistillVariant) -> Result<f64> {
    let mut t = Tape::new();
    let s = t.constant(student_embs.clone())?;
    let l = distill_on_tape(&mut t, s, teacher_embs, variant)?;
    Ok(t.value(l).item())
}

#[derive(Clone, Copy, Debug)]
pub struct DoubleGuidanceVars {
    pub total: Var,
    pub rtl: Var,
    pub huber: Var,
}

/// `rtl(photo, student) + λ · huber(student, teacher)`, with the photo
/// embeddings and the teacher's embeddings held constant.
pub fn double_guidance_on_tape(
    tape: &mut Tape,
    student_sketch: Var,
    frozen_photo: &Tensor,
    teacher_sketch: &Tensor,
    cfg: &RtlConfig,
    lambda: f64,
    huber_delta: f64,
) -> Result<DoubleGuidanceVars> {
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("guidance weight must be >= 0, got {lambda}")));
    }
    let photo = tape.constant(frozen_photo.clone())?;
    let rtl = triplet_on_tape(tape, photo, student_sketch, cfg, true)?.loss;
    let huber = distill_on_tape(tape, student_sketch, teacher_sketch, DistillVariant::Huber { delta: huber_delta })?;
    let weighted = tape.scale(huber, lambda)?;
    let total = tape.add(rtl, weighted)?;
    Ok(DoubleGuidanceVars { total, rtl, huber })
}

pub fn double_guidance_loss(
    student_sketch_embs: &Tensor,
    frozen_photo_embs: &Tensor,
    teacher_sketch_embs: &Tensor,
    cfg: &RtlConfig,
    lambda: f64,
) -> Result<f64> {
    let mut t = Tape::new();
    let s = t.constant(student_sketch_embs.clone())?;
    let v = double_guidance_on_tape(&mut t, s, frozen_photo_embs, teacher_sketch_embs, cfg, lambda, 1.0)?;
    Ok(t.value(v.total).item())
}
