//! Training procedures: dual-encoder triplet training, teacher→student
//! distillation and double-guidance finetuning, with evaluation and the run
//! artifact directory they produce.
//!
//! An epoch visits every training photo once in a seeded order, pairing it
//! with one of its sketches drawn at random. Batches are consecutive chunks of
//! that order; a trailing partial batch is dropped.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::io::write_file;
use crate::losses::{distill_on_tape, double_guidance_on_tape, triplet_on_tape, DistillVariant, RtlConfig};
use crate::metrics::{metrics_to_csv, MetricsRow, METRICS_FILE};
use crate::norm::Mode;
use crate::optim::{optimizer_step, OptimizerKind, OptimizerState};
use crate::retrieval::{GalleryIndex, RecallRecord};
use crate::synth::CrossDomainDataset;
use crate::tensor::{huber_value, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs_total: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    /// Number of epochs run at `lr_stage1`.
    pub stage_boundary_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub eval_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs_total: 200,
            lr_stage1: 1e-3,
            lr_stage2: 1e-5,
            stage_boundary_epoch: 100,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            eval_every: 10,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return Err(Error::config("learning rates must be > 0"));
        }
        if self.epochs_total > 0 && !(self.stage_boundary_epoch > 0 && self.stage_boundary_epoch <= self.epochs_total) {
            return Err(Error::config(format!(
                "stage_boundary_epoch must be in 1..={}, got {}",
                self.epochs_total, self.stage_boundary_epoch
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be >= 2"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate of 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.stage_boundary_epoch {
            self.lr_stage1
        } else {
            self.lr_stage2
        }
    }

    fn evaluates_at(&self, epoch: usize) -> bool {
        epoch.is_multiple_of(self.eval_every) || epoch == self.epochs_total
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Triplet loss weighted by relative photo distances.
    #[default]
    Rtl,
    /// Unweighted triplet loss.
    Triplet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Photo,
    #[default]
    Sketch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub variant: DistillVariant,
    pub domain: Domain,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            variant: DistillVariant::huber(),
            domain: Domain::Sketch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleGuidanceConfig {
    pub rtl: RtlConfig,
    pub lambda: f64,
    pub huber_delta: f64,
}

impl Default for DoubleGuidanceConfig {
    fn default() -> Self {
        DoubleGuidanceConfig {
            rtl: RtlConfig::default(),
            lambda: 1.0,
            huber_delta: 1.0,
        }
    }
}

impl DoubleGuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        self.rtl.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::config("huber_delta must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub pipeline: String,
    pub epochs: usize,
    pub initial_recall: f64,
    pub final_recall: f64,
    pub best_recall: f64,
    pub best_epoch: usize,
    pub n_gallery: usize,
    pub n_queries: usize,
    /// Eval-mode embedding MSE to the teacher before any step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_teacher_mse: Option<f64>,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: serde_json::Value,
    pub metrics: Vec<MetricsRow>,
    pub summary: RunSummary,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.bin";
pub const FINAL_CHECKPOINT: &str = "checkpoints/final.bin";

impl RunArtifacts {
    /// Writes config, metrics, summary and both checkpoints under `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let mut config = serde_json::to_string_pretty(&self.config)?;
        config.push('\n');
        write_file(&dir.join(CONFIG_FILE), config.as_bytes())?;
        write_file(&dir.join(METRICS_FILE), metrics_to_csv(&self.metrics).as_bytes())?;
        let mut summary = serde_json::to_string_pretty(&self.summary)?;
        summary.push('\n');
        write_file(&dir.join(SUMMARY_FILE), summary.as_bytes())?;
        self.best.save(&dir.join(BEST_CHECKPOINT))?;
        self.last.save(&dir.join(FINAL_CHECKPOINT))
    }
}

/// Test-split gallery (photo ids are dataset row indices) and sketch queries.
pub struct EvalSplit {
    pub gallery_ids: Vec<usize>,
    pub query_rows: Vec<usize>,
    pub targets: Vec<usize>,
}

impl EvalSplit {
    pub fn test(ds: &CrossDomainDataset) -> Self {
        let query_rows = ds.test_sketches();
        let targets = query_rows.iter().map(|&s| ds.sketch_photo[s]).collect();
        EvalSplit {
            gallery_ids: ds.test_photos(),
            query_rows,
            targets,
        }
    }
}

fn check_dims(photo: &Encoder, sketch: &Encoder, ds: &CrossDomainDataset) -> Result<()> {
    if photo.input_dim() != ds.photos.cols() || sketch.input_dim() != ds.sketches.cols() {
        return Err(Error::config(format!(
            "encoder inputs {}/{} do not match dataset dims {}/{}",
            photo.input_dim(),
            sketch.input_dim(),
            ds.photos.cols(),
            ds.sketches.cols()
        )));
    }
    if photo.embedding_dim() != sketch.embedding_dim() {
        return Err(Error::config(format!(
            "photo and sketch embedding dims differ: {} vs {}",
            photo.embedding_dim(),
            sketch.embedding_dim()
        )));
    }
    Ok(())
}

/// Recall@k of sketch queries against the test-split photo gallery.
pub fn recall_on_split(photo: &Encoder, sketch: &Encoder, ds: &CrossDomainDataset, split: &EvalSplit, k: usize) -> Result<f64> {
    check_dims(photo, sketch, ds)?;
    let gallery = photo.embed(&ds.photos.select_rows(&split.gallery_ids))?;
    let index = GalleryIndex::new(gallery, split.gallery_ids.clone())?;
    let queries = sketch.embed(&ds.sketches.select_rows(&split.query_rows))?;
    index.recall_at_k(&queries, &split.targets, k)
}

/// Recall@k of a checkpoint on the dataset's test split.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, ds: &CrossDomainDataset, k: usize, run_id: &str) -> Result<RecallRecord> {
    let split = EvalSplit::test(ds);
    let recall = recall_on_split(&ckpt.photo, &ckpt.sketch, ds, &split, k)?;
    Ok(RecallRecord {
        run_id: run_id.to_string(),
        k,
        recall,
        n_gallery: split.gallery_ids.len(),
        n_queries: split.query_rows.len(),
        seed: ds.spec.seed,
    })
}

struct Sampler {
    rng: ChaCha8Rng,
    train_photos: Vec<usize>,
    sketch_lists: Vec<Vec<usize>>,
    batch_size: usize,
}

impl Sampler {
    fn new(ds: &CrossDomainDataset, sched: &TrainSchedule) -> Result<Self> {
        let train_photos = ds.train_photos();
        if sched.batch_size > train_photos.len() {
            return Err(Error::config(format!(
                "batch_size {} exceeds the {} training photos",
                sched.batch_size,
                train_photos.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
        rng.set_stream(11);
        Ok(Sampler {
            rng,
            train_photos,
            sketch_lists: ds.sketch_lists(),
            batch_size: sched.batch_size,
        })
    }

    /// (photo rows, sketch rows) of every batch of one epoch.
    fn epoch(&mut self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut order = self.train_photos.clone();
        order.shuffle(&mut self.rng);
        let sketches: Vec<usize> = order
            .iter()
            .map(|&p| {
                let l = &self.sketch_lists[p];
                l[self.rng.gen_range(0..l.len())]
            })
            .collect();
        order
            .chunks_exact(self.batch_size)
            .zip(sketches.chunks_exact(self.batch_size))
            .map(|(p, s)| (p.to_vec(), s.to_vec()))
            .collect()
    }
}

fn diverged(epoch: usize, batch: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            batch,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Tracks recall evaluations and the best checkpoint.
struct Tracker {
    split: EvalSplit,
    initial: f64,
    best: f64,
    best_epoch: usize,
    best_ckpt: Checkpoint,
    last: f64,
}

impl Tracker {
    fn new(ds: &CrossDomainDataset, ckpt: Checkpoint) -> Result<Self> {
        let split = EvalSplit::test(ds);
        let initial = recall_on_split(&ckpt.photo, &ckpt.sketch, ds, &split, 1)?;
        Ok(Tracker {
            split,
            initial,
            best: initial,
            best_epoch: 0,
            best_ckpt: ckpt,
            last: initial,
        })
    }

    fn eval(&mut self, ds: &CrossDomainDataset, photo: &Encoder, sketch: &Encoder, epoch: usize) -> Result<f64> {
        let r = recall_on_split(photo, sketch, ds, &self.split, 1)?;
        if r > self.best {
            self.best = r;
            self.best_epoch = epoch;
            self.best_ckpt = Checkpoint {
                photo: photo.clone(),
                sketch: sketch.clone(),
            };
        }
        self.last = r;
        Ok(r)
    }

    fn finish(
        self,
        pipeline: &str,
        config: serde_json::Value,
        metrics: Vec<MetricsRow>,
        last: Checkpoint,
        sched: &TrainSchedule,
        initial_teacher_mse: Option<f64>,
    ) -> RunArtifacts {
        let mut seeds = BTreeMap::new();
        seeds.insert("sampling".to_string(), sched.seed);
        RunArtifacts {
            config,
            metrics,
            summary: RunSummary {
                pipeline: pipeline.to_string(),
                epochs: sched.epochs_total,
                initial_recall: self.initial,
                final_recall: self.last,
                best_recall: self.best,
                best_epoch: self.best_epoch,
                n_gallery: self.split.gallery_ids.len(),
                n_queries: self.split.query_rows.len(),
                initial_teacher_mse,
                seeds,
            },
            best: self.best_ckpt,
            last,
        }
    }
}

fn apply_grads(enc: &mut Encoder, grads: Vec<Tensor>, lr: f64, state: &mut OptimizerState) -> Result<()> {
    let mut params = enc.params_mut();
    optimizer_step(&mut params, &grads, lr, state)
}

/// Trains both encoders jointly with the (relative) triplet loss.
pub fn train_rtl(
    ds: &CrossDomainDataset,
    photo: &mut Encoder,
    sketch: &mut Encoder,
    cfg: &RtlConfig,
    objective: Objective,
    sched: &TrainSchedule,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    sched.validate()?;
    check_dims(photo, sketch, ds)?;
    if photo.frozen || sketch.frozen {
        return Err(Error::config("train-rtl needs unfrozen encoders"));
    }
    let config = json!({
        "pipeline": "train-rtl",
        "objective": objective,
        "rtl": cfg,
        "schedule": sched,
        "photo_encoder": photo.config,
        "sketch_encoder": sketch.config,
        "dataset": ds.spec,
    });
    let mut sampler = Sampler::new(ds, sched)?;
    let mut tracker = Tracker::new(
        ds,
        Checkpoint {
            photo: photo.clone(),
            sketch: sketch.clone(),
        },
    )?;
    let mut opt_p = OptimizerState::new(sched.optimizer);
    let mut opt_s = OptimizerState::new(sched.optimizer);
    let mut metrics = Vec::with_capacity(sched.epochs_total);

    for epoch in 1..=sched.epochs_total {
        let lr = sched.lr_at(epoch);
        let batches = sampler.epoch();
        let mut loss_sum = 0.0;
        for (b, (prow, srow)) in batches.iter().enumerate() {
            let mut step = || -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
                let mut tape = Tape::new();
                let pb = photo.bind(&mut tape)?;
                let sb = sketch.bind(&mut tape)?;
                let xp = tape.constant(ds.photos.select_rows(prow))?;
                let xs = tape.constant(ds.sketches.select_rows(srow))?;
                let ep = photo.forward(&mut tape, &pb, xp, Mode::Train)?;
                let es = sketch.forward(&mut tape, &sb, xs, Mode::Train)?;
                let tv = triplet_on_tape(&mut tape, ep, es, cfg, objective == Objective::Rtl)?;
                let mut grads = tape.backward(tv.loss)?;
                Ok((
                    tape.value(tv.loss).item(),
                    grads.take_all(&pb.params()),
                    grads.take_all(&sb.params()),
                ))
            };
            let (loss, gp, gs) = step().map_err(diverged(epoch, b))?;
            apply_grads(photo, gp, lr, &mut opt_p).map_err(diverged(epoch, b))?;
            apply_grads(sketch, gs, lr, &mut opt_s).map_err(diverged(epoch, b))?;
            loss_sum += loss;
        }
        let recall = if sched.evaluates_at(epoch) {
            Some(tracker.eval(ds, photo, sketch, epoch)?)
        } else {
            None
        };
        metrics.push(MetricsRow {
            epoch,
            loss: loss_sum / batches.len() as f64,
            recall_at_1: recall,
            lr,
            teacher_mse: None,
            teacher_huber: None,
        });
    }
    let last = Checkpoint {
        photo: photo.clone(),
        sketch: sketch.clone(),
    };
    Ok(tracker.finish("train-rtl", config, metrics, last, sched, None))
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

fn check_guide(name: &str, enc: &Encoder) -> Result<()> {
    if !enc.frozen {
        return Err(Error::config(format!("{name} must be frozen")));
    }
    Ok(())
}

/// Regresses `student` onto the frozen `teacher` in one input domain.
/// `counterpart` encodes the other domain for recall evaluation only.
pub fn distill(
    ds: &CrossDomainDataset,
    teacher: &Encoder,
    student: &mut Encoder,
    counterpart: &Encoder,
    cfg: &DistillConfig,
    sched: &TrainSchedule,
) -> Result<RunArtifacts> {
    cfg.variant.validate()?;
    sched.validate()?;
    check_guide("teacher", teacher)?;
    if student.frozen {
        return Err(Error::config("student must not be frozen"));
    }
    if teacher.embedding_dim() != student.embedding_dim() {
        return Err(Error::config(format!(
            "teacher and student embedding dims differ: {} vs {}",
            teacher.embedding_dim(),
            student.embedding_dim()
        )));
    }
    if teacher.input_dim() != student.input_dim() {
        return Err(Error::config("teacher and student must share an input domain"));
    }
    let pair = |s: &Encoder| match cfg.domain {
        Domain::Sketch => Checkpoint {
            photo: counterpart.clone(),
            sketch: s.clone(),
        },
        Domain::Photo => Checkpoint {
            photo: s.clone(),
            sketch: counterpart.clone(),
        },
    };
    {
        let ck = pair(student);
        check_dims(&ck.photo, &ck.sketch, ds)?;
    }
    let config = json!({
        "pipeline": "distill",
        "distill": cfg,
        "schedule": sched,
        "teacher": teacher.config,
        "student": student.config,
        "counterpart": counterpart.config,
        "dataset": ds.spec,
    });
    let inputs = match cfg.domain {
        Domain::Sketch => &ds.sketches,
        Domain::Photo => &ds.photos,
    };
    let teacher_all = teacher.embed(inputs)?;
    let split = EvalSplit::test(ds);
    let probe_rows = match cfg.domain {
        Domain::Sketch => split.query_rows.clone(),
        Domain::Photo => split.gallery_ids.clone(),
    };
    let probe_x = inputs.select_rows(&probe_rows);
    let probe_t = teacher_all.select_rows(&probe_rows);
    let initial_mse = mse(&student.embed(&probe_x)?, &probe_t);

    let mut sampler = Sampler::new(ds, sched)?;
    let mut tracker = Tracker::new(ds, pair(student))?;
    let mut opt = OptimizerState::new(sched.optimizer);
    let mut metrics = Vec::with_capacity(sched.epochs_total);

    for epoch in 1..=sched.epochs_total {
        let lr = sched.lr_at(epoch);
        let batches = sampler.epoch();
        let mut loss_sum = 0.0;
        for (b, (prow, srow)) in batches.iter().enumerate() {
            let rows = match cfg.domain {
                Domain::Sketch => srow,
                Domain::Photo => prow,
            };
            let mut step = || -> Result<(f64, Vec<Tensor>)> {
                let mut tape = Tape::new();
                let bound = student.bind(&mut tape)?;
                let x = tape.constant(inputs.select_rows(rows))?;
                let out = student.forward(&mut tape, &bound, x, Mode::Train)?;
                let loss = distill_on_tape(&mut tape, out, &teacher_all.select_rows(rows), cfg.variant)?;
                let mut grads = tape.backward(loss)?;
                Ok((tape.value(loss).item(), grads.take_all(&bound.params())))
            };
            let (loss, g) = step().map_err(diverged(epoch, b))?;
            apply_grads(student, g, lr, &mut opt).map_err(diverged(epoch, b))?;
            loss_sum += loss;
        }
        let recall = if sched.evaluates_at(epoch) {
            let ck = pair(student);
            Some(tracker.eval(ds, &ck.photo, &ck.sketch, epoch)?)
        } else {
            None
        };
        metrics.push(MetricsRow {
            epoch,
            loss: loss_sum / batches.len() as f64,
            recall_at_1: recall,
            lr,
            teacher_mse: Some(mse(&student.embed(&probe_x)?, &probe_t)),
            teacher_huber: None,
        });
    }
    Ok(tracker.finish("distill", config, metrics, pair(student), sched, Some(initial_mse)))
}

/// Finetunes a sketch student against two frozen guides: the triplet
/// objective with the photo encoder and Huber regression onto the teacher.
pub fn finetune_double_guidance(
    ds: &CrossDomainDataset,
    frozen_photo: &Encoder,
    teacher: &Encoder,
    student: &mut Encoder,
    cfg: &DoubleGuidanceConfig,
    sched: &TrainSchedule,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    sched.validate()?;
    check_guide("photo encoder", frozen_photo)?;
    check_guide("sketch teacher", teacher)?;
    if student.frozen {
        return Err(Error::config("student must not be frozen"));
    }
    check_dims(frozen_photo, student, ds)?;
    check_dims(frozen_photo, teacher, ds)?;
    let config = json!({
        "pipeline": "finetune-dg",
        "double_guidance": cfg,
        "schedule": sched,
        "photo_encoder": frozen_photo.config,
        "teacher": teacher.config,
        "student": student.config,
        "dataset": ds.spec,
    });
    let photo_all = frozen_photo.embed(&ds.photos)?;
    let teacher_all = teacher.embed(&ds.sketches)?;
    let split = EvalSplit::test(ds);
    let probe_x = ds.sketches.select_rows(&split.query_rows);
    let probe_t = teacher_all.select_rows(&split.query_rows);
    let initial_mse = mse(&student.embed(&probe_x)?, &probe_t);

    let pair = |s: &Encoder| Checkpoint {
        photo: frozen_photo.clone(),
        sketch: s.clone(),
    };
    let mut sampler = Sampler::new(ds, sched)?;
    let mut tracker = Tracker::new(ds, pair(student))?;
    let mut opt = OptimizerState::new(sched.optimizer);
    let mut metrics = Vec::with_capacity(sched.epochs_total);

    for epoch in 1..=sched.epochs_total {
        let lr = sched.lr_at(epoch);
        let batches = sampler.epoch();
        let (mut loss_sum, mut huber_sum) = (0.0, 0.0);
        for (b, (prow, srow)) in batches.iter().enumerate() {
            let mut step = || -> Result<(f64, f64, Vec<Tensor>)> {
                let mut tape = Tape::new();
                let bound = student.bind(&mut tape)?;
                let x = tape.constant(ds.sketches.select_rows(srow))?;
                let out = student.forward(&mut tape, &bound, x, Mode::Train)?;
                let v = double_guidance_on_tape(
                    &mut tape,
                    out,
                    &photo_all.select_rows(prow),
                    &teacher_all.select_rows(srow),
                    &cfg.rtl,
                    cfg.lambda,
                    cfg.huber_delta,
                )?;
                let mut grads = tape.backward(v.total)?;
                Ok((
                    tape.value(v.total).item(),
                    tape.value(v.huber).item(),
                    grads.take_all(&bound.params()),
                ))
            };
            let (loss, huber, g) = step().map_err(diverged(epoch, b))?;
            apply_grads(student, g, lr, &mut opt).map_err(diverged(epoch, b))?;
            loss_sum += loss;
            huber_sum += huber;
        }
        let recall = if sched.evaluates_at(epoch) {
            Some(tracker.eval(ds, frozen_photo, student, epoch)?)
        } else {
            None
        };
        let n = batches.len() as f64;
        metrics.push(MetricsRow {
            epoch,
            loss: loss_sum / n,
            recall_at_1: recall,
            lr,
            teacher_mse: Some(mse(&student.embed(&probe_x)?, &probe_t)),
            teacher_huber: Some(huber_sum / n),
        });
    }
    Ok(tracker.finish("finetune-dg", config, metrics, pair(student), sched, Some(initial_mse)))
}

/// Mean elementwise Huber penalty between two embedding matrices.
pub fn mean_huber(a: &Tensor, b: &Tensor, delta: f64) -> f64 {
    let n = a.len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| huber_value(x - y, delta)).sum::<f64>() / n
}
