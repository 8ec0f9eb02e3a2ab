//! Training experiments on the default synthetic benchmark. Every comparison
//! uses the median final recall@1 over `SEEDS` seeds.

use std::cell::RefCell;
use std::collections::HashMap;

use sbir_core::metrics::METRICS_FILE;
use sbir_core::*;

use super::{outcome, Outcome};

pub const SEEDS: u64 = 5;
pub const EMB: usize = 64;
const HEAD_MARGIN: f64 = 0.02;
const DISTILL_EQUAL_TOL: f64 = 0.01;
const DISTILL_LARGER_TOL: f64 = 0.005;
const SKETCH_CAPACITY_TOL: f64 = 0.03;
const DETERMINISM_EPOCHS: usize = 20;

pub fn bench_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        ..SynthSpec::default()
    }
}

fn schedule(seed: u64) -> TrainSchedule {
    TrainSchedule {
        seed,
        ..TrainSchedule::default()
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn pct(xs: &[f64]) -> String {
    let v: Vec<String> = xs.iter().map(|r| format!("{:.1}", 100.0 * r)).collect();
    format!("[{}]", v.join(", "))
}

#[derive(Clone)]
struct Trained {
    photo: Encoder,
    sketch: Encoder,
    recall: f64,
}

thread_local! {
    static DATASETS: RefCell<HashMap<u64, CrossDomainDataset>> = RefCell::new(HashMap::new());
    static RUNS: RefCell<HashMap<(String, u64), Trained>> = RefCell::new(HashMap::new());
}

fn dataset(seed: u64) -> CrossDomainDataset {
    DATASETS.with(|d| {
        d.borrow_mut()
            .entry(seed)
            .or_insert_with(|| generate_dataset(&bench_spec(seed)).unwrap())
            .clone()
    })
}

fn encoder(tag: &str, input_dim: usize, head: HeadKind, seed: u64) -> Encoder {
    build_encoder(&EncoderConfig::ladder(tag, input_dim, EMB, head).unwrap(), seed).unwrap()
}

/// Joint training of a photo/sketch pair, cached by setup and seed.
fn joint(photo_tag: &str, sketch_tag: &str, head: HeadKind, objective: Objective, seed: u64) -> Trained {
    let key = (format!("{photo_tag}/{sketch_tag}/{head:?}/{objective:?}"), seed);
    if let Some(t) = RUNS.with(|r| r.borrow().get(&key).cloned()) {
        return t;
    }
    let ds = dataset(seed);
    let mut photo = encoder(photo_tag, ds.spec.photo_dim, head, 1000 + seed);
    let mut sketch = encoder(sketch_tag, ds.spec.sketch_dim, head, 2000 + seed);
    let run = train_rtl(&ds, &mut photo, &mut sketch, &RtlConfig::default(), objective, &schedule(seed)).unwrap();
    let t = Trained {
        photo,
        sketch,
        recall: run.summary.final_recall,
    };
    RUNS.with(|r| r.borrow_mut().insert(key, t.clone()));
    t
}

fn joint_recalls(photo_tag: &str, sketch_tag: &str, head: HeadKind, objective: Objective) -> Vec<f64> {
    (0..SEEDS).map(|s| joint(photo_tag, sketch_tag, head, objective, s).recall).collect()
}

fn teacher(seed: u64) -> Trained {
    joint("base", "base", HeadKind::Batchnorm, Objective::Rtl, seed)
}

/// A fresh `tag` sketch student distilled from the seed's teacher.
fn distilled(tag: &str, variant: DistillVariant, seed: u64) -> (Encoder, f64) {
    let key = (format!("distill/{tag}/{variant:?}"), seed);
    if let Some(t) = RUNS.with(|r| r.borrow().get(&key).cloned()) {
        return (t.sketch, t.recall);
    }
    let ds = dataset(seed);
    let guides = teacher(seed);
    let (mut photo, mut teach) = (guides.photo.clone(), guides.sketch.clone());
    photo.freeze();
    teach.freeze();
    let mut student = encoder(tag, ds.spec.sketch_dim, HeadKind::Batchnorm, 3000 + seed);
    let cfg = DistillConfig {
        variant,
        domain: Domain::Sketch,
    };
    let run = distill(&ds, &teach, &mut student, &photo, &cfg, &schedule(seed)).unwrap();
    let t = Trained {
        photo,
        sketch: student,
        recall: run.summary.final_recall,
    };
    RUNS.with(|r| r.borrow_mut().insert(key, t.clone()));
    (t.sketch, t.recall)
}

pub fn normalization_head_ab() -> Outcome {
    let bn_rtl = joint_recalls("base", "base", HeadKind::Batchnorm, Objective::Rtl);
    let l2_rtl = joint_recalls("base", "base", HeadKind::L2, Objective::Rtl);
    let bn_tri = joint_recalls("base", "base", HeadKind::Batchnorm, Objective::Triplet);
    let (m_bn, m_l2, m_tri) = (median(bn_rtl.clone()), median(l2_rtl.clone()), median(bn_tri.clone()));
    let head_ok = m_bn - m_l2 >= HEAD_MARGIN;
    let loss_ok = m_bn - m_tri >= HEAD_MARGIN;
    outcome(
        head_ok && loss_ok,
        format!(
            "bn-head {:.2} vs l2-head {:.2} (need +{:.0}: {head_ok}); rtl {:.2} vs triplet {:.2} (need +{:.0}: {loss_ok}); bn-rtl {} l2-rtl {} bn-triplet {}",
            100.0 * m_bn,
            100.0 * m_l2,
            100.0 * HEAD_MARGIN,
            100.0 * m_bn,
            100.0 * m_tri,
            100.0 * HEAD_MARGIN,
            pct(&bn_rtl),
            pct(&l2_rtl),
            pct(&bn_tri)
        ),
    )
}

pub fn distillation() -> Outcome {
    let teachers: Vec<f64> = (0..SEEDS).map(|s| teacher(s).recall).collect();
    let run = |tag: &str, v: DistillVariant| -> Vec<f64> { (0..SEEDS).map(|s| distilled(tag, v, s).1).collect() };
    let equal = run("base", DistillVariant::huber());
    let larger = run("large", DistillVariant::huber());
    let tiny_huber = run("tiny", DistillVariant::huber());
    let tiny_kl = run("tiny", DistillVariant::kl());
    let m_t = median(teachers.clone());
    let (m_eq, m_lg, m_h, m_kl) = (median(equal.clone()), median(larger.clone()), median(tiny_huber.clone()), median(tiny_kl.clone()));
    let eq_ok = m_eq >= m_t - DISTILL_EQUAL_TOL;
    let lg_ok = m_lg >= m_t - DISTILL_LARGER_TOL;
    let kl_ok = m_h >= m_kl;
    outcome(
        eq_ok && lg_ok && kl_ok,
        format!(
            "teacher {:.2}; equal-architecture huber student {:.2} (>= teacher-1: {eq_ok}); larger student {:.2} (>= teacher-0.5: {lg_ok}); tiny huber {:.2} vs tiny kl {:.2} ({kl_ok}); teacher {} equal {} larger {} tiny-huber {} tiny-kl {}",
            100.0 * m_t,
            100.0 * m_eq,
            100.0 * m_lg,
            100.0 * m_h,
            100.0 * m_kl,
            pct(&teachers),
            pct(&equal),
            pct(&larger),
            pct(&tiny_huber),
            pct(&tiny_kl)
        ),
    )
}

pub fn double_guidance() -> Outcome {
    let mut baseline = Vec::new();
    let mut tuned = Vec::new();
    let mut guides_unchanged = true;
    for seed in 0..SEEDS {
        let ds = dataset(seed);
        let guides = teacher(seed);
        let (mut photo, mut teach) = (guides.photo.clone(), guides.sketch.clone());
        photo.freeze();
        teach.freeze();
        let before = (photo.checksum(), teach.checksum());
        let (mut student, recall) = distilled("tiny", DistillVariant::huber(), seed);
        baseline.push(recall);
        let run = finetune_double_guidance(&ds, &photo, &teach, &mut student, &DoubleGuidanceConfig::default(), &schedule(seed)).unwrap();
        tuned.push(run.summary.final_recall);
        guides_unchanged &= before == (photo.checksum(), teach.checksum());
    }
    let (m_b, m_dg) = (median(baseline.clone()), median(tuned.clone()));
    let gain_ok = m_dg >= m_b;
    outcome(
        gain_ok && guides_unchanged,
        format!(
            "distill-only {:.2} -> double guidance {:.2} ({gain_ok}); guide checksums unchanged {guides_unchanged}; distill-only {} double-guidance {}",
            100.0 * m_b,
            100.0 * m_dg,
            pct(&baseline),
            pct(&tuned)
        ),
    )
}

pub fn capacity_asymmetry() -> Outcome {
    let full = joint_recalls("base", "base", HeadKind::Batchnorm, Objective::Rtl);
    let tiny_sketch = joint_recalls("base", "tiny", HeadKind::Batchnorm, Objective::Rtl);
    let tiny_photo = joint_recalls("tiny", "base", HeadKind::Batchnorm, Objective::Rtl);
    let m_full = median(full.clone());
    let sketch_drop = m_full - median(tiny_sketch.clone());
    let photo_drop = m_full - median(tiny_photo.clone());
    let sketch_ok = sketch_drop.abs() < SKETCH_CAPACITY_TOL;
    let photo_ok = photo_drop > sketch_drop;
    outcome(
        sketch_ok && photo_ok,
        format!(
            "base/base {:.2}; tiny sketch changes recall by {:+.2} (|.| < {:.0}: {sketch_ok}); tiny photo changes it by {:+.2} (larger drop: {photo_ok}); base/base {} base/tiny {} tiny/base {}",
            100.0 * m_full,
            -100.0 * sketch_drop,
            100.0 * SKETCH_CAPACITY_TOL,
            -100.0 * photo_drop,
            pct(&full),
            pct(&tiny_sketch),
            pct(&tiny_photo)
        ),
    )
}

/// Runs every pipeline twice from identical inputs and compares the bytes of
/// the written metrics tables.
pub fn determinism() -> Outcome {
    let seed = 3;
    let ds = dataset(seed);
    let sched = TrainSchedule {
        epochs_total: DETERMINISM_EPOCHS,
        stage_boundary_epoch: DETERMINISM_EPOCHS / 2,
        eval_every: 5,
        seed,
        ..TrainSchedule::default()
    };
    let fresh = |tag: &str, dim: usize, s: u64| encoder(tag, dim, HeadKind::Batchnorm, s);
    let rtl = || {
        let (mut p, mut s) = (fresh("base", ds.spec.photo_dim, 1), fresh("base", ds.spec.sketch_dim, 2));
        train_rtl(&ds, &mut p, &mut s, &RtlConfig::default(), Objective::Rtl, &sched).unwrap()
    };
    let guides = rtl().last;
    let (mut photo, mut teach) = (guides.photo.clone(), guides.sketch.clone());
    photo.freeze();
    teach.freeze();
    let kd = || {
        let mut st = fresh("tiny", ds.spec.sketch_dim, 3);
        distill(&ds, &teach, &mut st, &photo, &DistillConfig::default(), &sched).unwrap()
    };
    let dg = || {
        let mut st = fresh("tiny", ds.spec.sketch_dim, 3);
        finetune_double_guidance(&ds, &photo, &teach, &mut st, &DoubleGuidanceConfig::default(), &sched).unwrap()
    };
    let runs: Vec<(&str, &dyn Fn() -> RunArtifacts)> = vec![("train-rtl", &rtl), ("distill", &kd), ("finetune-dg", &dg)];
    let root = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, run) in runs {
        let bytes: Vec<Vec<u8>> = (0..2)
            .map(|i| {
                let dir = root.path().join(format!("{name}-{i}"));
                run().write_dir(&dir).unwrap();
                std::fs::read(dir.join(METRICS_FILE)).unwrap()
            })
            .collect();
        let same = bytes[0] == bytes[1];
        ok &= same;
        parts.push(format!("{name} {} bytes identical {same}", bytes[0].len()));
    }
    outcome(ok, format!("{DETERMINISM_EPOCHS}-epoch runs: {}", parts.join("; ")))
}
