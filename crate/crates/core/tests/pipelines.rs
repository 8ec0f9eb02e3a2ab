use sbir_core::checkpoint::Checkpoint;
use sbir_core::metrics::read_metrics;
use sbir_core::pipelines::{recall_on_split, EvalSplit};
use sbir_core::*;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_categories: 8,
        photos_per_category: 10,
        sketches_per_photo: 3,
        photo_dim: 16,
        sketch_dim: 12,
        seed,
        ..SynthSpec::default()
    }
}

fn encoders(ds: &CrossDomainDataset, tag: &str, head: HeadKind, seed: u64) -> (Encoder, Encoder) {
    let p = EncoderConfig::ladder(tag, ds.photos.cols(), 16, head).unwrap();
    let s = EncoderConfig::ladder(tag, ds.sketches.cols(), 16, head).unwrap();
    (build_encoder(&p, seed).unwrap(), build_encoder(&s, seed + 1).unwrap())
}

fn sched(epochs: usize, seed: u64) -> TrainSchedule {
    TrainSchedule {
        epochs_total: epochs,
        stage_boundary_epoch: (epochs / 2).max(1),
        batch_size: 16,
        seed,
        eval_every: 5,
        ..TrainSchedule::default()
    }
}

#[test]
fn zero_epochs_takes_no_steps() {
    let ds = generate_dataset(&small_spec(0)).unwrap();
    let (mut p, mut s) = encoders(&ds, "tiny", HeadKind::Batchnorm, 1);
    let before = (p.checksum(), s.checksum());
    let a = train_rtl(&ds, &mut p, &mut s, &RtlConfig::default(), Objective::Rtl, &sched(0, 0)).unwrap();
    assert!(a.metrics.is_empty());
    assert_eq!((p.checksum(), s.checksum()), before);
    assert_eq!(a.summary.initial_recall, a.summary.final_recall);

    let dir = tempfile::tempdir().unwrap();
    a.write_dir(dir.path()).unwrap();
    assert!(read_metrics(dir.path()).unwrap().is_empty());
}

#[test]
fn identical_domains_reach_zero_loss() {
    let mut ds = generate_dataset(&SynthSpec {
        n_categories: 4,
        sketches_per_photo: 1,
        sketch_dim: 16,
        ambiguity_rate: 0.0,
        ..small_spec(3)
    })
    .unwrap();
    ds.sketches = ds.photos.clone();
    let (mut p, mut s) = encoders(&ds, "small", HeadKind::None, 5);
    let cfg = RtlConfig {
        margin: 0.0,
        ..RtlConfig::default()
    };
    let sc = TrainSchedule {
        batch_size: 8,
        stage_boundary_epoch: 20,
        ..sched(20, 0)
    };
    let a = train_rtl(&ds, &mut p, &mut s, &cfg, Objective::Rtl, &sc).unwrap();
    // with margin 0 the epoch loss hovers just above zero, so take its floor
    let best = a.metrics.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    assert!(best < 1e-3, "loss floor {best}");
}

#[test]
fn training_improves_recall_and_logs_schedule() {
    let ds = generate_dataset(&small_spec(1)).unwrap();
    let (mut p, mut s) = encoders(&ds, "small", HeadKind::Batchnorm, 2);
    let sc = TrainSchedule {
        lr_stage2: 1e-4,
        ..sched(30, 1)
    };
    let a = train_rtl(&ds, &mut p, &mut s, &RtlConfig::default(), Objective::Rtl, &sc).unwrap();
    assert!(a.summary.final_recall > a.summary.initial_recall);
    assert!(a.summary.best_recall >= a.summary.final_recall);
    let epochs: Vec<usize> = a.metrics.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, (1..=30).collect::<Vec<_>>());
    for r in &a.metrics {
        let want = if r.epoch <= sc.stage_boundary_epoch { 1e-3 } else { 1e-4 };
        assert_eq!(r.lr, want, "epoch {}", r.epoch);
        assert_eq!(r.recall_at_1.is_some(), r.epoch % 5 == 0);
    }
}

#[test]
fn runs_are_reproducible_byte_for_byte() {
    let run = |dir: &std::path::Path| {
        let ds = generate_dataset(&small_spec(4)).unwrap();
        let (mut p, mut s) = encoders(&ds, "tiny", HeadKind::Batchnorm, 9);
        train_rtl(&ds, &mut p, &mut s, &RtlConfig::default(), Objective::Triplet, &sched(6, 2))
            .unwrap()
            .write_dir(dir)
            .unwrap();
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());
    for f in ["metrics.csv", "config.json", "summary.json", "checkpoints/final.bin", "checkpoints/best.bin"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn checkpoint_reload_gives_identical_eval() {
    let ds = generate_dataset(&small_spec(5)).unwrap();
    let (mut p, mut s) = encoders(&ds, "tiny", HeadKind::Batchnorm, 3);
    let a = train_rtl(&ds, &mut p, &mut s, &RtlConfig::default(), Objective::Rtl, &sched(5, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    a.write_dir(dir.path()).unwrap();
    let back = Checkpoint::load(&dir.path().join("checkpoints/final.bin")).unwrap();
    let r1 = evaluate_checkpoint(&a.last, &ds, 1, "x").unwrap();
    let r2 = evaluate_checkpoint(&back, &ds, 1, "x").unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.recall, a.summary.final_recall);
    let all = evaluate_checkpoint(&back, &ds, r1.n_gallery, "x").unwrap();
    assert_eq!(all.recall, 1.0);
}

#[test]
fn random_encoders_are_near_chance() {
    let ds = generate_dataset(&SynthSpec::default()).unwrap();
    let split = EvalSplit::test(&ds);
    let n = split.gallery_ids.len() as f64;
    let q = split.query_rows.len() as f64;
    let chance = 1.0 / n;
    let std = (chance * (1.0 - chance) / q).sqrt();
    let (p, s) = encoders(&ds, "base", HeadKind::Batchnorm, 11);
    let r = recall_on_split(&p, &s, &ds, &split, 1).unwrap();
    assert!((r - chance).abs() <= 3.0 * std, "recall {r}, chance {chance}, std {std}");
}

#[test]
fn invalid_runs_rejected() {
    let ds = generate_dataset(&small_spec(0)).unwrap();
    let (mut p, mut s) = encoders(&ds, "tiny", HeadKind::Batchnorm, 1);
    let cfg = RtlConfig::default();
    let too_big = TrainSchedule {
        batch_size: 1000,
        ..sched(2, 0)
    };
    assert!(train_rtl(&ds, &mut p, &mut s, &cfg, Objective::Rtl, &too_big).is_err());
    let bad_boundary = TrainSchedule {
        stage_boundary_epoch: 5,
        ..sched(2, 0)
    };
    assert!(train_rtl(&ds, &mut p, &mut s, &cfg, Objective::Rtl, &bad_boundary).is_err());
    let mut frozen = p.clone();
    frozen.freeze();
    assert!(train_rtl(&ds, &mut frozen, &mut s, &cfg, Objective::Rtl, &sched(1, 0)).is_err());
    let mut swapped = s.clone();
    assert!(train_rtl(&ds, &mut swapped, &mut p, &cfg, Objective::Rtl, &sched(1, 0)).is_err());
}

fn trained_pair(ds: &CrossDomainDataset) -> (Encoder, Encoder) {
    let (mut p, mut s) = encoders(ds, "small", HeadKind::Batchnorm, 21);
    train_rtl(ds, &mut p, &mut s, &RtlConfig::default(), Objective::Rtl, &sched(15, 0)).unwrap();
    p.freeze();
    s.freeze();
    (p, s)
}

#[test]
fn distill_from_copy_starts_at_zero() {
    let ds = generate_dataset(&small_spec(6)).unwrap();
    let (photo, teacher) = trained_pair(&ds);
    let mut student = teacher.clone();
    student.frozen = false;
    let a = distill(&ds, &teacher, &mut student, &photo, &DistillConfig::default(), &sched(1, 0)).unwrap();
    assert_eq!(a.summary.initial_teacher_mse, Some(0.0));

    // without batch statistics the first training step sees the teacher exactly
    let cfg = EncoderConfig::ladder("tiny", 12, 16, HeadKind::L2).unwrap();
    let mut t = build_encoder(&cfg, 4).unwrap();
    t.freeze();
    let mut st = build_encoder(&cfg, 4).unwrap();
    let photo_l2 = build_encoder(&EncoderConfig::ladder("tiny", 16, 16, HeadKind::L2).unwrap(), 5).unwrap();
    let a = distill(&ds, &t, &mut st, &photo_l2, &DistillConfig::default(), &sched(2, 0)).unwrap();
    assert_eq!(a.metrics[0].loss, 0.0);
    assert_eq!(st.checksum(), t.checksum());
}

#[test]
fn distillation_tracks_teacher() {
    let ds = generate_dataset(&small_spec(7)).unwrap();
    let (photo, teacher) = trained_pair(&ds);
    let teacher_sum = teacher.checksum();
    let mut student = build_encoder(&teacher.config, 99).unwrap();
    let a = distill(&ds, &teacher, &mut student, &photo, &DistillConfig::default(), &sched(10, 0)).unwrap();
    let mse: Vec<f64> = a.metrics.iter().map(|r| r.teacher_mse.unwrap()).collect();
    // three-epoch moving average never rises
    let smooth: Vec<f64> = mse.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    assert!(smooth.windows(2).all(|w| w[1] <= w[0]), "{mse:?}");
    assert!(mse[9] < a.summary.initial_teacher_mse.unwrap());
    assert_eq!(teacher.checksum(), teacher_sum);
}

#[test]
fn distill_rejects_bad_setups() {
    let ds = generate_dataset(&small_spec(8)).unwrap();
    let (photo, teacher) = trained_pair(&ds);
    let mut unfrozen = teacher.clone();
    unfrozen.frozen = false;
    let mut student = build_encoder(&teacher.config, 1).unwrap();
    let cfg = DistillConfig::default();
    assert!(distill(&ds, &unfrozen, &mut student, &photo, &cfg, &sched(1, 0)).is_err());
    let wide = EncoderConfig {
        embedding_dim: 32,
        ..teacher.config.clone()
    };
    let mut wide = build_encoder(&wide, 1).unwrap();
    assert!(distill(&ds, &teacher, &mut wide, &photo, &cfg, &sched(1, 0)).is_err());
}

#[test]
fn double_guidance_keeps_guides_frozen() {
    let ds = generate_dataset(&small_spec(9)).unwrap();
    let (photo, teacher) = trained_pair(&ds);
    let sums = (photo.checksum(), teacher.checksum());
    let mut student = build_encoder(&teacher.config, 5).unwrap();
    let a = finetune_double_guidance(&ds, &photo, &teacher, &mut student, &DoubleGuidanceConfig::default(), &sched(4, 0))
        .unwrap();
    assert_eq!((photo.checksum(), teacher.checksum()), sums);
    assert!(a.metrics.iter().all(|r| r.teacher_huber.is_some()));
    assert_eq!(a.last.photo.checksum(), sums.0);

    let mut unfrozen = photo.clone();
    unfrozen.frozen = false;
    let mut st = student.clone();
    let cfg = DoubleGuidanceConfig::default();
    assert!(finetune_double_guidance(&ds, &unfrozen, &teacher, &mut st, &cfg, &sched(1, 0)).is_err());
    let neg = DoubleGuidanceConfig {
        lambda: -1.0,
        ..cfg
    };
    assert!(finetune_double_guidance(&ds, &photo, &teacher, &mut st, &neg, &sched(1, 0)).is_err());
}

#[test]
fn huge_lambda_pins_student_to_teacher() {
    let ds = generate_dataset(&small_spec(10)).unwrap();
    let (photo, teacher) = trained_pair(&ds);
    let mut student = build_encoder(&teacher.config, 6).unwrap();
    let cfg = DoubleGuidanceConfig {
        lambda: 1e6,
        ..DoubleGuidanceConfig::default()
    };
    let sc = TrainSchedule {
        lr_stage2: 1e-3,
        ..sched(100, 0)
    };
    let a = finetune_double_guidance(&ds, &photo, &teacher, &mut student, &cfg, &sc).unwrap();
    let start = a.summary.initial_teacher_mse.unwrap();
    let end = a.metrics.last().unwrap().teacher_mse.unwrap();
    // the residual is the gap between batch and running statistics
    assert!(end < 0.1 * start, "mse {start} -> {end}");
}
