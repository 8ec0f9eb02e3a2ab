use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use sbir_core::io::{read_matrix, write_file, write_matrix, DESCRIPTOR_MAGIC};
use sbir_core::metrics::format_float;
use sbir_core::pipelines::{RunArtifacts, FINAL_CHECKPOINT};
use sbir_core::synth::{photo_feature_maps, FeatureMapSpec};
use sbir_core::*;

use crate::config::{self, override_epochs, required, DistillRunConfig, FinetuneDgConfig, RmacAuditConfig, TrainRtlConfig};
use crate::{CliError, Command, FormatArg, ObjectiveArg};

/// Offsets added to the schedule seed to initialize each freshly built encoder.
const PHOTO_INIT_OFFSET: u64 = 1000;
const SKETCH_INIT_OFFSET: u64 = 2000;
const STUDENT_INIT_OFFSET: u64 = 3000;

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { spec, out, seed } => gen_data(spec.as_deref(), &out, seed),
        Command::TrainRtl {
            config,
            data,
            out,
            seed,
            epochs,
            objective,
        } => {
            let mut cfg: TrainRtlConfig = config::load(config.as_deref())?;
            cfg.data = data.or(cfg.data);
            cfg.out = out.or(cfg.out);
            if let Some(s) = seed {
                cfg.schedule.seed = s;
            }
            override_epochs(&mut cfg.schedule, epochs);
            if let Some(o) = objective {
                cfg.objective = match o {
                    ObjectiveArg::Rtl => Objective::Rtl,
                    ObjectiveArg::Triplet => Objective::Triplet,
                };
            }
            train(&cfg)
        }
        Command::Distill {
            config,
            data,
            teacher,
            out,
            seed,
            epochs,
            variant,
        } => {
            let mut cfg: DistillRunConfig = config::load(config.as_deref())?;
            cfg.data = data.or(cfg.data);
            cfg.teacher = teacher.or(cfg.teacher);
            cfg.out = out.or(cfg.out);
            if let Some(s) = seed {
                cfg.schedule.seed = s;
            }
            override_epochs(&mut cfg.schedule, epochs);
            if let Some(v) = variant {
                cfg.distill.variant = parse_variant(&v)?;
            }
            distill_cmd(&cfg)
        }
        Command::FinetuneDg {
            config,
            data,
            guides,
            student,
            out,
            seed,
            epochs,
            lambda,
        } => {
            let mut cfg: FinetuneDgConfig = config::load(config.as_deref())?;
            cfg.data = data.or(cfg.data);
            cfg.guides = guides.or(cfg.guides);
            cfg.student = student.or(cfg.student);
            cfg.out = out.or(cfg.out);
            if let Some(s) = seed {
                cfg.schedule.seed = s;
            }
            override_epochs(&mut cfg.schedule, epochs);
            if let Some(l) = lambda {
                cfg.double_guidance.lambda = l;
            }
            finetune(&cfg)
        }
        Command::Eval { checkpoint, data, k, out } => eval(&checkpoint, &data, k, out.as_deref()),
        Command::RmacAudit {
            config,
            features,
            data,
            top_k,
            out,
            dump,
            seed,
        } => {
            let mut cfg: RmacAuditConfig = config::load(config.as_deref())?;
            cfg.features = features.or(cfg.features);
            cfg.data = data.or(cfg.data);
            cfg.out = out.or(cfg.out);
            cfg.dump = dump.or(cfg.dump);
            cfg.top_k = top_k.unwrap_or(cfg.top_k);
            cfg.seed = seed.unwrap_or(cfg.seed);
            rmac_audit(&cfg)
        }
        Command::Export { run, format, out } => {
            let format = match format {
                FormatArg::Csv => ExportFormat::Csv,
                FormatArg::Json => ExportFormat::Json,
            };
            let path = export_metrics(&run, format, out.as_deref())?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(sbir_core::Error::from)?;
    s.push('\n');
    write_file(path, s.as_bytes())?;
    Ok(())
}

fn gen_data(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut spec: SynthSpec = config::load(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = generate_dataset(&spec)?;
    ds.save(out)?;
    write_json(&out.join("config.json"), &json!({ "command": "gen-data", "spec": spec }))?;
    println!(
        "wrote {} photos ({} train), {} sketches, {} injected duplicates to {}",
        ds.n_photos(),
        ds.train_photos().len(),
        ds.n_sketches(),
        ds.ambiguous_pairs.len(),
        out.display()
    );
    Ok(())
}

/// A checkpoint file, or the final checkpoint of a run directory.
fn checkpoint_at(p: &Path) -> Result<Checkpoint, CliError> {
    let path = if p.is_dir() { p.join(FINAL_CHECKPOINT) } else { p.to_path_buf() };
    Ok(Checkpoint::load(&path)?)
}

fn finish(mut run: RunArtifacts, effective: &impl Serialize, out: &Path) -> Result<(), CliError> {
    if let serde_json::Value::Object(map) = &mut run.config {
        map.insert("cli".into(), serde_json::to_value(effective).map_err(sbir_core::Error::from)?);
    }
    run.write_dir(out)?;
    let s = &run.summary;
    println!(
        "{}: {} epochs, recall@1 {:.4} -> {:.4} (best {:.4} at epoch {}), artifacts in {}",
        s.pipeline,
        s.epochs,
        s.initial_recall,
        s.final_recall,
        s.best_recall,
        s.best_epoch,
        out.display()
    );
    Ok(())
}

fn train(cfg: &TrainRtlConfig) -> Result<(), CliError> {
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    cfg.rtl.validate()?;
    cfg.schedule.validate()?;
    let ds = CrossDomainDataset::load(&data)?;
    let seed = cfg.schedule.seed;
    let mut photo = build_encoder(&cfg.photo_encoder.resolve(ds.spec.photo_dim)?, seed + PHOTO_INIT_OFFSET)?;
    let mut sketch = build_encoder(&cfg.sketch_encoder.resolve(ds.spec.sketch_dim)?, seed + SKETCH_INIT_OFFSET)?;
    let run = train_rtl(&ds, &mut photo, &mut sketch, &cfg.rtl, cfg.objective, &cfg.schedule)?;
    finish(run, cfg, &out)
}

fn parse_variant(name: &str) -> Result<DistillVariant, CliError> {
    Ok(match name {
        "mse" => DistillVariant::Mse,
        "mae" => DistillVariant::Mae,
        "mse+mae" => DistillVariant::mse_mae(),
        "huber" => DistillVariant::huber(),
        "kl" => DistillVariant::kl(),
        "kl+softmax" => DistillVariant::kl_softmax(),
        other => {
            return Err(CliError::Validation(format!(
                "unknown distillation variant {other:?}; expected mse, mae, mse+mae, huber, kl or kl+softmax"
            )))
        }
    })
}

fn distill_cmd(cfg: &DistillRunConfig) -> Result<(), CliError> {
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let teacher_path = required(&cfg.teacher, "teacher")?;
    cfg.distill.variant.validate()?;
    cfg.schedule.validate()?;
    let ds = CrossDomainDataset::load(&data)?;
    let ckpt = checkpoint_at(&teacher_path)?;
    let (mut teacher, mut counterpart, input_dim) = match cfg.distill.domain {
        Domain::Sketch => (ckpt.sketch, ckpt.photo, ds.spec.sketch_dim),
        Domain::Photo => (ckpt.photo, ckpt.sketch, ds.spec.photo_dim),
    };
    teacher.freeze();
    counterpart.freeze();
    let mut student = build_encoder(&cfg.student.resolve(input_dim)?, cfg.schedule.seed + STUDENT_INIT_OFFSET)?;
    let run = distill(&ds, &teacher, &mut student, &counterpart, &cfg.distill, &cfg.schedule)?;
    finish(run, cfg, &out)
}

fn finetune(cfg: &FinetuneDgConfig) -> Result<(), CliError> {
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let guides = checkpoint_at(&required(&cfg.guides, "guides")?)?;
    let mut student = checkpoint_at(&required(&cfg.student, "student")?)?.sketch;
    cfg.double_guidance.validate()?;
    cfg.schedule.validate()?;
    let ds = CrossDomainDataset::load(&data)?;
    let (mut photo, mut teacher) = (guides.photo, guides.sketch);
    photo.freeze();
    teacher.freeze();
    student.frozen = false;
    let run = finetune_double_guidance(&ds, &photo, &teacher, &mut student, &cfg.double_guidance, &cfg.schedule)?;
    finish(run, cfg, &out)
}

fn eval(checkpoint: &Path, data: &Path, k: usize, out: Option<&Path>) -> Result<(), CliError> {
    let ckpt = checkpoint_at(checkpoint)?;
    let ds = CrossDomainDataset::load(data)?;
    let record = evaluate_checkpoint(&ckpt, &ds, k, &checkpoint.display().to_string())?;
    match out {
        Some(p) => write_json(p, &record),
        None => {
            println!("{}", serde_json::to_string_pretty(&record).map_err(sbir_core::Error::from)?);
            Ok(())
        }
    }
}

fn feature_sizes(cfg: &RmacAuditConfig) -> Result<Vec<usize>, CliError> {
    if cfg.feature_stride == 0 {
        return Err(CliError::Validation("feature_stride must be >= 1".into()));
    }
    cfg.rmac
        .resolutions
        .iter()
        .map(|r| match r.parse::<usize>() {
            Ok(px) if px >= cfg.feature_stride => Ok(px / cfg.feature_stride),
            _ => Err(CliError::Validation(format!(
                "resolution {r:?} must be an integer of at least {} pixels",
                cfg.feature_stride
            ))),
        })
        .collect()
}

fn describe_dataset(ds: &CrossDomainDataset, cfg: &RmacAuditConfig) -> Result<Tensor, CliError> {
    let spec = FeatureMapSpec {
        channels: cfg.channels,
        sizes: feature_sizes(cfg)?,
        seed: cfg.seed,
    };
    let mut data = Vec::with_capacity(ds.n_photos() * cfg.channels);
    for i in 0..ds.n_photos() {
        let volumes = photo_feature_maps(ds.photos.row(i), i, &spec)?;
        data.extend(multires_rmac(&volumes, &cfg.rmac)?);
    }
    Ok(Tensor::matrix(ds.n_photos(), cfg.channels, data)?)
}

fn rmac_audit(cfg: &RmacAuditConfig) -> Result<(), CliError> {
    let out = required(&cfg.out, "out")?;
    cfg.rmac.validate()?;
    if cfg.top_k == 0 {
        return Err(CliError::Validation("top-k must be >= 1".into()));
    }
    let (descriptors, ds) = match (&cfg.features, &cfg.data) {
        (Some(f), None) => (read_matrix(f, DESCRIPTOR_MAGIC)?, None),
        (None, Some(d)) => {
            let ds = CrossDomainDataset::load(d)?;
            (describe_dataset(&ds, cfg)?, Some(ds))
        }
        _ => return Err(CliError::Validation("pass exactly one of --features and --data".into())),
    };
    if let Some(p) = &cfg.dump {
        write_matrix(p, DESCRIPTOR_MAGIC, &descriptors)?;
    }
    let pairs = find_ambiguous_pairs(&descriptors, cfg.top_k)?;
    let mut csv = String::from("rank,i,j,distance\n");
    for (rank, p) in pairs.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{}\n", rank + 1, p.i, p.j, format_float(p.distance)));
    }
    write_file(&out, csv.as_bytes())?;
    write_json(&echo_path(&out), &json!({ "command": "rmac-audit", "config": cfg }))?;

    print!("ranked {} pairs of {} descriptors", pairs.len(), descriptors.rows());
    if let Some(ds) = ds {
        let injected = pairs
            .iter()
            .filter(|p| ds.ambiguous_pairs.iter().any(|&(a, b)| (a.min(b), a.max(b)) == (p.i, p.j)))
            .count();
        print!("; {injected} of them are injected duplicates ({} injected in total)", ds.ambiguous_pairs.len());
    }
    println!(", written to {}", out.display());
    Ok(())
}

/// `pairs.csv` -> `pairs.config.json`, next to the report.
fn echo_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.config.json"))
}
