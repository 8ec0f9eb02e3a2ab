//! JSON experiment configs. Every field has a default, unknown keys are
//! rejected, and command-line flags are applied on top after loading.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sbir_core::encoder::DEFAULT_EMBEDDING_DIM;
use sbir_core::io::read_file;
use sbir_core::{
    DistillConfig, DoubleGuidanceConfig, EncoderConfig, HeadKind, Objective, RmacConfig, RtlConfig, TrainSchedule,
};

use crate::CliError;

/// Reads `path` as a JSON config, or returns the default when no path is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// An encoder described by capacity tag, with optional explicit widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub capacity: String,
    /// Overrides the widths implied by `capacity`.
    pub hidden_dims: Option<Vec<usize>>,
    pub embedding_dim: usize,
    pub head: HeadKind,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            capacity: "base".into(),
            hidden_dims: None,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            head: HeadKind::Batchnorm,
        }
    }
}

impl EncoderSpec {
    pub fn resolve(&self, input_dim: usize) -> Result<EncoderConfig, CliError> {
        let mut cfg = match &self.hidden_dims {
            Some(h) => EncoderConfig {
                input_dim,
                hidden_dims: h.clone(),
                embedding_dim: self.embedding_dim,
                head: self.head,
                capacity_tag: self.capacity.clone(),
            },
            None => EncoderConfig::ladder(&self.capacity, input_dim, self.embedding_dim, self.head)?,
        };
        cfg.capacity_tag = self.capacity.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRtlConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub photo_encoder: EncoderSpec,
    pub sketch_encoder: EncoderSpec,
    pub rtl: RtlConfig,
    pub objective: Objective,
    pub schedule: TrainSchedule,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillRunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Checkpoint (or run directory) holding the teacher and its counterpart.
    pub teacher: Option<PathBuf>,
    pub student: EncoderSpec,
    pub distill: DistillConfig,
    pub schedule: TrainSchedule,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneDgConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Checkpoint with the frozen photo encoder and the sketch teacher.
    pub guides: Option<PathBuf>,
    /// Checkpoint whose sketch encoder is the student to finetune.
    pub student: Option<PathBuf>,
    pub double_guidance: DoubleGuidanceConfig,
    pub schedule: TrainSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmacAuditConfig {
    /// Descriptor dump to rank.
    pub features: Option<PathBuf>,
    /// Dataset whose photos are rendered to feature maps and described.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Where to write the computed descriptors when auditing a dataset.
    pub dump: Option<PathBuf>,
    pub top_k: usize,
    pub channels: usize,
    /// Input pixels per feature-map cell; resolution tags are divided by it.
    pub feature_stride: usize,
    pub seed: u64,
    pub rmac: RmacConfig,
}

impl Default for RmacAuditConfig {
    fn default() -> Self {
        RmacAuditConfig {
            features: None,
            data: None,
            out: None,
            dump: None,
            top_k: 100,
            channels: 64,
            feature_stride: 32,
            seed: 0,
            rmac: RmacConfig::default(),
        }
    }
}

pub fn required(v: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    v.clone()
        .ok_or_else(|| CliError::Validation(format!("missing {what}: pass --{what} or set \"{what}\" in the config")))
}

/// Epoch-count override that keeps the learning-rate boundary inside the run.
pub fn override_epochs(sched: &mut TrainSchedule, epochs: Option<usize>) {
    if let Some(e) = epochs {
        sched.epochs_total = e;
        if e > 0 && sched.stage_boundary_epoch > e {
            sched.stage_boundary_epoch = e;
        }
    }
}
