//! Cross-domain sketch-based image retrieval: a small autodiff tape, relative
//! triplet and distillation losses, MLP encoders, exhaustive retrieval, RMAC
//! descriptors and a synthetic benchmark with training pipelines on top.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod norm;
pub mod optim;
pub mod pipelines;
pub mod retrieval;
pub mod rmac;
pub mod synth;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use encoder::{build_encoder, Encoder, EncoderConfig, HeadKind};
pub use error::{Error, Result};
pub use losses::{
    distill_loss, double_guidance_loss, rtl_loss, DistillVariant, Distance, LossReport, Reduction, RtlConfig,
};
pub use metrics::{export_metrics, ExportFormat, MetricsRow};
pub use norm::{l2_normalize, BatchNormHead, Mode};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState};
pub use pipelines::{
    distill, evaluate_checkpoint, finetune_double_guidance, train_rtl, DistillConfig, Domain, DoubleGuidanceConfig,
    Objective, RunArtifacts, TrainSchedule,
};
pub use retrieval::{GalleryIndex, Hit, Metric, PhotoId, RecallRecord};
pub use rmac::{find_ambiguous_pairs, multires_rmac, rmac_descriptor, FeatureVolume, RmacConfig};
pub use synth::{generate_dataset, CrossDomainDataset, SynthSpec};
pub use tensor::{Tape, Tensor, Var};
