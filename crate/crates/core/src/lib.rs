//! Minimal-sufficient contrastive representation learning for multi-domain
//! signals, with multi-scale features and an entropy-based domain regularizer.
//!
//! The crate trains a small 1-D convolutional encoder so that unit-norm
//! projections of its multi-scale features (a) pull same-class samples
//! together under a temperature-scaled contrastive objective and (b) keep the
//! per-domain conditional entropy H(z|d) high, which removes domain-specific
//! information from the embedding. The conditional-entropy term is made
//! differentiable through a kernel Stein estimate of the score function. A
//! second stage freezes the encoder and trains a light attention classifier
//! over epoch sequences.
//!
//! Module layout, roughly bottom-up:
//!
//! * [`numerics`]: dense matrices, a ridge solver, seeded RNG plumbing.
//! * [`vmf`]: von Mises-Fisher density, sampling, entropy (analytic oracles
//!   for everything that estimates entropy on the sphere).
//! * [`stein`]: kernel Stein score estimation and the H(z|d) surrogate.
//! * [`losses`]: the contrastive objective, its entropy-regularized and
//!   multi-scale forms, and scalar identity checks used by theory tests.
//! * [`model`]: tape-based reverse-mode autodiff, the encoder, augmentation,
//!   AdamW, checkpoints.
//! * [`data`]: synthetic multi-domain benchmark, dataset container format,
//!   fold splitting, the two-domain batch sampler.
//! * [`staging`]: frozen-encoder sequence classifier (stage 2).
//! * [`metrics`]: Cohen's kappa, macro-F1, kNN differential entropy, and the
//!   information diagnostics report.
//! * [`train`]: the stage-1 pre-training loop tying the above together.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod staging;
pub mod stein;
pub mod train;
pub mod vmf;

pub use data::{
    kfold_split, read_dataset, sequence_views, synth_generate, write_dataset, Dataset,
    DatasetHeader, DatasetReader, EpochSample, FoldPlan, SequenceView, SynthConfig,
    TwoDomainSampler, CLASS_NAMES, N_CLASSES,
};
pub use error::{Error, Result};
pub use losses::{BatchEmbeddings, DenominatorMode, EntropyTerm, LossConfig};
pub use metrics::{
    cohens_kappa, info_report, knn_entropy, macro_f1, per_class_f1, ConfusionMatrix, InfoReport,
};
pub use model::{AugmentConfig, EncoderSpec, OptimConfig, ParamStore};
pub use numerics::{Matrix, Rng};
pub use staging::{
    encode_dataset, predict_all, train_staging, FeatureCache, StageOutputs, StagingConfig,
    StagingOutcome,
};
pub use stein::{Bandwidth, DomainWeighting, KernelConfig, SteinEstimate};
pub use train::{gradient_check, pretrain, GradCheckReport, PretrainConfig, StepLog};
