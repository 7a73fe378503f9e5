//! Two-stage retinal vessel segmentation with error-attention refinement.
//!
//! A stride-4 segmentation trunk is trained first. Its masks on the
//! training set yield false-negative error maps, which supervise a small
//! attention branch that rescales the trunk logits during a second,
//! joint fine-tuning stage.

pub mod backbone;
pub mod dataio;
pub mod eam;
pub mod error;
pub mod errormaps;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod trainer;

pub use backbone::{
    check_input_dims, init_params, scale_attention_fuse, Backbone, BackboneConfig, FeatureMap, ScaleAttentionMap,
    SemanticLogits, FEATURE_STRIDE, INPUT_MULTIPLE,
};
pub use dataio::{load_dataset, make_folds, synth_vessels, DatasetManifest, Fold, Layout, RetinalSample, Split};
pub use eam::{refine_logits, AttentionMap, Eam, FusionWeights};
pub use error::{Error, Result};
pub use errormaps::{align_error_map, binarize, generate_error_map, ErrorMap, MaskCache, PredictedMask};
pub use eval::{
    confusion, cross_validate, evaluate, metrics, render_overlay, ConfusionCounts, CrossValReport, EvalOptions,
    Metrics, MetricsReport,
};
pub use losses::{ce_loss, ea_loss, hm_loss, total_loss, LossWeights};
pub use trainer::{
    generate_initial_masks, run_two_stage, train_stage1, train_stage2, Checkpoint, SegModel, TrainConfig, TrainLog,
};
