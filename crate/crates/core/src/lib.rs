//! Adversarial patch detection from the attention of a shallow CNN prefix.
//!
//! An image is pushed through the first few convolution layers of a
//! pretrained network, the activation at a detection layer is averaged over
//! channels into an attention map, and the map's maximum is compared with a
//! threshold calibrated on clean images only.
//!
//! - [`tensor`]: feature maps and the conv/ReLU/max-pool kernels.
//! - [`bundle`], [`preprocess`]: the PGWB weight format and input pipeline.
//! - [`attention`]: attention maps and the max-attention indicator.
//! - [`calibration`]: threshold selection and the persisted profile.
//! - [`detector`]: the decision pipeline, single image and batch.
//! - [`dataset`]: splits, synthetic patches, balanced test sets.
//! - [`eval`]: precision/recall/F-score and per-layer separation scans.
//! - [`golden`]: parity replay of externally computed activations.
//! - [`synthetic`]: generated scenes and crafted bundles for testing.

pub mod attention;
pub mod bundle;
pub mod calibration;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod golden;
pub mod preprocess;
pub mod synthetic;
pub mod tensor;
pub mod util;

pub use attention::{
    attention_map, indicator_at_layer, indicator_ir, AttentionMap, Indicator, Tap, TapPoint,
};
pub use bundle::{load_bundle, save_bundle, WeightBundle};
pub use calibration::{
    calibrate, calibrate_values, collect_clean_indicators, load_profile, save_profile,
    CalibrationProfile, IndicatorSample, Threshold,
};
pub use dataset::{
    apply_patch, build_balanced_testset, split, Label, LabeledSample, PatchContent, PatchSpec,
    Placement, SplitSpec,
};
pub use detector::{decide, detect, detect_batch, DetectionResult, Detector, Verdict};
pub use error::{Error, Result};
pub use eval::{export_histogram, layer_scan, recommend_layer, score, EvalReport, LayerScanReport};
pub use preprocess::{preprocess_image, preprocess_rgb, ChannelOrder, Preprocess};
pub use tensor::{conv3x3, forward_prefix, maxpool2x2, relu, ConvLayerSpec, LayerOp, Tensor};
