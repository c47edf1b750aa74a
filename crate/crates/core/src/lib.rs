//! Fairness auditing for text-to-image models.
//!
//! The crate covers the whole audit loop: building bias-sensitive prompt
//! suites, driving generation backends, labeling the gender expression and
//! skintone of every generated image, and scoring representation bias and
//! content-alignment error with four-fifths verdicts.
//!
//! Skintone labeling fuses two signals: a small CNN trained on synthetic faces
//! ([`topology`]) and an area-weighted distribution of the dominant skin pixels
//! found by Otsu segmentation ([`color`]). The fusion head lives in
//! [`skintone`].

pub mod checkpoint;
pub mod color;
pub mod dataset;
pub mod fairness;
pub mod generation;
pub mod labeling;
pub mod nn;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod scale;
pub mod skintone;
pub mod synth;
pub mod topology;

pub use color::{
    baseline_classify, detect_face, dominant_pixels, otsu_threshold, segment_skin, FaceRegion,
    PixelDistribution, SkinMask, SkinPriors,
};
pub use fairness::{
    aggregate_report, alignment_error, four_fifths_verdict, group_parity, normalization_z,
    representation_bias, FairnessConfig, LabelCounts,
};
pub use labeling::{label_batch, label_image, DemographicLabel, Gender, GenderLabel};
pub use prompts::{build_suite, reference_distribution, PromptKind, PromptSpec, TargetDomain};
pub use scale::{ScalePalette, SkinToneGroup, SkinToneScale};
pub use skintone::{fuse_and_classify, joint_loss, ordinal_metrics, FusionModel, SkinTonePrediction};
pub use topology::{extract_features, TopologyFeatures, TopologyGroup, TopologyModel};
