//! Dense CRF segmentation with mean-field inference through Gaussian
//! filtering, trained jointly with a differentiable unary scorer by
//! backpropagating through the unrolled mean-field updates.
//!
//! Fields are stored pixel-major: value `(i, l)` of an `H x W x L` field
//! lives at `i * L + l` with `i = y * W + x`.

pub mod crf;
pub mod data;
pub mod error;
pub mod fields;
pub mod filter;
pub mod gradcheck;
pub mod image;
pub mod learning;
pub mod meanfield;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod unary;

pub use crf::{Compatibility, KernelEntry, PairwiseModel};
pub use error::{Error, Result};
pub use fields::{
    argmax_labeling, softmax_normalize, Assignment, Field, LabelMap, LabelSpace, MarginalField,
    ScoreField, VOID_LABEL,
};
pub use filter::{build_features, FeatureField, FeatureKind, FilterMode, FilterPlan, KernelSpec};
pub use image::RgbImage;
pub use learning::{
    loss_nll, mf_backward, train_step, BackwardOptions, GradientBundle, LossMode, LossReport,
    SigmaGrad, StepReport, TrainConfig,
};
pub use meanfield::{mf_infer, MfConfig, MfTrajectory, UpdateMode};
pub use metrics::{accumulate, iou_per_class, mean_iou, ConfusionMatrix};
pub use optim::{sgd_step, OptimConfig, OptimState, ParamGroup, ParamTensor};
pub use oracle::{enumerate_distribution, global_score};
pub use unary::{AnyUnary, ConvNetUnary, LinearUnary, UnaryProvider};
