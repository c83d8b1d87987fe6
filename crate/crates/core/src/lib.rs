//! Language-embedded Gaussian-splat SLAM on CPU: G-ICP tracking, a
//! differentiable splat renderer, compact feature codec, pruning, loop
//! closure and open-vocabulary queries.

// `!(x > 0.0)` is used on purpose so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gicp;
pub mod kdtree;
pub mod loop_closure;
pub mod map;
pub mod mapping;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod prune;
pub mod query;
pub mod raster;
pub mod render;
pub mod synthetic;

pub use codec::CodecParams;
pub use config::RunConfig;
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use geometry::{backproject, project, CameraIntrinsics, Pose, Twist};
pub use gicp::{AlignmentResult, CovPointCloud, GicpConfig};
pub use loop_closure::{Codebook, PoseEdge, PoseGraph};
pub use map::{GaussianMap, Keyframe, LanguageGaussian};
pub use mapping::{LossBreakdown, LossWeights};
pub use pipeline::{run_pipeline, RunResult};
pub use raster::{FeatureMap, Raster};
pub use render::{render, render_backward, Gradients, RenderOutput};
pub use synthetic::{Frame, SyntheticSceneSpec};
