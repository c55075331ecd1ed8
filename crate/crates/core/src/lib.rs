//! Geometric matching between image pairs with a trainable
//! extract / correlate / regress pipeline.
//!
//! The library estimates an affine or thin-plate-spline transformation
//! relating two images. Dense descriptor maps are extracted by a small
//! weight-shared convolutional network, matched exhaustively through a
//! correlation layer, and fed to a convolutional regressor that outputs the
//! transformation parameters directly. Models are trained from synthetically
//! warped image pairs and scored with keypoint- and mask-transfer metrics.
//!
//! Module map:
//! - [`tensor`]: dense tensors with tape-based reverse-mode differentiation
//! - [`transforms`]: affine / TPS models, the grid loss, composition, inversion
//! - [`matching`]: correlation layer, correspondence normalization, ablation variants
//! - [`network`]: feature extractor, parameter regressor, one- and two-stage estimators
//! - [`resampler`]: bilinear inverse warping
//! - [`synthgen`]: synthetic training-pair and dataset generation
//! - [`trainer`]: SGD training loop and binary checkpoints
//! - [`evaluation`]: PCK / mask-transfer benchmarks, RANSAC baseline, difference maps
//!
//! The `parallel` feature (on by default) runs the data-parallel inner loops
//! on a rayon pool; disabling it yields a dependency-free sequential build
//! with bitwise-identical results.

pub mod error;
pub mod evaluation;
pub mod io;
pub mod matching;
pub mod network;
mod par;
pub mod resampler;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
pub use transforms::{AffineParams, PointGrid, TpsParams, TransformParams};
