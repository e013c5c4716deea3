//! Correspondence filtering for two-view geometry.
//!
//! Trains a cascade attention classifier that separates inlier from outlier
//! correspondences and feeds a weighted eight-point solver for essential
//! matrix estimation. The classifier is trained with a guided cross-entropy
//! loss whose class weights are re-solved every batch so that a decrease in
//! loss always corresponds to an increase of the chosen F-measure.
//!
//! Layering, bottom up:
//!
//! - [`autodiff`]: reverse-mode differentiation over dense `f64` arrays.
//! - [`linalg`]: small fixed-size matrix algebra and a cyclic Jacobi
//!   eigensolver for symmetric matrices.
//! - [`geometry`]: essential matrix construction, epipolar residuals, the
//!   weighted eight-point solve, pose recovery and a RANSAC baseline.
//! - [`datagen`]: synthetic two-view scenes with controlled outlier ratios,
//!   plus the on-disk dataset container.
//! - [`prior`]: inlier probability priors from match distinctiveness ratios.
//! - [`loss`]: F-measure machinery and the guided class-weight solver.
//! - [`blocks`]: differentiable point-set network blocks.
//! - [`cascade`]: the three-stage coarse-to-fine classifier and its
//!   combined objective.
//! - [`trainer`]: Adam optimization loop, logging, checkpointing.
//! - [`metrics`]: evaluation metrics and the method comparison runner.

pub mod autodiff;
pub mod blocks;
pub mod cascade;
pub mod cli;
pub mod datagen;
pub mod geometry;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod prior;
pub mod trainer;
