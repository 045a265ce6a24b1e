//! Closed-form root positioning for root-relative 3D keypoints.
//!
//! Given root-relative 3D keypoints, their 2D detections and per-keypoint
//! confidences, [`solve::solve_wls`] recovers the camera-space translation of
//! the root by weighted linear least squares, and [`solve::PositioningPass`]
//! carries the exact reverse-mode gradient of that solve so it can sit inside
//! a trained pipeline.
//!
//! - [`camera`]: pinhole model and canonical-camera rectification
//! - [`system`], [`solve`]: the linear system, its solve and its gradient
//! - [`loss`]: camera-space assembly and training losses
//! - [`synth`]: synthetic scenes, perturbations and independent oracles
//! - [`train`]: a linear toy pipeline trained through the solver
//! - [`io`]: JSON file formats

// `!(x > 0.0)` is used on purpose so that NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod error;
pub mod io;
pub mod loss;
pub mod regressor;
pub mod solve;
pub mod synth;
pub mod system;
pub mod train;

pub use camera::{
    normalize_pixel, project, rectify_intrinsics, rectify_pixel, unrectify_pixel, CameraIntrinsics,
    Pixel2, Ray2,
};
pub use error::{Error, Result};
pub use loss::{
    loss_keypoint_consistency, loss_projected_vertices, loss_relative_l1, loss_translation_rmse,
    to_camera_space,
};
pub use regressor::{apply_regressor, KeypointRegressor};
pub use solve::{
    solve_ls, solve_wls, solve_wls_vjp, GradientBundle, PositioningPass, SolveResult, WeightVector,
};
pub use system::{build_system, LinearSystem};

/// Version string recorded in output files.
pub const VERSION: &str = concat!("rootfit ", env!("CARGO_PKG_VERSION"));

/// A point in a camera-oriented frame, in metres.
pub type Point3 = nalgebra::Point3<f64>;
/// A translation in metres.
pub type Translation3 = nalgebra::Vector3<f64>;
