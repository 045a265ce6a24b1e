//! Camera-space assembly and the training losses, with their gradients.
//!
//! L1 terms use the subgradient `sign(0) = 0`.

use crate::camera::{project, CameraIntrinsics, Pixel2};
use crate::error::{Error, Result};
use crate::{Point3, Translation3};

/// `v_cs = v_rel + t` for every vertex.
pub fn to_camera_space(verts_rel: &[Point3], t: &Translation3) -> Vec<Point3> {
    verts_rel.iter().map(|v| v + t).collect()
}

pub fn loss_translation_rmse(t_pred: &Translation3, t_gt: &Translation3) -> f64 {
    (t_pred - t_gt).norm() / 3f64.sqrt()
}

/// Gradient of [`loss_translation_rmse`] with respect to `t_pred`.
pub fn loss_translation_rmse_grad(t_pred: &Translation3, t_gt: &Translation3) -> Translation3 {
    let d = t_pred - t_gt;
    let rmse = d.norm() / 3f64.sqrt();
    if rmse > 0.0 {
        d / (3.0 * rmse)
    } else {
        Translation3::zeros()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Mean absolute componentwise difference of two point sets.
pub fn loss_relative_l1(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    check_len("point count", pred.len(), gt.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).abs().sum()).sum();
    Ok(sum / (3 * pred.len()) as f64)
}

pub fn loss_relative_l1_grad(pred: &[Point3], gt: &[Point3]) -> Result<Vec<Translation3>> {
    check_len("point count", pred.len(), gt.len())?;
    let scale = 1.0 / (3 * pred.len().max(1)) as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g).map(sign) * scale)
        .collect())
}

/// Mean absolute componentwise difference of two pixel sets.
pub fn loss_pixel_l1(pred: &[Pixel2], gt: &[Pixel2]) -> Result<f64> {
    check_len("pixel count", pred.len(), gt.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p.u - g.u).abs() + (p.v - g.v).abs())
        .sum();
    Ok(sum / (2 * pred.len()) as f64)
}

pub fn loss_pixel_l1_grad(pred: &[Pixel2], gt: &[Pixel2]) -> Result<Vec<[f64; 2]>> {
    check_len("pixel count", pred.len(), gt.len())?;
    let scale = 1.0 / (2 * pred.len().max(1)) as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| [sign(p.u - g.u) * scale, sign(p.v - g.v) * scale])
        .collect())
}

/// Value and gradients of `mean |project(p_i) - target_i|` over both pixel axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedL1 {
    pub value: f64,
    pub d_points: Vec<Translation3>,
    pub d_targets: Vec<[f64; 2]>,
}

pub fn projected_l1(
    cam: &CameraIntrinsics,
    points_cs: &[Point3],
    targets: &[Pixel2],
) -> Result<ProjectedL1> {
    check_len("target count", points_cs.len(), targets.len())?;
    let n = points_cs.len().max(1);
    let scale = 1.0 / (2 * n) as f64;
    let mut value = 0.0;
    let mut d_points = Vec::with_capacity(points_cs.len());
    let mut d_targets = Vec::with_capacity(points_cs.len());
    for (p, target) in points_cs.iter().zip(targets) {
        let px = project(cam, p)?;
        let (du, dv) = (px.u - target.u, px.v - target.v);
        value += du.abs() + dv.abs();
        let su = sign(du) * scale;
        let sv = sign(dv) * scale;
        let fz = cam.f / p.z;
        d_points.push(Translation3::new(
            su * fz,
            sv * fz,
            -(su * p.x + sv * p.y) * fz / p.z,
        ));
        d_targets.push([-su, -sv]);
    }
    Ok(ProjectedL1 {
        value: value * scale,
        d_points,
        d_targets,
    })
}

/// L1 between 2D keypoint predictions and the projection of the camera-space
/// 3D keypoints.
pub fn loss_keypoint_consistency(
    cam: &CameraIntrinsics,
    k3d_cs: &[Point3],
    k2d_pred: &[Pixel2],
) -> Result<f64> {
    Ok(projected_l1(cam, k3d_cs, k2d_pred)?.value)
}

/// L1 between the projection of camera-space vertices and their 2D ground truth.
pub fn loss_projected_vertices(
    cam: &CameraIntrinsics,
    verts_cs: &[Point3],
    verts2d_gt: &[Pixel2],
) -> Result<f64> {
    Ok(projected_l1(cam, verts_cs, verts2d_gt)?.value)
}
