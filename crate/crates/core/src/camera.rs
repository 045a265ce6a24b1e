//! Pinhole camera model with a single focal length, plus the canonical-camera
//! rectification used to make every sample look as if it came from one camera.
//!
//! Pixel coordinates are continuous, with the origin at the top-left corner,
//! `u` pointing right and `v` pointing down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Point3;

/// Default canonical focal length in pixels.
pub const DEFAULT_CANONICAL_FOCAL: f64 = 500.0;
/// Default canonical crop side in pixels.
pub const DEFAULT_CANONICAL_SIZE: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Focal length in pixels (`f_x == f_y`).
    pub f: f64,
    /// Principal point in pixels.
    pub u0: f64,
    pub v0: f64,
    /// Frame size in pixels.
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(f: f64, u0: f64, v0: f64, width: u32, height: u32) -> Result<Self> {
        let cam = CameraIntrinsics {
            f,
            u0,
            v0,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f.is_finite() && self.f > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "focal length must be positive, got {}",
                self.f
            )));
        }
        if !(self.u0.is_finite() && self.v0.is_finite()) {
            return Err(Error::InvalidConfig(
                "principal point must be finite".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig(format!(
                "frame size must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera with focal length derived from a horizontal field of view and
    /// the principal point at the frame centre.
    pub fn from_fov(fov_deg: f64, width: u32, height: u32) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::InvalidConfig(format!(
                "field of view must be in (0, 180) degrees, got {fov_deg}"
            )));
        }
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self::new(f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel2 {
    pub u: f64,
    pub v: f64,
}

impl Pixel2 {
    pub const fn new(u: f64, v: f64) -> Self {
        Pixel2 { u, v }
    }
}

/// Normalized image-plane coordinates, `K^-1 [u v 1]^T` without the trailing 1.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Ray2 {
    pub up: f64,
    pub vp: f64,
}

impl Ray2 {
    pub const fn new(up: f64, vp: f64) -> Self {
        Ray2 { up, vp }
    }
}

pub fn project(cam: &CameraIntrinsics, p: &Point3) -> Result<Pixel2> {
    if !(p.z > 0.0) {
        return Err(Error::NonPositiveDepth { depth: p.z });
    }
    Ok(Pixel2 {
        u: cam.f * p.x / p.z + cam.u0,
        v: cam.f * p.y / p.z + cam.v0,
    })
}

pub fn normalize_pixel(cam: &CameraIntrinsics, px: &Pixel2) -> Ray2 {
    Ray2 {
        up: (px.u - cam.u0) / cam.f,
        vp: (px.v - cam.v0) / cam.f,
    }
}

/// Inverse of [`normalize_pixel`].
pub fn ray_to_pixel(cam: &CameraIntrinsics, ray: &Ray2) -> Pixel2 {
    Pixel2 {
        u: cam.f * ray.up + cam.u0,
        v: cam.f * ray.vp + cam.v0,
    }
}

/// Canonical intrinsics `{f_canon, crop_w/2, crop_h/2}` for a crop of the given
/// size, together with the resize ratio `f_canon / f`.
pub fn rectify_intrinsics(
    cam: &CameraIntrinsics,
    f_canon: f64,
    crop_w: u32,
    crop_h: u32,
) -> Result<(CameraIntrinsics, f64)> {
    cam.validate()?;
    let canon = CameraIntrinsics::new(
        f_canon,
        0.5 * crop_w as f64,
        0.5 * crop_h as f64,
        crop_w,
        crop_h,
    )?;
    Ok((canon, f_canon / cam.f))
}

/// Maps a pixel of `cam` to the pixel of `cam_canon` that sees the same ray.
pub fn rectify_pixel(cam: &CameraIntrinsics, cam_canon: &CameraIntrinsics, px: &Pixel2) -> Pixel2 {
    ray_to_pixel(cam_canon, &normalize_pixel(cam, px))
}

pub fn unrectify_pixel(
    cam: &CameraIntrinsics,
    cam_canon: &CameraIntrinsics,
    px_canon: &Pixel2,
) -> Pixel2 {
    ray_to_pixel(cam, &normalize_pixel(cam_canon, px_canon))
}
