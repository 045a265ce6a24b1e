//! The stacked linear system `A t = B` relating a root translation to 2D-3D
//! keypoint correspondences.
//!
//! For keypoint `i` with root-relative position `(x, y, z)` and normalized
//! ray `(u', v')`, the projection constraint rearranges to two rows:
//!
//! ```text
//! [-1  0  u'] t = x - z u'
//! [ 0 -1  v'] t = y - z v'
//! ```

use crate::camera::Ray2;
use crate::error::{Error, Result};
use crate::Point3;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    rows: Vec<[f64; 3]>,
    rhs: Vec<f64>,
    depths: Vec<f64>,
}

impl LinearSystem {
    /// Number of correspondences, i.e. half the row count.
    pub fn n_keypoints(&self) -> usize {
        self.depths.len()
    }

    /// Rows of `A`; rows `2i` and `2i+1` belong to keypoint `i`.
    pub fn rows(&self) -> &[[f64; 3]] {
        &self.rows
    }

    /// Entries of `B`.
    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// Root-relative depth `z_i` of each keypoint.
    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    /// Keeps only the listed keypoints, in the given order.
    pub fn select(&self, keypoints: &[usize]) -> Result<LinearSystem> {
        let mut out = LinearSystem {
            rows: Vec::with_capacity(2 * keypoints.len()),
            rhs: Vec::with_capacity(2 * keypoints.len()),
            depths: Vec::with_capacity(keypoints.len()),
        };
        for &i in keypoints {
            if i >= self.n_keypoints() {
                return Err(Error::ShapeMismatch {
                    what: "keypoint index",
                    expected: self.n_keypoints(),
                    actual: i,
                });
            }
            out.rows.extend_from_slice(&self.rows[2 * i..2 * i + 2]);
            out.rhs.extend_from_slice(&self.rhs[2 * i..2 * i + 2]);
            out.depths.push(self.depths[i]);
        }
        if out.n_keypoints() < 2 {
            return Err(Error::TooFewCorrespondences(out.n_keypoints()));
        }
        Ok(out)
    }

    /// `A t - B`.
    pub fn residual(&self, t: &crate::Translation3) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(a, b)| a[0] * t.x + a[1] * t.y + a[2] * t.z - b)
            .collect()
    }
}

pub fn build_system(k3d: &[Point3], rays: &[Ray2]) -> Result<LinearSystem> {
    if k3d.len() != rays.len() {
        return Err(Error::ShapeMismatch {
            what: "ray count",
            expected: k3d.len(),
            actual: rays.len(),
        });
    }
    if k3d.len() < 2 {
        return Err(Error::TooFewCorrespondences(k3d.len()));
    }
    let n = k3d.len();
    let mut rows = Vec::with_capacity(2 * n);
    let mut rhs = Vec::with_capacity(2 * n);
    let mut depths = Vec::with_capacity(n);
    for (k, r) in k3d.iter().zip(rays) {
        rows.push([-1.0, 0.0, r.up]);
        rows.push([0.0, -1.0, r.vp]);
        rhs.push(k.x - k.z * r.up);
        rhs.push(k.y - k.z * r.vp);
        depths.push(k.z);
    }
    Ok(LinearSystem { rows, rhs, depths })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_on_axis() {
        let s = build_system(
            &[Point3::new(0.0, 0.0, 1.0), Point3::new(0.0, 0.0, 1.0)],
            &[Ray2::new(0.0, 0.0), Ray2::new(0.0, 0.0)],
        )
        .unwrap();
        assert_eq!(s.rows()[0], [-1.0, 0.0, 0.0]);
        assert_eq!(s.rows()[1], [0.0, -1.0, 0.0]);
        assert_eq!(&s.rhs()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn substitution() {
        let s = build_system(
            &[Point3::new(0.1, 0.2, 1.0), Point3::new(0.0, 0.0, 2.0)],
            &[Ray2::new(0.3, 0.4), Ray2::new(-0.1, 0.05)],
        )
        .unwrap();
        assert_eq!(s.rows()[0], [-1.0, 0.0, 0.3]);
        assert_eq!(s.rows()[1], [0.0, -1.0, 0.4]);
        assert!((s.rhs()[0] + 0.2).abs() < 1e-15);
        assert!((s.rhs()[1] + 0.2).abs() < 1e-15);
        assert_eq!(s.rows()[2], [-1.0, 0.0, -0.1]);
        assert_eq!(s.rhs()[3], -0.1);
        assert_eq!(s.depths(), &[1.0, 2.0]);
    }

    #[test]
    fn too_few() {
        let err = build_system(&[Point3::new(0.0, 0.0, 1.0)], &[Ray2::new(0.0, 0.0)]);
        assert_eq!(err, Err(Error::TooFewCorrespondences(1)));
        assert!(matches!(
            build_system(&[Point3::origin(), Point3::origin()], &[Ray2::default()]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn select_subsystem() {
        let s = build_system(
            &[
                Point3::new(0.1, 0.2, 1.0),
                Point3::new(0.0, 0.0, 2.0),
                Point3::new(0.3, 0.1, 0.5),
            ],
            &[
                Ray2::new(0.3, 0.4),
                Ray2::new(-0.1, 0.05),
                Ray2::new(0.2, 0.2),
            ],
        )
        .unwrap();
        let sub = s.select(&[0, 2]).unwrap();
        assert_eq!(sub.n_keypoints(), 2);
        assert_eq!(sub.rows()[2], s.rows()[4]);
        assert_eq!(sub.rhs()[3], s.rhs()[5]);
        assert!(s.select(&[1]).is_err());
    }
}
