use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Point3, Translation3};

const ROW_SUM_TOL: f64 = 1e-9;

/// Row-stochastic `N_K x N_V` matrix expressing each keypoint as a convex
/// combination of mesh vertices. Stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct KeypointRegressor {
    n_keypoints: usize,
    n_vertices: usize,
    data: Vec<f64>,
}

impl KeypointRegressor {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_keypoints = rows.len();
        if n_keypoints < 2 {
            return Err(Error::TooFewCorrespondences(n_keypoints));
        }
        let n_vertices = rows[0].len();
        if n_vertices < n_keypoints {
            return Err(Error::InvalidRegressor(format!(
                "need at least as many vertices as keypoints ({n_vertices} < {n_keypoints})"
            )));
        }
        let mut data = Vec::with_capacity(n_keypoints * n_vertices);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n_vertices {
                return Err(Error::ShapeMismatch {
                    what: "regressor row length",
                    expected: n_vertices,
                    actual: row.len(),
                });
            }
            if row.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
                return Err(Error::InvalidRegressor(format!(
                    "row {i} has negative or non-finite entries"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidRegressor(format!(
                    "row {i} sums to {sum}, expected 1"
                )));
            }
            data.extend(row);
        }
        Ok(KeypointRegressor {
            n_keypoints,
            n_vertices,
            data,
        })
    }

    /// `n` keypoints each selecting the vertex with the same index.
    pub fn identity(n: usize) -> Result<Self> {
        Self::from_rows(
            (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        )
    }

    pub fn n_keypoints(&self) -> usize {
        self.n_keypoints
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_vertices..(i + 1) * self.n_vertices]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_vertices)
    }

    pub fn apply(&self, verts: &[Point3]) -> Result<Vec<Point3>> {
        if verts.len() != self.n_vertices {
            return Err(Error::ShapeMismatch {
                what: "vertex count",
                expected: self.n_vertices,
                actual: verts.len(),
            });
        }
        Ok(self
            .rows()
            .map(|row| {
                let mut acc = Translation3::zeros();
                for (w, v) in row.iter().zip(verts) {
                    acc += *w * v.coords;
                }
                Point3::from(acc)
            })
            .collect())
    }

    /// Pulls keypoint gradients back onto vertices: `J^T dk`.
    pub fn apply_transpose(&self, d_keypoints: &[Translation3]) -> Result<Vec<Translation3>> {
        if d_keypoints.len() != self.n_keypoints {
            return Err(Error::ShapeMismatch {
                what: "keypoint count",
                expected: self.n_keypoints,
                actual: d_keypoints.len(),
            });
        }
        let mut out = vec![Translation3::zeros(); self.n_vertices];
        for (row, dk) in self.rows().zip(d_keypoints) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += *w * dk;
            }
        }
        Ok(out)
    }
}

impl TryFrom<Vec<Vec<f64>>> for KeypointRegressor {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<KeypointRegressor> for Vec<Vec<f64>> {
    fn from(j: KeypointRegressor) -> Self {
        j.rows().map(<[f64]>::to_vec).collect()
    }
}

pub fn apply_regressor(jreg: &KeypointRegressor, verts: &[Point3]) -> Result<Vec<Point3>> {
    jreg.apply(verts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_rows_select_vertices() {
        let j = KeypointRegressor::identity(3).unwrap();
        let v = vec![
            Point3::new(1.0, 2.0, 3.0),
            Point3::new(-1.0, 0.5, 2.0),
            Point3::new(0.0, 0.0, 7.0),
        ];
        assert_eq!(j.apply(&v).unwrap(), v);
    }

    #[test]
    fn midpoint_row() {
        let j = KeypointRegressor::from_rows(vec![vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let k = j
            .apply(&[Point3::new(0.0, 0.0, 0.0), Point3::new(2.0, 0.0, 0.0)])
            .unwrap();
        assert_eq!(k[0], Point3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn translation_commutes() {
        let j =
            KeypointRegressor::from_rows(vec![vec![0.2, 0.3, 0.5], vec![0.0, 0.25, 0.75]]).unwrap();
        let v = [
            Point3::new(0.1, 0.2, 0.3),
            Point3::new(-0.4, 0.0, 0.2),
            Point3::new(0.05, -0.1, 0.0),
        ];
        let t = Translation3::new(0.3, -0.2, 0.9);
        let moved: Vec<_> = v.iter().map(|p| p + t).collect();
        let a = j.apply(&moved).unwrap();
        let b = j.apply(&v).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - (y + t)).norm() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(KeypointRegressor::from_rows(vec![vec![1.0, 0.0]]).is_err());
        assert!(KeypointRegressor::from_rows(vec![vec![0.5, 0.4], vec![1.0, 0.0]]).is_err());
        assert!(KeypointRegressor::from_rows(vec![vec![1.5, -0.5], vec![1.0, 0.0]]).is_err());
        assert!(KeypointRegressor::from_rows(vec![vec![1.0], vec![1.0]]).is_err());
        assert!(matches!(
            KeypointRegressor::from_rows(vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0]]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn shape_mismatch_on_apply() {
        let j = KeypointRegressor::identity(2).unwrap();
        assert!(matches!(
            j.apply(&[Point3::origin()]),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
