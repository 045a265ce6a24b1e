//! Closed-form (weighted) least-squares root solve and its reverse-mode
//! derivative.
//!
//! The weighted problem is `min_t ||W (A t - B)||^2` with `W` holding each
//! keypoint weight twice on its diagonal. Its solution is
//! `t* = (A^T W^2 A)^-1 A^T W^2 B`, computed from the 3x3 normal equations.
//!
//! For a scalar loss `L = g . t*`, let `M = A^T W^2 A`, `q = M^-1 g` and
//! `r = B - A t*`. Then
//!
//! ```text
//! dL/dB   = W^2 A q
//! dL/dA   = W^2 r q^T - (W^2 A q) t*^T
//! dL/dw_i = 2 w_i sum_{j in rows(i)} (a_j . q) r_j
//! ```
//!
//! and the row entries `u'`, `v'` and right-hand side are chained back to
//! pixels and root-relative keypoints.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::camera::{normalize_pixel, CameraIntrinsics, Pixel2, Ray2};
use crate::error::{Error, Result};
use crate::system::{build_system, LinearSystem};
use crate::{Point3, Translation3};

/// Condition number of `A^T W^2 A` above which a system is declared degenerate.
pub const DEGENERACY_CONDITION: f64 = 1e12;

/// Per-keypoint confidences in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some((i, x)) = w
            .iter()
            .enumerate()
            .find(|(_, x)| !(x.is_finite() && (0.0..=1.0).contains(*x)))
        {
            return Err(Error::InvalidConfig(format!(
                "weight {i} = {x} is outside [0, 1]"
            )));
        }
        Ok(WeightVector(w))
    }

    pub fn uniform(n: usize) -> Self {
        WeightVector(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.0.iter().filter(|&&w| w > 0.0).count()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(w: Vec<f64>) -> Result<Self> {
        Self::new(w)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub t: Translation3,
    /// `||W (A t - B)||`.
    pub residual_norm: f64,
    /// Eigenvalue ratio of the (weighted) normal matrix.
    pub cond_estimate: f64,
    /// Keypoints whose camera-space depth `z_i + t_z` is not positive.
    pub behind_camera: Vec<bool>,
}

/// Partial derivatives of a scalar loss with respect to the solver inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub d_k2d: Vec<[f64; 2]>,
    pub d_k3d: Vec<[f64; 3]>,
    pub d_w: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(n: usize) -> Self {
        GradientBundle {
            d_k2d: vec![[0.0; 2]; n],
            d_k3d: vec![[0.0; 3]; n],
            d_w: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_w.is_empty()
    }

    /// All entries in a fixed order: 2D keypoints, then 3D keypoints, then weights.
    pub fn flatten(&self) -> Vec<f64> {
        self.d_k2d
            .iter()
            .flatten()
            .chain(self.d_k3d.iter().flatten())
            .chain(&self.d_w)
            .copied()
            .collect()
    }
}

/// `L D L^T` factorization of a symmetric positive definite 3x3 matrix.
#[derive(Debug, Clone, Copy)]
struct Ldlt {
    l10: f64,
    l20: f64,
    l21: f64,
    d: [f64; 3],
}

impl Ldlt {
    fn factor(m: &Matrix3<f64>) -> Option<Ldlt> {
        let d0 = m[(0, 0)];
        if !(d0 > 0.0) {
            return None;
        }
        let l10 = m[(1, 0)] / d0;
        let l20 = m[(2, 0)] / d0;
        let d1 = m[(1, 1)] - l10 * l10 * d0;
        if !(d1 > 0.0) {
            return None;
        }
        let l21 = (m[(2, 1)] - l20 * l10 * d0) / d1;
        let d2 = m[(2, 2)] - l20 * l20 * d0 - l21 * l21 * d1;
        if !(d2 > 0.0) {
            return None;
        }
        Some(Ldlt {
            l10,
            l20,
            l21,
            d: [d0, d1, d2],
        })
    }

    fn solve(&self, b: &Translation3) -> Translation3 {
        let y0 = b.x;
        let y1 = b.y - self.l10 * y0;
        let y2 = b.z - self.l20 * y0 - self.l21 * y1;
        let z2 = y2 / self.d[2];
        let z1 = y1 / self.d[1] - self.l21 * z2;
        let z0 = y0 / self.d[0] - self.l10 * z1 - self.l20 * z2;
        Translation3::new(z0, z1, z2)
    }
}

/// `A^T W^2 A` and `A^T W^2 B`, accumulated in row order.
pub fn normal_equations(sys: &LinearSystem, w: &[f64]) -> (Matrix3<f64>, Translation3) {
    let mut m = Matrix3::zeros();
    let mut c = Translation3::zeros();
    for (j, (a, b)) in sys.rows().iter().zip(sys.rhs()).enumerate() {
        let w2 = w[j / 2] * w[j / 2];
        let a = Translation3::new(a[0], a[1], a[2]);
        m += (w2 * a) * a.transpose();
        c += (w2 * b) * a;
    }
    (m, c)
}

/// Ratio of extreme eigenvalues of a symmetric positive semi-definite matrix;
/// infinite when the smallest is not positive.
pub fn condition_estimate(m: &Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(*m).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if !(max > 0.0) || !(min > 0.0) {
        return f64::INFINITY;
    }
    (max / min).max(1.0)
}

fn check_weights(sys: &LinearSystem, w: &[f64]) -> Result<()> {
    if w.len() != sys.n_keypoints() {
        return Err(Error::ShapeMismatch {
            what: "weight count",
            expected: sys.n_keypoints(),
            actual: w.len(),
        });
    }
    let positive = w.iter().filter(|&&x| x > 0.0).count();
    if positive < 2 {
        return Err(Error::DegenerateGeometry(format!(
            "{positive} strictly positive weights, at least 2 required"
        )));
    }
    Ok(())
}

struct Solved {
    result: SolveResult,
    factor: Ldlt,
}

fn solve_weighted(sys: &LinearSystem, w: &[f64]) -> Result<Solved> {
    check_weights(sys, w)?;
    let (m, c) = normal_equations(sys, w);
    let cond = condition_estimate(&m);
    if !(cond <= DEGENERACY_CONDITION) {
        return Err(Error::DegenerateGeometry(format!(
            "normal matrix condition estimate {cond:e} exceeds {DEGENERACY_CONDITION:e}"
        )));
    }
    let factor = Ldlt::factor(&m).ok_or_else(|| {
        Error::DegenerateGeometry("normal matrix is not positive definite".into())
    })?;
    let t = factor.solve(&c);
    if !(t.x.is_finite() && t.y.is_finite() && t.z.is_finite()) {
        return Err(Error::DegenerateGeometry("non-finite translation".into()));
    }
    let residual_norm = sys
        .residual(&t)
        .iter()
        .enumerate()
        .map(|(j, r)| (w[j / 2] * r).powi(2))
        .sum::<f64>()
        .sqrt();
    let behind_camera = sys.depths().iter().map(|z| z + t.z <= 0.0).collect();
    Ok(Solved {
        result: SolveResult {
            t,
            residual_norm,
            cond_estimate: cond,
            behind_camera,
        },
        factor,
    })
}

/// Unweighted least squares, `t* = (A^T A)^-1 A^T B`.
pub fn solve_ls(sys: &LinearSystem) -> Result<SolveResult> {
    Ok(solve_weighted(sys, &vec![1.0; sys.n_keypoints()])?.result)
}

/// Weighted least squares, `t* = (A^T W^2 A)^-1 A^T W^2 B`.
pub fn solve_wls(sys: &LinearSystem, w: &WeightVector) -> Result<SolveResult> {
    Ok(solve_weighted(sys, w.as_slice())?.result)
}

/// Same as [`solve_wls`] but accepts any finite non-negative weights; used by
/// perturbation-based checks that step outside `[0, 1]`.
pub fn solve_wls_unchecked(sys: &LinearSystem, w: &[f64]) -> Result<SolveResult> {
    Ok(solve_weighted(sys, w)?.result)
}

/// Gradient of `g . t*` with respect to pixels, root-relative keypoints and weights.
pub fn solve_wls_vjp(
    cam: &CameraIntrinsics,
    sys: &LinearSystem,
    w: &WeightVector,
    k3d: &[Point3],
    rays: &[Ray2],
    upstream: &Translation3,
) -> Result<GradientBundle> {
    if k3d.len() != sys.n_keypoints() || rays.len() != sys.n_keypoints() {
        return Err(Error::ShapeMismatch {
            what: "correspondence count",
            expected: sys.n_keypoints(),
            actual: k3d.len().min(rays.len()),
        });
    }
    let solved = solve_weighted(sys, w.as_slice())?;
    Ok(backward(
        cam,
        sys,
        w.as_slice(),
        &solved,
        k3d,
        rays,
        upstream,
    ))
}

fn backward(
    cam: &CameraIntrinsics,
    sys: &LinearSystem,
    w: &[f64],
    solved: &Solved,
    k3d: &[Point3],
    rays: &[Ray2],
    g: &Translation3,
) -> GradientBundle {
    let n = sys.n_keypoints();
    let mut out = GradientBundle::zeros(n);
    if *g == Translation3::zeros() {
        return out;
    }
    let t = solved.result.t;
    let q = solved.factor.solve(g);
    for i in 0..n {
        let w2 = w[i] * w[i];
        let mut d_b = [0.0; 2];
        let mut d_a2 = [0.0; 2];
        let mut d_w = 0.0;
        for k in 0..2 {
            let j = 2 * i + k;
            let a = sys.rows()[j];
            let aq = a[0] * q.x + a[1] * q.y + a[2] * q.z;
            let r = sys.rhs()[j] - (a[0] * t.x + a[1] * t.y + a[2] * t.z);
            d_b[k] = w2 * aq;
            // only the third column of A depends on the inputs
            d_a2[k] = w2 * r * q.z - d_b[k] * t.z;
            d_w += aq * r;
        }
        let z = k3d[i].z;
        let d_up = d_a2[0] - z * d_b[0];
        let d_vp = d_a2[1] - z * d_b[1];
        out.d_k2d[i] = [d_up / cam.f, d_vp / cam.f];
        out.d_k3d[i] = [d_b[0], d_b[1], -rays[i].up * d_b[0] - rays[i].vp * d_b[1]];
        out.d_w[i] = 2.0 * w[i] * d_w;
    }
    out
}

/// A forward solve from pixel keypoints that retains what the backward pass needs.
pub struct PositioningPass {
    cam: CameraIntrinsics,
    k3d: Vec<Point3>,
    rays: Vec<Ray2>,
    weights: Vec<f64>,
    system: LinearSystem,
    solved: Solved,
}

impl PositioningPass {
    /// Normalizes the pixels, builds the system and solves it.
    pub fn run(
        cam: &CameraIntrinsics,
        k3d: &[Point3],
        k2d: &[Pixel2],
        w: &WeightVector,
    ) -> Result<Self> {
        let rays: Vec<Ray2> = k2d.iter().map(|p| normalize_pixel(cam, p)).collect();
        let system = build_system(k3d, &rays)?;
        let solved = solve_weighted(&system, w.as_slice())?;
        Ok(PositioningPass {
            cam: *cam,
            k3d: k3d.to_vec(),
            rays,
            weights: w.as_slice().to_vec(),
            system,
            solved,
        })
    }

    pub fn translation(&self) -> Translation3 {
        self.solved.result.t
    }

    pub fn result(&self) -> &SolveResult {
        &self.solved.result
    }

    pub fn system(&self) -> &LinearSystem {
        &self.system
    }

    pub fn rays(&self) -> &[Ray2] {
        &self.rays
    }

    pub fn backward(&self, upstream: &Translation3) -> GradientBundle {
        backward(
            &self.cam,
            &self.system,
            &self.weights,
            &self.solved,
            &self.k3d,
            &self.rays,
            upstream,
        )
    }
}
