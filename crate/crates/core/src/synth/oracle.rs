//! Oracles that reach the solver's answers by other means: central finite
//! differences for the gradient, conjugate gradients on the weighted
//! objective, and Gauss-Newton on the reprojection error.

use nalgebra::Matrix3;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, gen_scene, perturb, rng_from_seed, PerturbSpec, Scene, SceneConfig};
use crate::camera::{normalize_pixel, project, CameraIntrinsics, Pixel2};
use crate::error::{Error, Result};
use crate::solve::{
    condition_estimate, normal_equations, solve_wls_unchecked, solve_wls_vjp, GradientBundle,
    WeightVector, DEGENERACY_CONDITION,
};
use crate::system::{build_system, LinearSystem};
use crate::{Point3, Translation3};

/// Relative error with an absolute floor: differences at or below `floor`
/// count as exact agreement.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= floor {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

fn objective(
    cam: &CameraIntrinsics,
    k3d: &[Point3],
    k2d: &[Pixel2],
    w: &[f64],
    g: &Translation3,
) -> Result<f64> {
    let rays: Vec<_> = k2d.iter().map(|p| normalize_pixel(cam, p)).collect();
    let t = solve_wls_unchecked(&build_system(k3d, &rays)?, w)?.t;
    Ok(g.dot(&t))
}

/// Central differences of `g . t*`, perturbing one input scalar at a time.
pub fn finite_diff_grad_raw(
    cam: &CameraIntrinsics,
    k3d: &[Point3],
    k2d: &[Pixel2],
    w: &WeightVector,
    upstream: &Translation3,
    eps: f64,
) -> Result<GradientBundle> {
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be in [1e-8, 1e-4], got {eps}"
        )));
    }
    let n = k3d.len();
    let w = w.as_slice();
    // surfaces solver errors before any perturbation
    objective(cam, k3d, k2d, w, upstream)?;
    let mut out = GradientBundle::zeros(n);
    if *upstream == Translation3::zeros() {
        return Ok(out);
    }
    let central = |hi: f64, lo: f64| (hi - lo) / (2.0 * eps);

    let mut px = k2d.to_vec();
    for i in 0..n {
        for axis in 0..2 {
            let orig = px[i];
            let bump = |p: &mut Pixel2, d: f64| match axis {
                0 => p.u += d,
                _ => p.v += d,
            };
            bump(&mut px[i], eps);
            let hi = objective(cam, k3d, &px, w, upstream)?;
            px[i] = orig;
            bump(&mut px[i], -eps);
            let lo = objective(cam, k3d, &px, w, upstream)?;
            px[i] = orig;
            out.d_k2d[i][axis] = central(hi, lo);
        }
    }
    let mut pts = k3d.to_vec();
    for i in 0..n {
        for axis in 0..3 {
            let orig = pts[i];
            pts[i][axis] += eps;
            let hi = objective(cam, &pts, k2d, w, upstream)?;
            pts[i] = orig;
            pts[i][axis] -= eps;
            let lo = objective(cam, &pts, k2d, w, upstream)?;
            pts[i] = orig;
            out.d_k3d[i][axis] = central(hi, lo);
        }
    }
    let mut ws = w.to_vec();
    for i in 0..n {
        let orig = ws[i];
        ws[i] = orig + eps;
        let hi = objective(cam, k3d, k2d, &ws, upstream)?;
        ws[i] = orig - eps;
        let lo = objective(cam, k3d, k2d, &ws, upstream)?;
        ws[i] = orig;
        out.d_w[i] = central(hi, lo);
    }
    Ok(out)
}

pub fn finite_diff_grad(
    scene: &Scene,
    w: &WeightVector,
    upstream: &Translation3,
    eps: f64,
) -> Result<GradientBundle> {
    finite_diff_grad_raw(
        &scene.cam,
        &scene.keypoints_rel(),
        &scene.k2d_obs,
        w,
        upstream,
        eps,
    )
}

/// Absolute difference below which two gradient entries are treated as equal.
pub const GRADIENT_FLOOR: f64 = 1e-8;

/// Outcome of comparing the analytic gradient with finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// Largest [`relative_error`] over every input entry.
    pub max_rel_error: f64,
    /// Largest absolute difference over every input entry.
    pub max_abs_error: f64,
    /// Entries compared: `2 N_K + 3 N_K + N_K`.
    pub n_entries: usize,
}

/// Compares [`solve_wls_vjp`] with [`finite_diff_grad`] on all inputs.
pub fn gradient_check(
    scene: &Scene,
    w: &WeightVector,
    upstream: &Translation3,
    eps: f64,
) -> Result<GradCheck> {
    let k3d = scene.keypoints_rel();
    let rays: Vec<_> = scene
        .k2d_obs
        .iter()
        .map(|p| normalize_pixel(&scene.cam, p))
        .collect();
    let sys = build_system(&k3d, &rays)?;
    let analytic = solve_wls_vjp(&scene.cam, &sys, w, &k3d, &rays, upstream)?.flatten();
    let numeric = finite_diff_grad(scene, w, upstream, eps)?.flatten();
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| relative_error(*a, *b, GRADIENT_FLOOR))
        .fold(0.0, f64::max);
    let max_abs_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        max_abs_error,
        n_entries: analytic.len(),
    })
}

/// A noisy default scene with random weights in `[0.2, 1]` and a random unit
/// upstream gradient, all derived from `seed`.
pub fn random_gradcheck_case(seed: u64) -> Result<(Scene, WeightVector, Translation3)> {
    let base = gen_scene(derive_seed(seed, 0), &SceneConfig::default())?;
    let scene = perturb(&base, &PerturbSpec::new(2.0, 2, derive_seed(seed, 1)))?;
    let mut rng = rng_from_seed(derive_seed(seed, 2));
    let w = WeightVector::new(
        (0..scene.n_keypoints())
            .map(|_| rng.random_range(0.2..=1.0))
            .collect(),
    )?;
    let g = Translation3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
    .normalize();
    Ok((scene, w, g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSolution {
    pub t: Translation3,
    pub iterations: usize,
}

/// `A^T W^2 v` without forming the normal matrix.
fn weighted_at(sys: &LinearSystem, w: &[f64], v: &[f64]) -> Translation3 {
    let mut out = Translation3::zeros();
    for (j, (a, vj)) in sys.rows().iter().zip(v).enumerate() {
        let s = w[j / 2] * w[j / 2] * vj;
        out += Translation3::new(a[0] * s, a[1] * s, a[2] * s);
    }
    out
}

fn apply_a(sys: &LinearSystem, p: &Translation3) -> Vec<f64> {
    sys.rows()
        .iter()
        .map(|a| a[0] * p.x + a[1] * p.y + a[2] * p.z)
        .collect()
}

/// Minimizes `||W (A t - B)||^2` by conjugate gradients from `t0`, restarting
/// every three steps. Converged when the gradient norm falls to
/// `tol * ||A^T W^2 B||`.
pub fn oracle_minimize(
    sys: &LinearSystem,
    w: &WeightVector,
    t0: &Translation3,
    max_iters: usize,
    tol: f64,
) -> Result<OracleSolution> {
    let w = w.as_slice();
    if w.len() != sys.n_keypoints() {
        return Err(Error::ShapeMismatch {
            what: "weight count",
            expected: sys.n_keypoints(),
            actual: w.len(),
        });
    }
    if w.iter().filter(|&&x| x > 0.0).count() < 2 {
        return Err(Error::DegenerateGeometry(
            "fewer than 2 strictly positive weights".into(),
        ));
    }
    // a singular quadratic has no unique minimizer to converge to
    let (m, _) = normal_equations(sys, w);
    let cond = condition_estimate(&m);
    if !(cond <= DEGENERACY_CONDITION) {
        return Err(Error::DegenerateGeometry(format!(
            "objective is not strictly convex (condition {cond:e})"
        )));
    }

    let scale = weighted_at(sys, w, sys.rhs()).norm();
    let threshold = tol * scale;
    let neg_grad = |t: &Translation3| -> Translation3 {
        let r: Vec<f64> = sys
            .rhs()
            .iter()
            .zip(apply_a(sys, t))
            .map(|(b, at)| b - at)
            .collect();
        weighted_at(sys, w, &r)
    };

    let mut t = *t0;
    let mut r = neg_grad(&t);
    let mut p = r;
    let mut iters = 0;
    while r.norm() > threshold {
        if iters == max_iters {
            return Err(Error::DidNotConverge {
                iters,
                residual: r.norm(),
            });
        }
        let mp = weighted_at(sys, w, &apply_a(sys, &p));
        let curvature = p.dot(&mp);
        if !(curvature > 0.0) {
            return Err(Error::DidNotConverge {
                iters,
                residual: r.norm(),
            });
        }
        let alpha = r.dot(&r) / curvature;
        t += alpha * p;
        iters += 1;
        if iters % 3 == 0 {
            r = neg_grad(&t);
            p = r;
        } else {
            let r_next = r - alpha * mp;
            let beta = r_next.dot(&r_next) / r.dot(&r);
            r = r_next;
            p = r + beta * p;
        }
    }
    Ok(OracleSolution {
        t,
        iterations: iters,
    })
}

fn reprojection_cost(
    cam: &CameraIntrinsics,
    k3d: &[Point3],
    k2d: &[Pixel2],
    w: &[f64],
    t: &Translation3,
) -> Result<f64> {
    let mut cost = 0.0;
    for ((k, obs), wi) in k3d.iter().zip(k2d).zip(w) {
        let px = project(cam, &(k + t))?;
        cost += wi * wi * ((px.u - obs.u).powi(2) + (px.v - obs.v).powi(2));
    }
    Ok(cost)
}

/// Gauss-Newton on `sum_i w_i^2 ||project(k_i + t) - k2d_i||^2`, with step
/// halving to keep the cost decreasing and every depth positive. Stops when
/// the step is negligible or the cost stops decreasing.
pub fn geometric_refine(
    cam: &CameraIntrinsics,
    k3d: &[Point3],
    k2d: &[Pixel2],
    w: &WeightVector,
    t0: &Translation3,
    max_iters: usize,
) -> Result<Translation3> {
    let w = w.as_slice();
    if k3d.len() != k2d.len() || w.len() != k3d.len() {
        return Err(Error::ShapeMismatch {
            what: "correspondence count",
            expected: k3d.len(),
            actual: k2d.len().min(w.len()),
        });
    }
    let mut t = *t0;
    let mut cost = reprojection_cost(cam, k3d, k2d, w, &t)?;
    for _ in 0..max_iters {
        let mut h = Matrix3::zeros();
        let mut g = Translation3::zeros();
        for ((k, obs), wi) in k3d.iter().zip(k2d).zip(w) {
            let p = k + t;
            let fz = cam.f / p.z;
            let ju = Translation3::new(fz, 0.0, -fz * p.x / p.z);
            let jv = Translation3::new(0.0, fz, -fz * p.y / p.z);
            let eu = cam.f * p.x / p.z + cam.u0 - obs.u;
            let ev = cam.f * p.y / p.z + cam.v0 - obs.v;
            let w2 = wi * wi;
            h += w2 * (ju * ju.transpose() + jv * jv.transpose());
            g += w2 * (eu * ju + ev * jv);
        }
        let step = -h
            .cholesky()
            .ok_or_else(|| Error::DegenerateGeometry("singular Gauss-Newton system".into()))?
            .solve(&g);
        let small = step.norm() <= 1e-13 * (1.0 + t.norm());

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = t + scale * step;
            if let Ok(c) = reprojection_cost(cam, k3d, k2d, w, &cand) {
                if c <= cost {
                    accepted = Some((cand, c));
                    break;
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((cand, c)) => {
                // stalled at rounding level
                let stalled = cost - c <= 1e-13 * cost;
                t = cand;
                cost = c;
                if stalled && step.norm() <= 1e-6 * (1.0 + t.norm()) {
                    return Ok(t);
                }
            }
            None if step.norm() <= 1e-9 * (1.0 + t.norm()) => return Ok(t),
            None => {
                return Err(Error::DidNotConverge {
                    iters: max_iters,
                    residual: cost.sqrt(),
                })
            }
        }
        if small {
            return Ok(t);
        }
    }
    Err(Error::DidNotConverge {
        iters: max_iters,
        residual: cost.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_scene, perturb, PerturbSpec, SceneConfig};
    use crate::{solve_ls, solve_wls, solve_wls_vjp};

    fn scene_system(s: &Scene) -> (Vec<Point3>, LinearSystem) {
        let k3d = s.keypoints_rel();
        let rays: Vec<_> = s
            .k2d_obs
            .iter()
            .map(|p| normalize_pixel(&s.cam, p))
            .collect();
        let sys = build_system(&k3d, &rays).unwrap();
        (k3d, sys)
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0 + 1e-9, 1e-8), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-8) - 0.5).abs() < 1e-15);
        assert!(relative_error(0.0, 1e-6, 1e-8) == 1.0);
    }

    #[test]
    fn finite_diff_zero_upstream() {
        let s = gen_scene(1, &SceneConfig::default()).unwrap();
        let w = WeightVector::uniform(21);
        let g = finite_diff_grad(&s, &w, &Translation3::zeros(), 1e-6).unwrap();
        assert_eq!(g, GradientBundle::zeros(21));
        assert!(finite_diff_grad(&s, &w, &Translation3::x(), 1e-3).is_err());
    }

    #[test]
    fn finite_diff_matches_vjp_on_noisy_scene() {
        let s = gen_scene(5, &SceneConfig::default()).unwrap();
        let s = perturb(&s, &PerturbSpec::new(2.0, 2, 6)).unwrap();
        let w = WeightVector::new((0..21).map(|i| 0.3 + 0.03 * i as f64).collect()).unwrap();
        let g = Translation3::new(0.4, -1.1, 0.7);
        let (k3d, sys) = scene_system(&s);
        let rays: Vec<_> = s
            .k2d_obs
            .iter()
            .map(|p| normalize_pixel(&s.cam, p))
            .collect();
        let analytic = solve_wls_vjp(&s.cam, &sys, &w, &k3d, &rays, &g).unwrap();
        let fd = finite_diff_grad(&s, &w, &g, 1e-6).unwrap();
        let worst = analytic
            .flatten()
            .iter()
            .zip(fd.flatten())
            .map(|(a, b)| relative_error(*a, b, 1e-8))
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "{worst}");
        assert!(analytic.d_w.iter().any(|x| x.abs() > 1e-6));
    }

    #[test]
    fn random_cases_pass_the_gradient_check() {
        for seed in 0..5 {
            let (s, w, g) = random_gradcheck_case(seed).unwrap();
            assert_eq!(random_gradcheck_case(seed).unwrap().1, w);
            let c = gradient_check(&s, &w, &g, 1e-6).unwrap();
            assert_eq!(c.n_entries, 6 * 21);
            assert!(c.max_rel_error < 1e-5, "seed {seed}: {c:?}");
            assert!(c.max_abs_error < 1e-8, "seed {seed}: {c:?}");
        }
    }

    #[test]
    fn step_doubling_is_stable() {
        let s = gen_scene(9, &SceneConfig::default()).unwrap();
        let s = perturb(&s, &PerturbSpec::new(2.0, 0, 1)).unwrap();
        let w = WeightVector::new(vec![0.7; 21]).unwrap();
        let g = Translation3::new(1.0, 0.5, -0.25);
        let a = finite_diff_grad(&s, &w, &g, 1e-6).unwrap().flatten();
        let b = finite_diff_grad(&s, &w, &g, 2e-6).unwrap().flatten();
        for (x, y) in a.iter().zip(&b) {
            // abs floor sized to the cancellation error of a 1e-6 step
            assert!(
                relative_error(*x, *y, 1e-8) < 1e-6 || (x - y).abs() < 1e-9,
                "{x} {y}"
            );
        }
    }

    #[test]
    fn oracle_matches_closed_form() {
        let s = gen_scene(11, &SceneConfig::default()).unwrap();
        let s = perturb(&s, &PerturbSpec::new(2.0, 3, 12)).unwrap();
        let (_, sys) = scene_system(&s);
        let w = WeightVector::new((0..21).map(|i| 0.1 + 0.04 * i as f64).collect()).unwrap();
        let exact = solve_wls(&sys, &w).unwrap().t;
        let iter =
            oracle_minimize(&sys, &w, &Translation3::new(1.0, -2.0, 3.0), 200, 1e-13).unwrap();
        assert!((iter.t - exact).norm() <= 1e-8 * (1.0 + exact.norm()));
        let warm = oracle_minimize(&sys, &w, &exact, 200, 1e-13).unwrap();
        assert_eq!(warm.iterations, 0);
        assert_eq!(warm.t, exact);
    }

    #[test]
    fn oracle_rejects_degenerate_and_reports_budget() {
        let k3d = [Point3::new(0.0, 0.0, 0.5), Point3::new(0.1, 0.0, 0.6)];
        let sys = build_system(&k3d, &[crate::Ray2::new(0.1, 0.1); 2]).unwrap();
        assert!(oracle_minimize(
            &sys,
            &WeightVector::uniform(2),
            &Translation3::zeros(),
            100,
            1e-12
        )
        .is_err());

        let s = gen_scene(2, &SceneConfig::default()).unwrap();
        let (_, sys) = scene_system(&s);
        let err = oracle_minimize(
            &sys,
            &WeightVector::uniform(21),
            &Translation3::zeros(),
            1,
            1e-13,
        );
        assert!(matches!(err, Err(Error::DidNotConverge { .. })));
    }

    #[test]
    fn geometric_refine_fixed_point_on_noiseless() {
        let s = gen_scene(21, &SceneConfig::default()).unwrap();
        let (k3d, sys) = scene_system(&s);
        let t0 = solve_ls(&sys).unwrap().t;
        let t = geometric_refine(
            &s.cam,
            &k3d,
            &s.k2d_obs,
            &WeightVector::uniform(21),
            &t0,
            50,
        )
        .unwrap();
        assert!((t - s.t_gt.unwrap()).norm() <= 1e-9);
    }

    #[test]
    fn geometric_refine_ignores_zero_weight() {
        let s = gen_scene(22, &SceneConfig::default()).unwrap();
        let mut noisy = s.clone();
        noisy.k2d_obs[3].u += 80.0;
        let k3d = s.keypoints_rel();
        let mut w = vec![1.0; 21];
        w[3] = 0.0;
        let w = WeightVector::new(w).unwrap();
        let t0 = s.t_gt.unwrap() + Translation3::new(0.01, -0.02, 0.05);
        let t = geometric_refine(&s.cam, &k3d, &noisy.k2d_obs, &w, &t0, 100).unwrap();
        assert!((t - s.t_gt.unwrap()).norm() <= 1e-9);
    }

    #[test]
    fn geometric_and_algebraic_differ_under_noise() {
        let s = gen_scene(23, &SceneConfig::default()).unwrap();
        let s = perturb(&s, &PerturbSpec::new(3.0, 0, 4)).unwrap();
        let (k3d, sys) = scene_system(&s);
        let alg = solve_ls(&sys).unwrap().t;
        let geo = geometric_refine(
            &s.cam,
            &k3d,
            &s.k2d_obs,
            &WeightVector::uniform(21),
            &alg,
            100,
        )
        .unwrap();
        let gap = (geo - alg).norm();
        eprintln!("geometric vs algebraic gap: {:.3} mm", gap * 1e3);
        assert!(gap > 0.0);
        let w = [1.0; 21];
        let geo_cost = reprojection_cost(&s.cam, &k3d, &s.k2d_obs, &w, &geo).unwrap();
        let alg_cost = reprojection_cost(&s.cam, &k3d, &s.k2d_obs, &w, &alg).unwrap();
        assert!(geo_cost < alg_cost);
    }

    #[test]
    fn geometric_refine_needs_positive_depth() {
        let s = gen_scene(24, &SceneConfig::default()).unwrap();
        let k3d = s.keypoints_rel();
        let t0 = Translation3::new(0.0, 0.0, -1.0);
        assert!(matches!(
            geometric_refine(
                &s.cam,
                &k3d,
                &s.k2d_obs,
                &WeightVector::uniform(21),
                &t0,
                10
            ),
            Err(Error::NonPositiveDepth { .. })
        ));
    }
}
