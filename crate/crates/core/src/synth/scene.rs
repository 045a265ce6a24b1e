use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{rng_from_seed, SceneRng};
use crate::camera::{project, rectify_intrinsics, rectify_pixel, CameraIntrinsics, Pixel2};
use crate::error::{Error, Result};
use crate::regressor::KeypointRegressor;
use crate::solve::WeightVector;
use crate::{Point3, Translation3};

/// Largest supported vertex count (a full hand mesh).
pub const MAX_VERTICES: usize = 778;

/// A set of 2D-3D correspondences with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cam: CameraIntrinsics,
    /// Root-relative vertices in metres.
    pub verts_rel: Vec<Point3>,
    pub jreg: KeypointRegressor,
    /// Observed keypoints in pixels.
    pub k2d_obs: Vec<Pixel2>,
    pub t_gt: Option<Translation3>,
    pub weights: Option<WeightVector>,
    pub outlier_mask: Option<Vec<bool>>,
    pub seed: u64,
}

impl Scene {
    /// Checks that all arrays agree with the regressor dimensions.
    pub fn validate(&self) -> Result<()> {
        self.cam.validate()?;
        let n_k = self.jreg.n_keypoints();
        let check = |what, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::ShapeMismatch {
                    what,
                    expected,
                    actual,
                })
            }
        };
        check("vertex count", self.jreg.n_vertices(), self.verts_rel.len())?;
        check("2D keypoint count", n_k, self.k2d_obs.len())?;
        if let Some(w) = &self.weights {
            check("weight count", n_k, w.len())?;
        }
        if let Some(m) = &self.outlier_mask {
            check("outlier mask length", n_k, m.len())?;
        }
        let finite = self
            .verts_rel
            .iter()
            .all(|p| p.coords.iter().all(|x| x.is_finite()))
            && self
                .k2d_obs
                .iter()
                .all(|p| p.u.is_finite() && p.v.is_finite())
            && self.t_gt.is_none_or(|t| t.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::InvalidConfig(
                "scene contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    pub fn n_keypoints(&self) -> usize {
        self.jreg.n_keypoints()
    }

    pub fn keypoints_rel(&self) -> Vec<Point3> {
        self.jreg
            .apply(&self.verts_rel)
            .expect("scene vertex count matches regressor")
    }

    /// Stored weights, or all ones.
    /// The linear system built from the observed keypoints.
    pub fn system(&self) -> Result<crate::system::LinearSystem> {
        let rays: Vec<_> = self
            .k2d_obs
            .iter()
            .map(|p| crate::camera::normalize_pixel(&self.cam, p))
            .collect();
        crate::system::build_system(&self.keypoints_rel(), &rays)
    }

    /// Solves for the root translation from the observed keypoints.
    pub fn solve(&self, w: &WeightVector) -> Result<crate::solve::SolveResult> {
        crate::solve::solve_wls(&self.system()?, w)
    }

    pub fn weights_or_uniform(&self) -> WeightVector {
        self.weights
            .clone()
            .unwrap_or_else(|| WeightVector::uniform(self.n_keypoints()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_vertices: usize,
    pub n_keypoints: usize,
    /// Root depth range in metres.
    pub depth_range: (f64, f64),
    /// Side of the box the vertices are drawn from, in metres.
    pub hand_extent: f64,
    /// Horizontal field of view range in degrees.
    pub fov_range: (f64, f64),
    pub width: u32,
    pub height: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_vertices: 64,
            n_keypoints: 21,
            depth_range: (0.3, 1.2),
            hand_extent: 0.18,
            fov_range: (40.0, 70.0),
            width: 512,
            height: 512,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_keypoints < 2 {
            return bad(format!(
                "n_keypoints must be >= 2, got {}",
                self.n_keypoints
            ));
        }
        if self.n_vertices < self.n_keypoints || self.n_vertices > MAX_VERTICES {
            return bad(format!(
                "n_vertices must be in [{}, {MAX_VERTICES}], got {}",
                self.n_keypoints, self.n_vertices
            ));
        }
        let (d0, d1) = self.depth_range;
        if !(d0 > 0.1 && d1 < 10.0 && d0 <= d1) {
            return bad(format!(
                "depth range must lie within (0.1, 10), got {d0}..{d1}"
            ));
        }
        if !(self.hand_extent > 0.0 && self.hand_extent < 2.0 * d0) {
            return bad(format!(
                "hand extent {} must be positive and keep the hand in front of the camera",
                self.hand_extent
            ));
        }
        let (a0, a1) = self.fov_range;
        if !(a0 > 0.0 && a1 < 180.0 && a0 <= a1) {
            return bad(format!(
                "field of view range must lie within (0, 180), got {a0}..{a1}"
            ));
        }
        if self.width == 0 || self.height == 0 {
            return bad("frame size must be positive".into());
        }
        Ok(())
    }
}

pub(crate) fn uniform(rng: &mut SceneRng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Intrinsics with a field of view drawn from `fov_range` and the principal
/// point jittered by up to 5% of the frame around its centre.
pub(crate) fn sample_camera(
    rng: &mut SceneRng,
    fov_range: (f64, f64),
    width: u32,
    height: u32,
) -> Result<CameraIntrinsics> {
    let fov = uniform(rng, fov_range.0, fov_range.1);
    let base = CameraIntrinsics::from_fov(fov, width, height)?;
    let du = uniform(rng, -0.05, 0.05) * width as f64;
    let dv = uniform(rng, -0.05, 0.05) * height as f64;
    CameraIntrinsics::new(base.f, base.u0 + du, base.v0 + dv, width, height)
}

/// Root translation at a depth drawn from `depth_range`, placed so that the
/// root projects into the central part of the frame.
pub(crate) fn sample_translation(
    rng: &mut SceneRng,
    cam: &CameraIntrinsics,
    depth_range: (f64, f64),
) -> Translation3 {
    let tz = uniform(rng, depth_range.0, depth_range.1);
    let u = uniform(rng, 0.3, 0.7) * cam.width as f64;
    let v = uniform(rng, 0.3, 0.7) * cam.height as f64;
    Translation3::new((u - cam.u0) / cam.f * tz, (v - cam.v0) / cam.f * tz, tz)
}

/// Rows that each mix a few randomly chosen vertices with random convex weights.
pub(crate) fn sample_regressor(
    rng: &mut SceneRng,
    n_keypoints: usize,
    n_vertices: usize,
) -> Result<KeypointRegressor> {
    let support = n_vertices.min(4);
    let rows = (0..n_keypoints)
        .map(|_| {
            let picks = index::sample(rng, n_vertices, support);
            let raw: Vec<f64> = (0..support).map(|_| uniform(rng, 0.05, 1.0)).collect();
            let total: f64 = raw.iter().sum();
            let mut row = vec![0.0; n_vertices];
            for (j, w) in picks.iter().zip(&raw) {
                row[j] = w / total;
            }
            row
        })
        .collect();
    KeypointRegressor::from_rows(rows)
}

pub(crate) fn project_all(
    cam: &CameraIntrinsics,
    points: &[Point3],
    t: &Translation3,
) -> Result<Vec<Pixel2>> {
    points.iter().map(|p| project(cam, &(p + t))).collect()
}

/// Draws a random noiseless scene; a pure function of `seed` and `config`.
pub fn gen_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let cam = sample_camera(&mut rng, config.fov_range, config.width, config.height)?;

    let half = 0.5 * config.hand_extent;
    let mut verts: Vec<Point3> = (0..config.n_vertices)
        .map(|_| {
            Point3::new(
                uniform(&mut rng, -half, half),
                uniform(&mut rng, -half, half),
                uniform(&mut rng, -half, half),
            )
        })
        .collect();
    let mean = verts.iter().map(|p| p.coords).sum::<Translation3>() / verts.len() as f64;
    for v in &mut verts {
        *v -= mean;
    }

    let jreg = sample_regressor(&mut rng, config.n_keypoints, config.n_vertices)?;
    let t_gt = sample_translation(&mut rng, &cam, config.depth_range);
    let k3d = jreg.apply(&verts)?;
    let k2d_obs = project_all(&cam, &k3d, &t_gt)?;

    Ok(Scene {
        cam,
        verts_rel: verts,
        jreg,
        k2d_obs,
        t_gt: Some(t_gt),
        weights: None,
        outlier_mask: None,
        seed,
    })
}

/// Observation corruption: isotropic Gaussian pixel noise on inliers, and
/// outliers resampled uniformly over the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    /// Standard deviation of the per-axis pixel noise.
    pub noise_px: f64,
    pub outlier_count: usize,
    pub seed: u64,
    /// Relative chance of each keypoint being picked as an outlier; uniform
    /// when absent.
    #[serde(default)]
    pub outlier_propensity: Option<Vec<f64>>,
}

impl PerturbSpec {
    pub fn new(noise_px: f64, outlier_count: usize, seed: u64) -> Self {
        PerturbSpec {
            noise_px,
            outlier_count,
            seed,
            outlier_propensity: None,
        }
    }
}

pub fn perturb(scene: &Scene, spec: &PerturbSpec) -> Result<Scene> {
    if scene.t_gt.is_none() {
        return Err(Error::InvalidConfig(
            "perturbation needs a scene with ground truth".into(),
        ));
    }
    let n = scene.n_keypoints();
    if !(spec.noise_px.is_finite() && spec.noise_px >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise must be non-negative, got {}",
            spec.noise_px
        )));
    }
    if spec.outlier_count + 1 >= n {
        return Err(Error::InvalidConfig(format!(
            "outlier count must be below {}, got {}",
            n - 1,
            spec.outlier_count
        )));
    }
    let mut rng = rng_from_seed(spec.seed);
    let outliers: Vec<usize> = match &spec.outlier_propensity {
        None => index::sample(&mut rng, n, spec.outlier_count).into_vec(),
        Some(p) => {
            if p.len() != n {
                return Err(Error::ShapeMismatch {
                    what: "outlier propensity length",
                    expected: n,
                    actual: p.len(),
                });
            }
            if p.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::InvalidConfig(
                    "outlier propensities must be positive".into(),
                ));
            }
            index::sample_weighted(&mut rng, n, |i| p[i], spec.outlier_count)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?
                .into_vec()
        }
    };
    let mut mask = vec![false; n];
    for &i in &outliers {
        mask[i] = true;
    }

    let mut out = scene.clone();
    if spec.noise_px > 0.0 {
        let normal =
            Normal::new(0.0, spec.noise_px).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for (px, &is_out) in out.k2d_obs.iter_mut().zip(&mask) {
            let (du, dv) = (normal.sample(&mut rng), normal.sample(&mut rng));
            if !is_out {
                px.u += du;
                px.v += dv;
            }
        }
    }
    let (w, h) = (scene.cam.width as f64, scene.cam.height as f64);
    for (px, &is_out) in out.k2d_obs.iter_mut().zip(&mask) {
        if is_out {
            *px = Pixel2::new(uniform(&mut rng, 0.0, w), uniform(&mut rng, 0.0, h));
        }
    }
    out.outlier_mask = Some(mask);
    Ok(out)
}

/// Maps a scene onto the canonical camera with focal `f_canon` and a
/// `size x size` frame. 3D data, ground truth and weights are unchanged.
pub fn rectify_scene(scene: &Scene, f_canon: f64, size: u32) -> Result<Scene> {
    scene.validate()?;
    let (canon, _) = rectify_intrinsics(&scene.cam, f_canon, size, size)?;
    Ok(Scene {
        cam: canon,
        k2d_obs: scene
            .k2d_obs
            .iter()
            .map(|p| rectify_pixel(&scene.cam, &canon, p))
            .collect(),
        ..scene.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{build_system, normalize_pixel, solve_ls};

    #[test]
    fn rectified_scene_solves_to_the_same_root() {
        let s = perturb(
            &gen_scene(3, &SceneConfig::default()).unwrap(),
            &PerturbSpec::new(2.0, 1, 4),
        )
        .unwrap();
        let r = rectify_scene(&s, 500.0, 256).unwrap();
        assert_eq!((r.cam.f, r.cam.u0, r.cam.v0), (500.0, 128.0, 128.0));
        assert_eq!(r.t_gt, s.t_gt);
        let w = WeightVector::uniform(21);
        let (a, b) = (s.solve(&w).unwrap().t, r.solve(&w).unwrap().t);
        assert!((a - b).norm() < 1e-9);
        let twice = rectify_scene(&r, 500.0, 256).unwrap();
        for (p, q) in twice.k2d_obs.iter().zip(&r.k2d_obs) {
            assert!((p.u - q.u).abs() < 1e-12 && (p.v - q.v).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = SceneConfig::default();
        assert_eq!(gen_scene(7, &cfg).unwrap(), gen_scene(7, &cfg).unwrap());
        assert_ne!(gen_scene(7, &cfg).unwrap(), gen_scene(8, &cfg).unwrap());
    }

    #[test]
    fn generated_scenes_are_consistent() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let s = gen_scene(seed, &cfg).unwrap();
            s.validate().unwrap();
            let t = s.t_gt.unwrap();
            for (k, px) in s.keypoints_rel().iter().zip(&s.k2d_obs) {
                assert!(k.z + t.z > 0.0);
                let p = project(&s.cam, &(k + t)).unwrap();
                assert!((p.u - px.u).abs() < 1e-9 && (p.v - px.v).abs() < 1e-9);
            }
            let mean = s.verts_rel.iter().map(|p| p.coords).sum::<Translation3>();
            assert!(mean.norm() < 1e-12);
            let (d0, d1) = cfg.depth_range;
            assert!(t.z >= d0 && t.z <= d1);
        }
    }

    #[test]
    fn seed_42_recovers_translation() {
        let s = gen_scene(42, &SceneConfig::default()).unwrap();
        let rays: Vec<_> = s
            .k2d_obs
            .iter()
            .map(|p| normalize_pixel(&s.cam, p))
            .collect();
        let t = solve_ls(&build_system(&s.keypoints_rel(), &rays).unwrap())
            .unwrap()
            .t;
        assert!((t - s.t_gt.unwrap()).norm() <= 1e-12);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SceneConfig {
                n_keypoints: 1,
                ..Default::default()
            },
            SceneConfig {
                n_vertices: 10,
                ..Default::default()
            },
            SceneConfig {
                n_vertices: 779,
                ..Default::default()
            },
            SceneConfig {
                depth_range: (0.05, 1.0),
                ..Default::default()
            },
            SceneConfig {
                depth_range: (1.0, 12.0),
                ..Default::default()
            },
            SceneConfig {
                fov_range: (0.0, 60.0),
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(
                matches!(gen_scene(1, &cfg), Err(Error::InvalidConfig(_))),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn zero_perturbation_keeps_pixels() {
        let s = gen_scene(3, &SceneConfig::default()).unwrap();
        let p = perturb(&s, &PerturbSpec::new(0.0, 0, 9)).unwrap();
        assert_eq!(p.k2d_obs, s.k2d_obs);
        assert_eq!(p.outlier_mask, Some(vec![false; 21]));
    }

    #[test]
    fn outlier_count_sets_mask_bits() {
        let s = gen_scene(3, &SceneConfig::default()).unwrap();
        for k in [1, 5, 19] {
            let p = perturb(&s, &PerturbSpec::new(1.0, k, 11)).unwrap();
            let mask = p.outlier_mask.unwrap();
            assert_eq!(mask.iter().filter(|&&m| m).count(), k);
            for ((a, b), m) in p.k2d_obs.iter().zip(&s.k2d_obs).zip(&mask) {
                if *m {
                    assert!(a.u >= 0.0 && a.u < 512.0 && a.v >= 0.0 && a.v < 512.0);
                } else {
                    assert!((a.u - b.u).abs() < 10.0);
                }
            }
        }
        assert!(perturb(&s, &PerturbSpec::new(1.0, 20, 1)).is_err());
        assert!(perturb(&s, &PerturbSpec::new(-1.0, 0, 1)).is_err());
    }

    #[test]
    fn propensity_biases_outlier_choice() {
        let s = gen_scene(3, &SceneConfig::default()).unwrap();
        let mut prop = vec![0.01; 21];
        prop[4] = 100.0;
        prop[8] = 100.0;
        let mut hits = 0;
        for seed in 0..200 {
            let spec = PerturbSpec {
                outlier_propensity: Some(prop.clone()),
                ..PerturbSpec::new(0.0, 2, seed)
            };
            let mask = perturb(&s, &spec).unwrap().outlier_mask.unwrap();
            hits += mask[4] as usize + mask[8] as usize;
        }
        assert!(hits > 380, "{hits}");
    }

    #[test]
    fn noise_magnitude_matches_rayleigh_mean() {
        // per-axis sigma = 2 px gives a mean radial displacement of 2 sqrt(pi/2) ~ 2.507 px
        let cfg = SceneConfig::default();
        let mut total = 0.0;
        let mut count = 0;
        for seed in 0..50 {
            let s = gen_scene(seed, &cfg).unwrap();
            let p = perturb(&s, &PerturbSpec::new(2.0, 0, 1000 + seed)).unwrap();
            for (a, b) in p.k2d_obs.iter().zip(&s.k2d_obs) {
                total += ((a.u - b.u).powi(2) + (a.v - b.v).powi(2)).sqrt();
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!(count >= 1000);
        assert!((1.5..=3.5).contains(&mean), "{mean}");
        assert!(
            (mean - 2.0 * (std::f64::consts::PI / 2.0).sqrt()).abs() < 0.15,
            "{mean}"
        );
    }
}
