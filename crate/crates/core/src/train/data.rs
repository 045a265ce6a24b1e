//! Training data for the toy pipeline.
//!
//! Every sample deforms one shared hand template: a global hand scale and a
//! few random shape modes, placed at a random depth in front of a camera with
//! a random field of view. The model observes corrupted 2D keypoints and
//! corrupted root-relative 3D keypoints whose overall scale is uncertain.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{rectify_intrinsics, rectify_pixel, CameraIntrinsics, Pixel2};
use crate::error::{Error, Result};
use crate::regressor::KeypointRegressor;
use crate::synth::scene::{
    project_all, sample_camera, sample_regressor, sample_translation, uniform,
};
use crate::synth::{derive_seed, perturb, rng_from_seed, PerturbSpec, Scene};
use crate::{Point3, Translation3};

const SHAPE_MODES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_keypoints: usize,
    pub n_vertices: usize,
    pub hand_extent: f64,
    /// Range of the per-sample hand scale factor.
    pub scale_range: (f64, f64),
    /// Standard deviation of each shape-mode displacement, metres.
    pub shape_sigma: f64,
    pub depth_range: (f64, f64),
    pub fov_range: (f64, f64),
    pub width: u32,
    pub height: u32,
    pub noise_px: f64,
    pub outliers: usize,
    /// Relative chance of each keypoint being an outlier; keypoints listed in
    /// `occlusion_prone` get `prone_propensity`, the rest get 1.
    pub occlusion_prone: Vec<usize>,
    pub prone_propensity: f64,
    /// Per-coordinate noise on the observed 3D keypoints, metres.
    pub noise_3d: f64,
    /// Log-normal sigma of the scale error on the observed 3D keypoints.
    pub scale_noise_3d: f64,
    pub canonical_f: f64,
    pub canonical_size: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_keypoints: 21,
            n_vertices: 64,
            hand_extent: 0.18,
            scale_range: (0.8, 1.2),
            shape_sigma: 0.01,
            depth_range: (0.5, 0.8),
            fov_range: (40.0, 70.0),
            width: 512,
            height: 512,
            noise_px: 2.0,
            outliers: 2,
            // fingertips in the usual 21-joint hand layout
            occlusion_prone: vec![4, 8, 12, 16, 20],
            prone_propensity: 20.0,
            noise_3d: 0.005,
            scale_noise_3d: 0.1,
            canonical_f: crate::camera::DEFAULT_CANONICAL_FOCAL,
            canonical_size: crate::camera::DEFAULT_CANONICAL_SIZE,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_keypoints < 2 || self.n_vertices < self.n_keypoints {
            return bad("need n_keypoints >= 2 and n_vertices >= n_keypoints");
        }
        if self.n_vertices > crate::synth::scene::MAX_VERTICES {
            return bad("too many vertices");
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.0 <= self.scale_range.1) {
            return bad("scale range must be positive and ordered");
        }
        if !(self.depth_range.0 > 0.1 && self.depth_range.1 < 10.0)
            || self.depth_range.0 > self.depth_range.1
        {
            return bad("depth range must lie within (0.1, 10)");
        }
        if self.hand_extent * self.scale_range.1 >= 2.0 * self.depth_range.0 {
            return bad("hand too large for the nearest depth");
        }
        if !(self.noise_px >= 0.0 && self.noise_3d >= 0.0 && self.scale_noise_3d >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if self.outliers + 1 >= self.n_keypoints {
            return bad("outlier count must be below n_keypoints - 1");
        }
        if self.occlusion_prone.iter().any(|&i| i >= self.n_keypoints) {
            return bad("occlusion-prone keypoint index out of range");
        }
        if !(self.prone_propensity > 0.0) {
            return bad("prone propensity must be positive");
        }
        if !(self.canonical_f > 0.0) || self.canonical_size == 0 {
            return bad("canonical camera must have positive focal and size");
        }
        Ok(())
    }

    fn propensity(&self) -> Vec<f64> {
        let mut p = vec![1.0; self.n_keypoints];
        for &i in &self.occlusion_prone {
            p[i] = self.prone_propensity;
        }
        p
    }
}

/// The shared mean shape, its deformation modes and the keypoint regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct HandTemplate {
    pub mean: Vec<Point3>,
    pub modes: Vec<Vec<Translation3>>,
    pub jreg: KeypointRegressor,
}

impl HandTemplate {
    pub fn generate(seed: u64, cfg: &DataConfig) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let half = 0.5 * cfg.hand_extent;
        let mut mean: Vec<Point3> = (0..cfg.n_vertices)
            .map(|_| {
                Point3::new(
                    uniform(&mut rng, -half, half),
                    uniform(&mut rng, -half, half),
                    uniform(&mut rng, -half, half),
                )
            })
            .collect();
        recentre(&mut mean);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let modes = (0..SHAPE_MODES)
            .map(|_| {
                (0..cfg.n_vertices)
                    .map(|_| {
                        Translation3::new(
                            normal.sample(&mut rng),
                            normal.sample(&mut rng),
                            normal.sample(&mut rng),
                        )
                    })
                    .collect()
            })
            .collect();
        let jreg = sample_regressor(&mut rng, cfg.n_keypoints, cfg.n_vertices)?;
        Ok(HandTemplate { mean, modes, jreg })
    }
}

fn recentre(points: &mut [Point3]) {
    let c = points.iter().map(|p| p.coords).sum::<Translation3>() / points.len() as f64;
    for p in points {
        *p -= c;
    }
}

/// One training or evaluation example, already expressed in the camera the
/// model works in (canonical when rectified).
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    /// Camera the pixels below live in.
    pub cam: CameraIntrinsics,
    /// Centre used to normalize pixel features.
    pub feature_centre: Pixel2,
    pub k2d_obs: Vec<Pixel2>,
    pub k3d_obs: Vec<Point3>,
    pub k2d_gt: Vec<Pixel2>,
    pub verts2d_gt: Vec<Pixel2>,
    pub verts_gt: Vec<Point3>,
    pub k3d_gt: Vec<Point3>,
    pub t_gt: Translation3,
    pub outlier_mask: Vec<bool>,
}

/// Scene in the original camera plus the noisy 3D observation.
fn draw_scene(
    seed: u64,
    template: &HandTemplate,
    cfg: &DataConfig,
) -> Result<(Scene, Vec<Point3>)> {
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let scale = uniform(&mut rng, cfg.scale_range.0, cfg.scale_range.1);
    let betas: Vec<f64> = (0..template.modes.len())
        .map(|_| normal.sample(&mut rng) * cfg.shape_sigma)
        .collect();
    let mut verts: Vec<Point3> = template
        .mean
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let d: Translation3 = template
                .modes
                .iter()
                .zip(&betas)
                .map(|(mode, b)| mode[j] * *b)
                .sum();
            Point3::from((m.coords + d) * scale)
        })
        .collect();
    recentre(&mut verts);

    let cam = sample_camera(&mut rng, cfg.fov_range, cfg.width, cfg.height)?;
    let t_gt = sample_translation(&mut rng, &cam, cfg.depth_range);
    let k3d = template.jreg.apply(&verts)?;
    let k2d = project_all(&cam, &k3d, &t_gt)?;

    let obs_scale = (normal.sample(&mut rng) * cfg.scale_noise_3d).exp();
    let k3d_obs = k3d
        .iter()
        .map(|k| {
            let e = Translation3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            ) * cfg.noise_3d;
            Point3::from(k.coords * obs_scale + e)
        })
        .collect();

    let scene = Scene {
        cam,
        verts_rel: verts,
        jreg: template.jreg.clone(),
        k2d_obs: k2d,
        t_gt: Some(t_gt),
        weights: None,
        outlier_mask: None,
        seed,
    };
    let spec = PerturbSpec {
        outlier_propensity: Some(cfg.propensity()),
        ..PerturbSpec::new(cfg.noise_px, cfg.outliers, derive_seed(seed, 1))
    };
    Ok((perturb(&scene, &spec)?, k3d_obs))
}

pub fn make_sample(
    seed: u64,
    template: &HandTemplate,
    cfg: &DataConfig,
    rectified: bool,
) -> Result<ToySample> {
    let (scene, k3d_obs) = draw_scene(seed, template, cfg)?;
    let t_gt = scene.t_gt.expect("drawn scenes carry ground truth");
    let k3d_gt = scene.keypoints_rel();
    let orig = scene.cam;
    let mut k2d_gt = project_all(&orig, &k3d_gt, &t_gt)?;
    let mut verts2d_gt = project_all(&orig, &scene.verts_rel, &t_gt)?;
    let mut k2d_obs = scene.k2d_obs;
    let (cam, feature_centre) = if rectified {
        let (canon, _) = rectify_intrinsics(
            &orig,
            cfg.canonical_f,
            cfg.canonical_size,
            cfg.canonical_size,
        )?;
        for px in k2d_obs
            .iter_mut()
            .chain(k2d_gt.iter_mut())
            .chain(verts2d_gt.iter_mut())
        {
            *px = rectify_pixel(&orig, &canon, px);
        }
        (canon, Pixel2::new(canon.u0, canon.v0))
    } else {
        // the principal point is not known to the model in the raw frame
        (
            orig,
            Pixel2::new(0.5 * orig.width as f64, 0.5 * orig.height as f64),
        )
    };
    Ok(ToySample {
        cam,
        feature_centre,
        k2d_obs,
        k3d_obs,
        k2d_gt,
        verts2d_gt,
        verts_gt: scene.verts_rel,
        k3d_gt,
        t_gt,
        outlier_mask: scene.outlier_mask.expect("perturb records a mask"),
    })
}

/// Train and held-out splits drawn from disjoint seed streams.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub template: HandTemplate,
    pub train: Vec<ToySample>,
    pub test: Vec<ToySample>,
}

pub fn make_dataset(
    seed: u64,
    n_train: usize,
    n_test: usize,
    cfg: &DataConfig,
    rectified: bool,
) -> Result<Dataset> {
    cfg.validate()?;
    let template = HandTemplate::generate(derive_seed(seed, 0), cfg)?;
    let draw = |stream: u64, n: usize| -> Result<Vec<ToySample>> {
        let base = derive_seed(seed, stream);
        (0..n as u64)
            .map(|i| make_sample(derive_seed(base, i), &template, cfg, rectified))
            .collect()
    };
    let train = draw(1, n_train)?;
    let test = draw(2, n_test)?;
    Ok(Dataset {
        template,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{normalize_pixel, project};

    #[test]
    fn rectified_and_raw_samples_share_geometry() {
        let cfg = DataConfig::default();
        let tpl = HandTemplate::generate(1, &cfg).unwrap();
        let raw = make_sample(5, &tpl, &cfg, false).unwrap();
        let rect = make_sample(5, &tpl, &cfg, true).unwrap();
        assert_eq!(raw.t_gt, rect.t_gt);
        assert_eq!(raw.k3d_obs, rect.k3d_obs);
        assert_eq!(rect.cam.f, 500.0);
        for (a, b) in raw.k2d_obs.iter().zip(&rect.k2d_obs) {
            let (ra, rb) = (normalize_pixel(&raw.cam, a), normalize_pixel(&rect.cam, b));
            assert!((ra.up - rb.up).abs() < 1e-12 && (ra.vp - rb.vp).abs() < 1e-12);
        }
        for (k, px) in rect.k3d_gt.iter().zip(&rect.k2d_gt) {
            let p = project(&rect.cam, &(k + rect.t_gt)).unwrap();
            assert!((p.u - px.u).abs() < 1e-9 && (p.v - px.v).abs() < 1e-9);
        }
    }

    #[test]
    fn outliers_prefer_prone_keypoints() {
        let cfg = DataConfig::default();
        let ds = make_dataset(3, 100, 0, &cfg, true).unwrap();
        let (mut prone, mut total) = (0, 0);
        for s in &ds.train {
            for (i, &m) in s.outlier_mask.iter().enumerate() {
                if m {
                    total += 1;
                    prone += cfg.occlusion_prone.contains(&i) as usize;
                }
            }
        }
        assert_eq!(total, 200);
        assert!(prone > 150, "{prone}");
    }

    #[test]
    fn dataset_is_deterministic() {
        let cfg = DataConfig::default();
        let a = make_dataset(9, 4, 2, &cfg, false).unwrap();
        let b = make_dataset(9, 4, 2, &cfg, false).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_ne!(a.train[0], a.train[1]);
    }
}
