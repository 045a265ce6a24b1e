//! Forward pass, losses and parameter gradients of the toy pipeline.
//!
//! Relative-space terms act on the heads directly. Camera-space terms sit
//! behind the root solve; in detached mode they are evaluated but do not
//! produce gradients.

use serde::{Deserialize, Serialize};

use super::data::ToySample;
use super::model::{featurize, Prediction, ToyModel, LOGIT_UNIT, METRE_UNIT, PIXEL_UNIT};
use crate::error::Result;
use crate::loss::{
    loss_pixel_l1, loss_pixel_l1_grad, loss_relative_l1, loss_relative_l1_grad,
    loss_translation_rmse, loss_translation_rmse_grad, projected_l1, ProjectedL1,
};
use crate::regressor::KeypointRegressor;
use crate::solve::{PositioningPass, WeightVector};
use crate::{Point3, Translation3};

/// Millimetres per metre; 3D losses and metrics are reported in millimetres.
const MM: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Gradients flow through the root solve.
    E2e,
    /// Root solve inputs are treated as constants.
    Detached,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "e2e" => Ok(Mode::E2e),
            "detached" => Ok(Mode::Detached),
            other => Err(format!("unknown mode {other:?}, expected e2e or detached")),
        }
    }
}

/// Loss coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Root-relative vertex L1 (mm).
    pub rel: f64,
    /// 2D keypoint L1 (px).
    pub kp2d: f64,
    /// Translation RMSE (mm).
    pub trans: f64,
    /// Keypoint consistency L1 (px).
    pub consistency: f64,
    /// Projected vertex L1 (px).
    pub vert2d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rel: 1.0,
            kp2d: 1.0,
            trans: 1.0,
            consistency: 1.0,
            vert2d: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.rel,
            self.kp2d,
            self.trans,
            self.consistency,
            self.vert2d,
        ];
        if all.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(crate::Error::InvalidConfig(
                "loss coefficients must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Unweighted loss values for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub rel: f64,
    pub kp2d: f64,
    pub trans: f64,
    pub consistency: f64,
    pub vert2d: f64,
}

impl LossTerms {
    pub fn total(&self, l: &LossWeights) -> f64 {
        l.rel * self.rel
            + l.kp2d * self.kp2d
            + l.trans * self.trans
            + l.consistency * self.consistency
            + l.vert2d * self.vert2d
    }
}

struct CameraSpace {
    pass: PositioningPass,
    consistency: ProjectedL1,
    vert2d: ProjectedL1,
}

/// Everything the forward pass produces for one sample.
pub struct Forward {
    pub features: Vec<f64>,
    pub prediction: Prediction,
    pub k3d_rel: Vec<Point3>,
    pub terms: LossTerms,
    camera: Option<CameraSpace>,
}

impl Forward {
    /// Root translation, if the solve and projections succeeded.
    pub fn translation(&self) -> Option<Translation3> {
        self.camera.as_ref().map(|c| c.pass.translation())
    }

    /// Whether the camera-space part was skipped.
    pub fn skipped(&self) -> bool {
        self.camera.is_none()
    }
}

fn camera_space(sample: &ToySample, pred: &Prediction, k3d_rel: &[Point3]) -> Result<CameraSpace> {
    let w = WeightVector::new(pred.weights.clone())?;
    let pass = PositioningPass::run(&sample.cam, k3d_rel, &pred.k2d, &w)?;
    let t = pass.translation();
    let k3d_cs: Vec<Point3> = k3d_rel.iter().map(|k| k + t).collect();
    let verts_cs: Vec<Point3> = pred.verts_rel.iter().map(|v| v + t).collect();
    let consistency = projected_l1(&sample.cam, &k3d_cs, &pred.k2d)?;
    let vert2d = projected_l1(&sample.cam, &verts_cs, &sample.verts2d_gt)?;
    Ok(CameraSpace {
        pass,
        consistency,
        vert2d,
    })
}

/// Runs the model, the root solve and every loss term. A failed solve or a
/// point behind the camera skips the camera-space terms (left at zero).
pub fn forward(model: &ToyModel, sample: &ToySample, jreg: &KeypointRegressor) -> Result<Forward> {
    let features = featurize(sample);
    let out = model.raw_output(&features);
    forward_from_output(model, sample, jreg, features, &out)
}

fn forward_from_output(
    model: &ToyModel,
    sample: &ToySample,
    jreg: &KeypointRegressor,
    features: Vec<f64>,
    out: &[f64],
) -> Result<Forward> {
    let prediction = model.decode(sample, out);
    let k3d_rel = jreg.apply(&prediction.verts_rel)?;
    let mut terms = LossTerms {
        rel: MM * loss_relative_l1(&prediction.verts_rel, &sample.verts_gt)?,
        kp2d: loss_pixel_l1(&prediction.k2d, &sample.k2d_gt)?,
        ..Default::default()
    };
    let camera = camera_space(sample, &prediction, &k3d_rel).ok();
    if let Some(c) = &camera {
        terms.trans = MM * loss_translation_rmse(&c.pass.translation(), &sample.t_gt);
        terms.consistency = c.consistency.value;
        terms.vert2d = c.vert2d.value;
    }
    Ok(Forward {
        features,
        prediction,
        k3d_rel,
        terms,
        camera,
    })
}

/// Loss gradients with respect to the raw model outputs, split by where
/// they come from.
pub struct OutputGradients {
    pub relative: Vec<f64>,
    pub camera: Vec<f64>,
}

pub fn output_gradients(
    model: &ToyModel,
    sample: &ToySample,
    jreg: &KeypointRegressor,
    fwd: &Forward,
    lambdas: &LossWeights,
    mode: Mode,
) -> Result<OutputGradients> {
    let d = model.dims;
    let n_out = d.n_outputs();
    let pred = &fwd.prediction;

    let mut relative = vec![0.0; n_out];
    for (i, g) in loss_pixel_l1_grad(&pred.k2d, &sample.k2d_gt)?
        .iter()
        .enumerate()
    {
        relative[2 * i] += lambdas.kp2d * g[0] * PIXEL_UNIT;
        relative[2 * i + 1] += lambdas.kp2d * g[1] * PIXEL_UNIT;
    }
    let vo = d.vertex_offset();
    for (j, g) in loss_relative_l1_grad(&pred.verts_rel, &sample.verts_gt)?
        .iter()
        .enumerate()
    {
        for a in 0..3 {
            relative[vo + 3 * j + a] += lambdas.rel * MM * g[a] * METRE_UNIT;
        }
    }

    let mut camera = vec![0.0; n_out];
    let cs = match (mode, &fwd.camera) {
        (Mode::E2e, Some(cs)) => cs,
        _ => return Ok(OutputGradients { relative, camera }),
    };

    let n_k = d.n_keypoints;
    let mut d_t =
        lambdas.trans * MM * loss_translation_rmse_grad(&cs.pass.translation(), &sample.t_gt);
    let mut d_k2d = vec![[0.0; 2]; n_k];
    let mut d_k3d = vec![Translation3::zeros(); n_k];
    let mut d_verts = vec![Translation3::zeros(); d.n_vertices];

    for (i, (dp, dt)) in cs
        .consistency
        .d_points
        .iter()
        .zip(&cs.consistency.d_targets)
        .enumerate()
    {
        d_k3d[i] += lambdas.consistency * dp;
        d_t += lambdas.consistency * dp;
        d_k2d[i][0] += lambdas.consistency * dt[0];
        d_k2d[i][1] += lambdas.consistency * dt[1];
    }
    for (j, dp) in cs.vert2d.d_points.iter().enumerate() {
        d_verts[j] += lambdas.vert2d * dp;
        d_t += lambdas.vert2d * dp;
    }

    let through_solve = cs.pass.backward(&d_t);
    for i in 0..n_k {
        d_k2d[i][0] += through_solve.d_k2d[i][0];
        d_k2d[i][1] += through_solve.d_k2d[i][1];
        let g = through_solve.d_k3d[i];
        d_k3d[i] += Translation3::new(g[0], g[1], g[2]);
    }
    for (dv, dk) in d_verts.iter_mut().zip(jreg.apply_transpose(&d_k3d)?) {
        *dv += dk;
    }

    for i in 0..n_k {
        camera[2 * i] += d_k2d[i][0] * PIXEL_UNIT;
        camera[2 * i + 1] += d_k2d[i][1] * PIXEL_UNIT;
    }
    for (j, g) in d_verts.iter().enumerate() {
        for a in 0..3 {
            camera[vo + 3 * j + a] += g[a] * METRE_UNIT;
        }
    }
    let lo = d.logit_offset();
    for (i, (dw, w)) in through_solve.d_w.iter().zip(&pred.weights).enumerate() {
        camera[lo + i] += dw * w * (1.0 - w) * LOGIT_UNIT;
    }
    Ok(OutputGradients { relative, camera })
}

/// Parameter-shaped gradient (weights then bias).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGradient {
    fn zeros(model: &ToyModel) -> Self {
        ParamGradient {
            weights: vec![0.0; model.weights.len()],
            bias: vec![0.0; model.bias.len()],
        }
    }

    fn accumulate(&mut self, delta: &[f64], x: &[f64]) {
        let n_in = x.len();
        for (o, &dv) in delta.iter().enumerate() {
            if dv == 0.0 {
                continue;
            }
            self.bias[o] += dv;
            for (w, xi) in self.weights[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                *w += dv * xi;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .for_each(|g| *g *= s);
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.bias)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|&g| g == 0.0)
    }
}

/// Batch-mean gradients of the relative-space and camera-space terms.
pub struct BatchGradient {
    pub relative: ParamGradient,
    pub camera: ParamGradient,
    pub loss_sum: f64,
    pub skipped: usize,
}

/// Batch-mean parameter gradients. Each sample's camera-space output gradient
/// is rescaled head by head (2D, vertices, logits) to Euclidean norm at most
/// `camera_clip`; pass `f64::INFINITY` to disable.
pub fn batch_gradient(
    model: &ToyModel,
    batch: &[&ToySample],
    jreg: &KeypointRegressor,
    lambdas: &LossWeights,
    mode: Mode,
    camera_clip: f64,
) -> Result<BatchGradient> {
    let mut relative = ParamGradient::zeros(model);
    let mut camera = ParamGradient::zeros(model);
    let mut loss_sum = 0.0;
    let mut skipped = 0;
    for sample in batch {
        let fwd = forward(model, sample, jreg)?;
        loss_sum += fwd.terms.total(lambdas);
        skipped += fwd.skipped() as usize;
        let mut g = output_gradients(model, sample, jreg, &fwd, lambdas, mode)?;
        let d = model.dims;
        let heads = [
            0..d.vertex_offset(),
            d.vertex_offset()..d.logit_offset(),
            d.logit_offset()..d.n_outputs(),
        ];
        for range in heads {
            let block = &mut g.camera[range];
            let norm = block.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > camera_clip {
                let s = camera_clip / norm;
                block.iter_mut().for_each(|x| *x *= s);
            }
        }
        relative.accumulate(&g.relative, &fwd.features);
        camera.accumulate(&g.camera, &fwd.features);
    }
    let s = 1.0 / batch.len().max(1) as f64;
    relative.scale(s);
    camera.scale(s);
    Ok(BatchGradient {
        relative,
        camera,
        loss_sum,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_sum: f64,
    pub skipped: usize,
    pub relative_grad_norm: f64,
    pub camera_grad_norm: f64,
}

/// One plain gradient-descent update on `batch`.
pub fn step(
    model: &ToyModel,
    batch: &[&ToySample],
    jreg: &KeypointRegressor,
    lambdas: &LossWeights,
    mode: Mode,
    lr: f64,
    camera_clip: f64,
) -> Result<(ToyModel, StepStats)> {
    if batch.is_empty() {
        return Err(crate::Error::InvalidConfig("empty batch".into()));
    }
    let g = batch_gradient(model, batch, jreg, lambdas, mode, camera_clip)?;
    if mode == Mode::Detached {
        assert!(
            g.camera.is_zero(),
            "camera-space gradient leaked through the stop-gradient"
        );
    }
    let mut next = model.clone();
    for ((p, a), b) in next
        .weights
        .iter_mut()
        .zip(&g.relative.weights)
        .zip(&g.camera.weights)
    {
        *p -= lr * (a + b);
    }
    for ((p, a), b) in next
        .bias
        .iter_mut()
        .zip(&g.relative.bias)
        .zip(&g.camera.bias)
    {
        *p -= lr * (a + b);
    }
    Ok((
        next,
        StepStats {
            loss_sum: g.loss_sum,
            skipped: g.skipped,
            relative_grad_norm: g.relative.norm(),
            camera_grad_norm: g.camera.norm(),
        },
    ))
}

/// Held-out metrics, 3D errors in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean camera-space keypoint error.
    pub cs_mje_mm: f64,
    /// Mean keypoint error after subtracting each set's centroid (root-centred,
    /// no rotation or scale alignment).
    pub rs_mje_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_inlier_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_outlier_weight: Option<f64>,
    pub evaluated: usize,
    pub skipped: usize,
}

fn centroid(points: &[Point3]) -> Translation3 {
    points.iter().map(|p| p.coords).sum::<Translation3>() / points.len() as f64
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// Camera-space and root-centred keypoint errors plus mean predicted
/// weights on inlier and outlier keypoints. Samples whose solve fails are
/// counted in `skipped` and left out of the averages.
pub fn evaluate(
    model: &ToyModel,
    samples: &[ToySample],
    jreg: &KeypointRegressor,
) -> Result<EvalMetrics> {
    let (mut cs, mut rs, mut n) = (0.0, 0.0, 0usize);
    let (mut w_in, mut n_in, mut w_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    let mut skipped = 0;
    for s in samples {
        let pred = model.predict(s);
        let k3d = jreg.apply(&pred.verts_rel)?;
        for (w, &m) in pred.weights.iter().zip(&s.outlier_mask) {
            if m {
                w_out += w;
                n_out += 1;
            } else {
                w_in += w;
                n_in += 1;
            }
        }
        let solved = WeightVector::new(pred.weights.clone())
            .and_then(|w| PositioningPass::run(&s.cam, &k3d, &pred.k2d, &w));
        let t = match solved {
            Ok(pass) => pass.translation(),
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let (c_pred, c_gt) = (centroid(&k3d), centroid(&s.k3d_gt));
        for (p, g) in k3d.iter().zip(&s.k3d_gt) {
            cs += ((p + t) - (g + s.t_gt)).norm();
            rs += ((p - c_pred) - (g - c_gt)).norm();
            n += 1;
        }
    }
    Ok(EvalMetrics {
        cs_mje_mm: mean(MM * cs, n).unwrap_or(f64::INFINITY),
        rs_mje_mm: mean(MM * rs, n).unwrap_or(f64::INFINITY),
        mean_inlier_weight: mean(w_in, n_in),
        mean_outlier_weight: mean(w_out, n_out),
        evaluated: samples.len() - skipped,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::data::{make_dataset, DataConfig};
    use crate::train::model::init_model;
    use crate::train::ModelDims;

    fn setup() -> (ToyModel, crate::train::Dataset) {
        let cfg = DataConfig::default();
        let data = make_dataset(4, 6, 0, &cfg, true).unwrap();
        let dims = ModelDims {
            n_keypoints: 21,
            n_vertices: 64,
        };
        let mut model = init_model(1, dims).unwrap();
        // vertex head reproducing the true template mean keeps every depth positive
        let vo = dims.vertex_offset();
        for (j, v) in data.template.mean.iter().enumerate() {
            for a in 0..3 {
                model.bias[vo + 3 * j + a] = v[a] / METRE_UNIT;
            }
        }
        (model, data)
    }

    #[test]
    fn output_gradients_match_finite_differences() {
        let (model, data) = setup();
        let jreg = &data.template.jreg;
        let lambdas = LossWeights {
            rel: 0.7,
            kp2d: 1.3,
            trans: 0.9,
            consistency: 1.1,
            vert2d: 0.6,
        };
        let mut checked = 0;
        for sample in &data.train {
            let features = featurize(sample);
            let out = model.raw_output(&features);
            let fwd = forward_from_output(&model, sample, jreg, features.clone(), &out).unwrap();
            if fwd.skipped() {
                continue;
            }
            checked += 1;
            let g = output_gradients(&model, sample, jreg, &fwd, &lambdas, Mode::E2e).unwrap();
            let eps = 1e-7;
            let mut worst: f64 = 0.0;
            for o in 0..out.len() {
                let mut hi = out.clone();
                hi[o] += eps;
                let mut lo = out.clone();
                lo[o] -= eps;
                let f = |x: &[f64]| {
                    forward_from_output(&model, sample, jreg, features.clone(), x)
                        .unwrap()
                        .terms
                        .total(&lambdas)
                };
                let fd = (f(&hi) - f(&lo)) / (2.0 * eps);
                let an = g.relative[o] + g.camera[o];
                worst = worst.max((fd - an).abs() / (1.0 + an.abs()));
            }
            // L1 kinks are crossed only with negligible probability at this step
            assert!(worst < 1e-4, "worst output-gradient mismatch {worst}");
        }
        assert!(checked >= 3, "only {checked} samples were solvable");
    }

    #[test]
    fn detached_mode_has_no_camera_gradient() {
        let (model, data) = setup();
        let jreg = &data.template.jreg;
        let batch: Vec<_> = data.train.iter().collect();
        let g = batch_gradient(
            &model,
            &batch,
            jreg,
            &LossWeights::default(),
            Mode::Detached,
            f64::INFINITY,
        )
        .unwrap();
        assert!(g.camera.is_zero());
        assert!(!g.relative.is_zero());
        let e = batch_gradient(
            &model,
            &batch,
            jreg,
            &LossWeights::default(),
            Mode::E2e,
            f64::INFINITY,
        )
        .unwrap();
        assert!(e.camera.norm() > 0.0);
        assert_eq!(e.relative, g.relative);
        assert_eq!(e.loss_sum, g.loss_sum);
    }
}
