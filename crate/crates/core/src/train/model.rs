use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::ToySample;
use crate::camera::Pixel2;
use crate::error::{Error, Result};
use crate::synth::rng_from_seed;
use crate::Point3;

/// Pixels per unit of model output.
pub const PIXEL_UNIT: f64 = 100.0;
/// Metres per unit of model output.
pub const METRE_UNIT: f64 = 0.1;
/// Logits per unit of model output.
pub const LOGIT_UNIT: f64 = 10.0;

const INIT_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_keypoints: usize,
    pub n_vertices: usize,
}

impl ModelDims {
    /// Normalized 2D observations followed by the observed 3D keypoints.
    pub fn n_inputs(&self) -> usize {
        5 * self.n_keypoints
    }

    /// 2D keypoints, vertices, weight logits.
    pub fn n_outputs(&self) -> usize {
        2 * self.n_keypoints + 3 * self.n_vertices + self.n_keypoints
    }

    pub(crate) fn vertex_offset(&self) -> usize {
        2 * self.n_keypoints
    }

    pub(crate) fn logit_offset(&self) -> usize {
        2 * self.n_keypoints + 3 * self.n_vertices
    }
}

/// Affine map from observation features to every head's output, with a
/// sigmoid on the weight head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub dims: ModelDims,
    /// Row-major `n_outputs x n_inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Decoded outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub k2d: Vec<Pixel2>,
    pub verts_rel: Vec<Point3>,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Small random weights, zero bias, and the 2D head started as the identity
/// on the observed pixels.
pub fn init_model(seed: u64, dims: ModelDims) -> Result<ToyModel> {
    if dims.n_keypoints < 2 || dims.n_vertices < dims.n_keypoints {
        return Err(Error::InvalidConfig(format!(
            "inconsistent model dimensions {dims:?}"
        )));
    }
    let (n_in, n_out) = (dims.n_inputs(), dims.n_outputs());
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, INIT_SIGMA).expect("positive sigma");
    let mut weights: Vec<f64> = (0..n_in * n_out).map(|_| normal.sample(&mut rng)).collect();
    for i in 0..2 * dims.n_keypoints {
        weights[i * n_in + i] += 1.0;
    }
    Ok(ToyModel {
        dims,
        weights,
        bias: vec![0.0; n_out],
    })
}

impl ToyModel {
    pub fn n_parameters(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn raw_output(&self, x: &[f64]) -> Vec<f64> {
        let n_in = self.dims.n_inputs();
        debug_assert_eq!(x.len(), n_in);
        self.weights
            .chunks_exact(n_in)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }

    pub fn decode(&self, sample: &ToySample, out: &[f64]) -> Prediction {
        let d = self.dims;
        let c = sample.feature_centre;
        let k2d = out[..2 * d.n_keypoints]
            .chunks_exact(2)
            .map(|o| Pixel2::new(c.u + PIXEL_UNIT * o[0], c.v + PIXEL_UNIT * o[1]))
            .collect();
        let verts_rel = out[d.vertex_offset()..d.logit_offset()]
            .chunks_exact(3)
            .map(|o| Point3::new(o[0], o[1], o[2]) * METRE_UNIT)
            .collect();
        let logits: Vec<f64> = out[d.logit_offset()..]
            .iter()
            .map(|l| l * LOGIT_UNIT)
            .collect();
        let weights = logits.iter().map(|&l| sigmoid(l)).collect();
        Prediction {
            k2d,
            verts_rel,
            logits,
            weights,
        }
    }

    pub fn predict(&self, sample: &ToySample) -> Prediction {
        self.decode(sample, &self.raw_output(&featurize(sample)))
    }
}

pub fn featurize(sample: &ToySample) -> Vec<f64> {
    let c = sample.feature_centre;
    let mut x = Vec::with_capacity(5 * sample.k2d_obs.len());
    for p in &sample.k2d_obs {
        x.push((p.u - c.u) / PIXEL_UNIT);
        x.push((p.v - c.v) / PIXEL_UNIT);
    }
    for k in &sample.k3d_obs {
        x.extend(k.coords.iter().map(|v| v / METRE_UNIT));
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            n_keypoints: 21,
            n_vertices: 64,
        }
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(
            init_model(3, dims()).unwrap(),
            init_model(3, dims()).unwrap()
        );
        assert_ne!(
            init_model(3, dims()).unwrap(),
            init_model(4, dims()).unwrap()
        );
        assert!(init_model(
            3,
            ModelDims {
                n_keypoints: 21,
                n_vertices: 5
            }
        )
        .is_err());
    }

    #[test]
    fn zero_input_passes_bias() {
        let mut m = init_model(1, dims()).unwrap();
        for (i, b) in m.bias.iter_mut().enumerate() {
            *b = i as f64 * 0.01;
        }
        assert_eq!(m.raw_output(&vec![0.0; dims().n_inputs()]), m.bias);
    }

    #[test]
    fn sigmoid_range() {
        assert_eq!(sigmoid(0.0), 0.5);
        for x in [-30.0, -5.0, -1e-3, 2.0, 30.0] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0);
            assert!((sigmoid(-x) - (1.0 - s)).abs() < 1e-15);
        }
    }
}
