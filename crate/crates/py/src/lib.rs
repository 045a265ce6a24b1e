//! Python bindings. Arrays cross the boundary as nested lists and structured
//! results come back as plain dictionaries.

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use rootfit_core::io::{from_json_str, to_json_string, ResultFile, SceneFile};
use rootfit_core::synth::{self, PerturbSpec, SceneConfig};
use rootfit_core::train::{self, Mode, TrainConfig};
use rootfit_core::{
    CameraIntrinsics, Error, Pixel2, Point3, PositioningPass, Translation3, WeightVector,
};

create_exception!(rootfit, DegenerateGeometryError, PyValueError);

fn to_py_err(e: Error) -> PyErr {
    match e {
        e if e.is_degenerate() => DegenerateGeometryError::new_err(e.to_string()),
        Error::Io(msg) => PyIOError::new_err(msg),
        e => PyValueError::new_err(e.to_string()),
    }
}

trait OrRaise<T> {
    fn or_raise(self) -> PyResult<T>;
}

impl<T> OrRaise<T> for rootfit_core::Result<T> {
    fn or_raise(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn weights_or_uniform(weights: Option<Vec<f64>>, n: usize) -> PyResult<WeightVector> {
    match weights {
        Some(w) => WeightVector::new(w).or_raise(),
        None => Ok(WeightVector::uniform(n)),
    }
}

/// Pinhole camera with focal length and principal point in pixels.
#[pyclass(name = "Camera", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyCamera(CameraIntrinsics);

#[pymethods]
impl PyCamera {
    #[new]
    fn new(f: f64, u0: f64, v0: f64, width: u32, height: u32) -> PyResult<Self> {
        CameraIntrinsics::new(f, u0, v0, width, height)
            .map(PyCamera)
            .or_raise()
    }

    #[staticmethod]
    fn from_fov(fov_deg: f64, width: u32, height: u32) -> PyResult<Self> {
        CameraIntrinsics::from_fov(fov_deg, width, height)
            .map(PyCamera)
            .or_raise()
    }

    #[getter]
    fn f(&self) -> f64 {
        self.0.f
    }

    #[getter]
    fn principal_point(&self) -> (f64, f64) {
        (self.0.u0, self.0.v0)
    }

    #[getter]
    fn size(&self) -> (u32, u32) {
        (self.0.width, self.0.height)
    }

    /// Pixel of a camera-space point in metres.
    fn project(&self, p: [f64; 3]) -> PyResult<(f64, f64)> {
        let px = rootfit_core::project(&self.0, &Point3::from(p)).or_raise()?;
        Ok((px.u, px.v))
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!(
            "Camera(f={}, u0={}, v0={}, width={}, height={})",
            c.f, c.u0, c.v0, c.width, c.height
        )
    }
}

/// Correspondences plus optional ground truth, weights and outlier mask.
#[pyclass(name = "Scene", frozen)]
pub struct PyScene(synth::Scene);

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        from_json_str::<SceneFile>(text)
            .and_then(SceneFile::into_scene)
            .map(PyScene)
            .or_raise()
    }

    fn to_json(&self) -> PyResult<String> {
        to_json_string(&SceneFile::from(&self.0)).or_raise()
    }

    #[getter]
    fn camera(&self) -> PyCamera {
        PyCamera(self.0.cam)
    }

    /// Root-relative 3D keypoints in metres.
    #[getter]
    fn keypoints_3d(&self) -> Vec<[f64; 3]> {
        self.0
            .keypoints_rel()
            .iter()
            .map(|p| [p.x, p.y, p.z])
            .collect()
    }

    /// Observed 2D keypoints in pixels.
    #[getter]
    fn keypoints_2d(&self) -> Vec<[f64; 2]> {
        self.0.k2d_obs.iter().map(|p| [p.u, p.v]).collect()
    }

    #[getter]
    fn translation_gt(&self) -> Option<[f64; 3]> {
        self.0.t_gt.map(|t| [t.x, t.y, t.z])
    }

    #[getter]
    fn outlier_mask(&self) -> Option<Vec<bool>> {
        self.0.outlier_mask.clone()
    }

    #[pyo3(signature = (weights=None))]
    fn solve<'py>(
        &self,
        py: Python<'py>,
        weights: Option<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let w = weights_or_uniform(weights, self.0.n_keypoints())?;
        let res = self.0.solve(&w).or_raise()?;
        to_dict(py, &ResultFile::new(&res, self.0.t_gt.as_ref()))
    }

    fn __len__(&self) -> usize {
        self.0.n_keypoints()
    }
}

fn correspondences(k3d: Vec<[f64; 3]>, k2d: Vec<[f64; 2]>) -> (Vec<Point3>, Vec<Pixel2>) {
    (
        k3d.into_iter().map(Point3::from).collect(),
        k2d.into_iter().map(|[u, v]| Pixel2 { u, v }).collect(),
    )
}

/// Weighted least-squares root translation from root-relative keypoints (m)
/// and their pixels. Uniform weights when `weights` is omitted.
#[pyfunction]
#[pyo3(signature = (camera, keypoints_3d, keypoints_2d, weights=None))]
fn solve<'py>(
    py: Python<'py>,
    camera: &PyCamera,
    keypoints_3d: Vec<[f64; 3]>,
    keypoints_2d: Vec<[f64; 2]>,
    weights: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let w = weights_or_uniform(weights, keypoints_3d.len())?;
    let (k3d, k2d) = correspondences(keypoints_3d, keypoints_2d);
    let pass = PositioningPass::run(&camera.0, &k3d, &k2d, &w).or_raise()?;
    to_dict(py, &ResultFile::new(pass.result(), None))
}

/// Gradient of `upstream . t` with respect to pixels, 3D keypoints and weights.
#[pyfunction]
#[pyo3(signature = (camera, keypoints_3d, keypoints_2d, upstream, weights=None))]
fn solve_vjp<'py>(
    py: Python<'py>,
    camera: &PyCamera,
    keypoints_3d: Vec<[f64; 3]>,
    keypoints_2d: Vec<[f64; 2]>,
    upstream: [f64; 3],
    weights: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let w = weights_or_uniform(weights, keypoints_3d.len())?;
    let (k3d, k2d) = correspondences(keypoints_3d, keypoints_2d);
    let pass = PositioningPass::run(&camera.0, &k3d, &k2d, &w).or_raise()?;
    to_dict(py, &pass.backward(&Translation3::from(upstream)))
}

/// Noiseless random scene with the default configuration.
#[pyfunction]
fn gen_scene(seed: u64) -> PyResult<PyScene> {
    synth::gen_scene(seed, &SceneConfig::default())
        .map(PyScene)
        .or_raise()
}

/// Adds Gaussian pixel noise (px) and replaces `outliers` keypoints with
/// uniform pixels.
#[pyfunction]
#[pyo3(signature = (scene, noise_px, outliers=0, seed=0))]
fn perturb(scene: &PyScene, noise_px: f64, outliers: usize, seed: u64) -> PyResult<PyScene> {
    synth::perturb(&scene.0, &PerturbSpec::new(noise_px, outliers, seed))
        .map(PyScene)
        .or_raise()
}

/// Maps a scene onto a canonical `size x size` camera with focal `f_canon`.
#[pyfunction]
#[pyo3(signature = (scene, f_canon=500.0, size=256))]
fn rectify(scene: &PyScene, f_canon: f64, size: u32) -> PyResult<PyScene> {
    synth::rectify_scene(&scene.0, f_canon, size)
        .map(PyScene)
        .or_raise()
}

/// Analytic against central-difference gradients on one scene.
#[pyfunction]
#[pyo3(signature = (scene, upstream, weights=None, eps=1e-6))]
fn gradient_check<'py>(
    py: Python<'py>,
    scene: &PyScene,
    upstream: [f64; 3],
    weights: Option<Vec<f64>>,
    eps: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let w = weights_or_uniform(weights, scene.0.n_keypoints())?;
    let check =
        synth::gradient_check(&scene.0, &w, &Translation3::from(upstream), eps).or_raise()?;
    to_dict(py, &check)
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    match mode {
        "e2e" => Ok(Mode::E2e),
        "detached" => Ok(Mode::Detached),
        other => Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    }
}

/// Trains the toy pipeline and returns the full report. The GIL is released
/// while training.
#[pyfunction]
#[pyo3(signature = (mode="e2e", rectified=true, seed=7, epochs=300, lr=0.003, n_train=200, n_test=100))]
#[allow(clippy::too_many_arguments)]
fn train_toy<'py>(
    py: Python<'py>,
    mode: &str,
    rectified: bool,
    seed: u64,
    epochs: usize,
    lr: f64,
    n_train: usize,
    n_test: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let config = TrainConfig {
        mode: parse_mode(mode)?,
        rectified,
        seed,
        epochs,
        lr,
        n_train,
        n_test,
        ..TrainConfig::default()
    };
    let report = py.detach(|| train::train(&config)).or_raise()?;
    to_dict(py, &report)
}

#[pymodule]
fn rootfit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add(
        "DegenerateGeometryError",
        m.py().get_type::<DegenerateGeometryError>(),
    )?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(solve_vjp, m)?)?;
    m.add_function(wrap_pyfunction!(gen_scene, m)?)?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(rectify, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    Ok(())
}
