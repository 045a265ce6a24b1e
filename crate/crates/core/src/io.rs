//! JSON file formats.
//!
//! Floats are written with 17 significant digits in exponent form so that
//! every value round-trips bit for bit and identical inputs give identical
//! bytes. Keys appear in declaration order.

use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::camera::{CameraIntrinsics, Pixel2};
use crate::error::{Error, Result};
use crate::regressor::KeypointRegressor;
use crate::solve::{SolveResult, WeightVector};
use crate::synth::Scene;
use crate::{Point3, Translation3};

/// On-disk form of a [`Scene`]. Lengths are in metres, image coordinates in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub intrinsics: CameraIntrinsics,
    pub vertices_rel: Vec<[f64; 3]>,
    pub j_reg: Vec<Vec<f64>>,
    pub keypoints_2d: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation_gt: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outlier_mask: Option<Vec<bool>>,
    pub seed: u64,
}

impl From<&Scene> for SceneFile {
    fn from(s: &Scene) -> Self {
        SceneFile {
            intrinsics: s.cam,
            vertices_rel: s.verts_rel.iter().map(|p| [p.x, p.y, p.z]).collect(),
            j_reg: s.jreg.rows().map(<[f64]>::to_vec).collect(),
            keypoints_2d: s.k2d_obs.iter().map(|p| [p.u, p.v]).collect(),
            translation_gt: s.t_gt.map(|t| [t.x, t.y, t.z]),
            weights: s.weights.as_ref().map(|w| w.as_slice().to_vec()),
            outlier_mask: s.outlier_mask.clone(),
            seed: s.seed,
        }
    }
}

impl SceneFile {
    /// Converts to a validated [`Scene`]. Fewer than two keypoints is reported
    /// as [`Error::TooFewCorrespondences`] and every other failure as
    /// [`Error::Schema`].
    pub fn into_scene(self) -> Result<Scene> {
        let schema = |e: Error| {
            if e.is_degenerate() {
                e
            } else {
                Error::Schema(e.to_string())
            }
        };
        let jreg = KeypointRegressor::from_rows(self.j_reg).map_err(schema)?;
        let weights = self
            .weights
            .map(WeightVector::new)
            .transpose()
            .map_err(schema)?;
        let scene = Scene {
            cam: self.intrinsics,
            verts_rel: self
                .vertices_rel
                .iter()
                .map(|v| Point3::new(v[0], v[1], v[2]))
                .collect(),
            jreg,
            k2d_obs: self
                .keypoints_2d
                .iter()
                .map(|p| Pixel2::new(p[0], p[1]))
                .collect(),
            t_gt: self.translation_gt.map(Translation3::from),
            weights,
            outlier_mask: self.outlier_mask,
            seed: self.seed,
        };
        scene.validate().map_err(schema)?;
        Ok(scene)
    }
}

/// Output of solving one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    /// Root translation in metres.
    pub translation: [f64; 3],
    pub residual_norm: f64,
    pub cond_estimate: f64,
    pub behind_camera: Vec<bool>,
    /// Euclidean distance to the ground-truth translation, in metres.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_vs_gt: Option<f64>,
    pub tool_version: String,
}

impl ResultFile {
    pub fn new(res: &SolveResult, t_gt: Option<&Translation3>) -> Self {
        ResultFile {
            translation: [res.t.x, res.t.y, res.t.z],
            residual_norm: res.residual_norm,
            cond_estimate: res.cond_estimate,
            behind_camera: res.behind_camera.clone(),
            error_vs_gt: t_gt.map(|g| (res.t - g).norm()),
            tool_version: crate::VERSION.to_string(),
        }
    }
}

/// Pretty-printing formatter that writes floats as `{:.16e}`.
struct StableFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for StableFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_null<W: ?Sized + Write>(&mut self, _w: &mut W) -> std::io::Result<()> {
        Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "non-finite number or absent value",
        ))
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes `value` as pretty JSON with a trailing newline.
///
/// serde_json writes NaN and infinities as `null`, so any `null` is rejected;
/// optional fields must be skipped when absent instead.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut buf, StableFormatter(PrettyFormatter::new()));
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Schema(e.to_string()))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = to_json_string(value)?;
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    from_json_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    read_json::<SceneFile>(path)?
        .into_scene()
        .map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
            other => other,
        })
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_json(path, &SceneFile::from(scene))
}
