//! `rootfit` command-line tool.
//!
//! Exit codes: 0 success, 1 invalid flags, 2 degenerate geometry, 3 I/O or
//! schema error, 4 check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use rootfit_core::io::{read_scene, write_json, write_scene, ResultFile};
use rootfit_core::synth::{
    derive_seed, gen_scene, gradient_check, perturb, random_gradcheck_case, rectify_scene,
    PerturbSpec, SceneConfig,
};
use rootfit_core::train::{run_trends, train, Mode, TrainConfig};
use rootfit_core::{Error, Translation3, WeightVector};

const EXIT_INVALID_FLAGS: u8 = 1;
const EXIT_DEGENERATE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(
    name = "rootfit",
    version,
    about = "Closed-form root translation from 2D-3D keypoint correspondences",
    after_help = "Units: lengths in metres, image coordinates and focal lengths in pixels.\n\
                  Exit codes: 0 ok, 1 invalid flags, 2 degenerate geometry, \
                  3 I/O or schema error, 4 check failed."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightSource {
    /// All weights 1
    Uniform,
    /// The scene's "weights" array
    FromFile,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one scene for its root translation and write a result file
    Solve {
        /// Scene JSON file (metres, pixels)
        #[arg(long)]
        scene: PathBuf,
        /// Keypoint confidences to use (unitless, in [0, 1])
        #[arg(long, value_enum, default_value = "uniform")]
        weights: WeightSource,
        /// Result JSON file to write (translation in metres)
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic scenes named scene_{seed}_{index}.json
    Synth {
        /// Base random seed (integer)
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of scenes to write
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Standard deviation of per-axis keypoint noise [px]
        #[arg(long, default_value_t = 0.0)]
        noise_px: f64,
        /// Keypoints replaced by uniform in-frame outliers (count per scene)
        #[arg(long, default_value_t = 0)]
        outliers: usize,
        /// Output directory, created if missing
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the analytic gradient with central finite differences
    #[command(group(ArgGroup::new("input").required(true).args(["scene", "random"])))]
    Gradcheck {
        /// Scene JSON file (metres, pixels); uses its weights if present
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Number of random noisy scenes to check instead of a file
        #[arg(long)]
        random: Option<usize>,
        /// Seed for --random (integer)
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Finite-difference step, applied in pixels, metres and weight units
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Largest accepted relative error (unitless)
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Map a scene onto a canonical camera
    Rectify {
        /// Scene JSON file (metres, pixels)
        #[arg(long)]
        scene: PathBuf,
        /// Canonical focal length [px]
        #[arg(long, default_value_t = 500.0)]
        canonical_f: f64,
        /// Canonical frame width and height [px]
        #[arg(long, default_value_t = 256)]
        size: u32,
        /// Rectified scene JSON file to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the linear toy pipeline and write a JSON report plus a CSV
    Train {
        /// Whether camera-space losses reach the network through the solver
        #[arg(long, value_enum, default_value = "e2e")]
        mode: ModeArg,
        /// Map observations to the canonical camera before featurizing
        #[arg(long, action = clap::ArgAction::Set, default_value_t = true)]
        rectified: bool,
        /// Seed for data and initialization (integer)
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Training epochs (>= 1)
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        /// Gradient-descent step size (unitless; losses in mm and px)
        #[arg(long, default_value_t = 0.003)]
        lr: f64,
        /// Training scenes
        #[arg(long = "train", default_value_t = 200)]
        n_train: usize,
        /// Held-out scenes
        #[arg(long = "test", default_value_t = 100)]
        n_test: usize,
        /// Report JSON path; the CSV goes next to it with a .csv extension
        /// (held-out errors in mm)
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the three-way comparison (e2e vs detached, rectified vs raw) and
    /// exit 4 unless every trend holds
    Trends {
        /// Seed for data and initialization (integer)
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Training epochs per run
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        /// Comparison JSON path (errors in mm)
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    E2e,
    Detached,
}

enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Check(_) => EXIT_CHECK_FAILED,
            Failure::Core(Error::Io(_) | Error::Schema(_)) => EXIT_IO,
            Failure::Core(Error::InvalidConfig(_)) => EXIT_INVALID_FLAGS,
            Failure::Core(_) => EXIT_DEGENERATE,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID_FLAGS)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Check(msg) => eprintln!("check failed: {msg}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Solve {
            scene,
            weights,
            out,
        } => solve(&scene, weights, &out),
        Command::Synth {
            seed,
            count,
            noise_px,
            outliers,
            out,
        } => synth(seed, count, noise_px, outliers, &out),
        Command::Gradcheck {
            scene,
            random,
            seed,
            eps,
            tol,
        } => gradcheck(scene.as_deref(), random, seed, eps, tol),
        Command::Rectify {
            scene,
            canonical_f,
            size,
            out,
        } => {
            let s = rectify_scene(&read_scene(&scene)?, canonical_f, size)?;
            write_scene(&out, &s)?;
            println!(
                "f = {} px, principal point = ({}, {}) px",
                s.cam.f, s.cam.u0, s.cam.v0
            );
            Ok(())
        }
        Command::Train {
            mode,
            rectified,
            seed,
            epochs,
            lr,
            n_train,
            n_test,
            report,
        } => {
            let config = TrainConfig {
                mode: match mode {
                    ModeArg::E2e => Mode::E2e,
                    ModeArg::Detached => Mode::Detached,
                },
                rectified,
                seed,
                epochs,
                lr,
                n_train,
                n_test,
                ..TrainConfig::default()
            };
            let r = train(&config)?;
            write_json(&report, &r)?;
            write_text(&report.with_extension("csv"), &r.csv())?;
            println!(
                "CS-MJE {:.3} mm, RS-MJE {:.3} mm (root-centred), {} held-out samples skipped",
                r.final_metrics.cs_mje_mm, r.final_metrics.rs_mje_mm, r.final_metrics.skipped
            );
            Ok(())
        }
        Command::Trends { seed, epochs, out } => {
            let base = TrainConfig {
                seed,
                epochs,
                ..TrainConfig::default()
            };
            let t = run_trends(&base)?;
            write_json(&out, &t)?;
            let e = &t.end_to_end;
            let r = &t.rectification;
            println!(
                "e2e {:.3} mm vs detached {:.3} mm: {}",
                e.first_metrics.cs_mje_mm, e.second_metrics.cs_mje_mm, t.e2e_beats_detached
            );
            println!(
                "rectified {:.3} mm vs unrectified {:.3} mm: {}",
                r.second_metrics.cs_mje_mm,
                r.first_metrics.cs_mje_mm,
                t.rectified_beats_unrectified
            );
            println!(
                "outlier weight {:?} vs inlier weight {:?}: {}",
                e.first_metrics.mean_outlier_weight,
                e.first_metrics.mean_inlier_weight,
                t.outliers_downweighted
            );
            if t.e2e_beats_detached && t.rectified_beats_unrectified && t.outliers_downweighted {
                Ok(())
            } else {
                Err(Failure::Check("not every trend holds".into()))
            }
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn solve(scene_path: &Path, source: WeightSource, out: &Path) -> Result<(), Failure> {
    let scene = read_scene(scene_path)?;
    let w = match source {
        WeightSource::Uniform => WeightVector::uniform(scene.n_keypoints()),
        WeightSource::FromFile => scene.weights.clone().ok_or_else(|| {
            Error::Schema(format!("{}: no \"weights\" array", scene_path.display()))
        })?,
    };
    let res = scene.solve(&w)?;
    let file = ResultFile::new(&res, scene.t_gt.as_ref());
    write_json(out, &file)?;
    let t = res.t;
    println!("translation = [{:.9}, {:.9}, {:.9}] m", t.x, t.y, t.z);
    println!(
        "residual = {:.6e}, condition = {:.6e}, behind camera = {}",
        res.residual_norm,
        res.cond_estimate,
        res.behind_camera.iter().filter(|b| **b).count()
    );
    if let Some(err) = file.error_vs_gt {
        println!("error vs ground truth = {:.6e} mm", err * 1e3);
    }
    Ok(())
}

fn synth(
    seed: u64,
    count: usize,
    noise_px: f64,
    outliers: usize,
    out: &Path,
) -> Result<(), Failure> {
    if !(noise_px.is_finite() && noise_px >= 0.0) {
        return Err(
            Error::InvalidConfig(format!("--noise-px must be >= 0, got {noise_px}")).into(),
        );
    }
    let config = SceneConfig::default();
    let scenes = (0..count as u64)
        .map(|index| {
            let clean = gen_scene(derive_seed(seed, 2 * index), &config)?;
            let spec = PerturbSpec::new(noise_px, outliers, derive_seed(seed, 2 * index + 1));
            perturb(&clean, &spec)
        })
        .collect::<Result<Vec<_>, _>>()?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    for (index, scene) in scenes.iter().enumerate() {
        write_scene(&out.join(format!("scene_{seed}_{index}.json")), scene)?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn gradcheck(
    scene: Option<&Path>,
    random: Option<usize>,
    seed: u64,
    eps: f64,
    tol: f64,
) -> Result<(), Failure> {
    let (mut worst, mut worst_abs): (f64, f64) = (0.0, 0.0);
    let mut checked = 0;
    if let Some(path) = scene {
        let s = read_scene(path)?;
        let w = s.weights_or_uniform();
        let g = Translation3::new(1.0, 1.0, 1.0).normalize();
        let c = gradient_check(&s, &w, &g, eps)?;
        (worst, worst_abs) = (c.max_rel_error, c.max_abs_error);
        checked = 1;
    }
    if let Some(n) = random {
        for i in 0..n as u64 {
            let (s, w, g) = random_gradcheck_case(derive_seed(seed, i))?;
            let c = gradient_check(&s, &w, &g, eps)?;
            worst = worst.max(c.max_rel_error);
            worst_abs = worst_abs.max(c.max_abs_error);
        }
        checked = n;
    }
    println!(
        "max relative error {worst:.3e} (absolute floor 1e-8), max absolute error {worst_abs:.3e}, \
         over {checked} scenes (tol {tol:.1e})"
    );
    if worst < tol {
        Ok(())
    } else {
        Err(Failure::Check(format!("{worst:.3e} >= {tol:.1e}")))
    }
}
