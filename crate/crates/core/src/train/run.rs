//! Training runs, reports and paired-mode comparisons.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{make_dataset, DataConfig, Dataset};
use super::model::{init_model, ModelDims, ToyModel};
use super::pipeline::{evaluate, step, EvalMetrics, LossWeights, Mode};
use crate::error::{Error, Result};
use crate::synth::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub rectified: bool,
    pub epochs: usize,
    /// Leading epochs trained on relative-space terms only, in either mode.
    pub warmup_epochs: usize,
    /// Gradient-descent step size.
    pub lr: f64,
    /// Per-sample bound on the norm of the camera-space output gradient.
    pub camera_grad_clip: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub lambdas: LossWeights,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::E2e,
            rectified: true,
            epochs: 300,
            warmup_epochs: 20,
            lr: 0.003,
            camera_grad_clip: 1.0,
            batch_size: 20,
            seed: 7,
            n_train: 200,
            n_test: 100,
            lambdas: LossWeights::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.camera_grad_clip > 0.0) {
            return Err(Error::InvalidConfig(
                "camera gradient clip must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "invalid step size {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig(
                "batch size and split sizes must be positive".into(),
            ));
        }
        self.lambdas.validate()?;
        self.data.validate()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_keypoints: self.data.n_keypoints,
            n_vertices: self.data.n_vertices,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the training split, measured before each update.
    pub train_loss: f64,
    pub skipped_train: usize,
    pub held_out: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub tool_version: String,
    pub config: TrainConfig,
    /// Held-out metrics of the untrained model.
    pub baseline: EvalMetrics,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: EvalMetrics,
}

impl TrainReport {
    pub fn csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.17e}")).unwrap_or_default();
        let mut out = String::from(
            "epoch,train_loss,skipped_train,cs_mje_mm,rs_mje_mm,mean_inlier_weight,mean_outlier_weight,skipped_test\n",
        );
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.17e},{},{:.17e},{:.17e},{},{},{}\n",
                r.epoch,
                r.train_loss,
                r.skipped_train,
                r.held_out.cs_mje_mm,
                r.held_out.rs_mje_mm,
                opt(r.held_out.mean_inlier_weight),
                opt(r.held_out.mean_outlier_weight),
                r.held_out.skipped,
            ));
        }
        out
    }
}

/// The trained model together with its report.
pub struct TrainOutcome {
    pub model: ToyModel,
    pub report: TrainReport,
}

pub fn train_on(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let jreg = &data.template.jreg;
    let mut model = init_model(derive_seed(config.seed, 100), config.dims())?;
    let baseline = evaluate(&model, &data.test, jreg)?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = rng_from_seed(derive_seed(derive_seed(config.seed, 200), epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss, mut skipped) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &data.train[i]).collect();
            let mode = if epoch < config.warmup_epochs {
                Mode::Detached
            } else {
                config.mode
            };
            let (next, stats) = step(
                &model,
                &batch,
                jreg,
                &config.lambdas,
                mode,
                config.lr,
                config.camera_grad_clip,
            )?;
            model = next;
            loss += stats.loss_sum;
            skipped += stats.skipped;
        }
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss / data.train.len() as f64,
            skipped_train: skipped,
            held_out: evaluate(&model, &data.test, jreg)?,
        });
    }
    let final_metrics = epochs.last().expect("at least one epoch").held_out;
    Ok(TrainOutcome {
        model,
        report: TrainReport {
            tool_version: crate::VERSION.to_string(),
            config: config.clone(),
            baseline,
            epochs,
            final_metrics,
        },
    })
}

/// Generates the splits from `config.seed` and trains on them.
pub fn train(config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let data = make_dataset(
        config.seed,
        config.n_train,
        config.n_test,
        &config.data,
        config.rectified,
    )?;
    Ok(train_on(config, &data)?.report)
}

fn opt_delta(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(b? - a?)
}

/// Final metrics of two runs and their differences (second minus first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub first: TrainConfig,
    pub second: TrainConfig,
    pub first_metrics: EvalMetrics,
    pub second_metrics: EvalMetrics,
    pub delta_cs_mje_mm: f64,
    pub delta_rs_mje_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_inlier_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_outlier_weight: Option<f64>,
}

pub fn compare_reports(a: &TrainReport, b: &TrainReport) -> ModeComparison {
    let (ma, mb) = (a.final_metrics, b.final_metrics);
    ModeComparison {
        first: a.config.clone(),
        second: b.config.clone(),
        first_metrics: ma,
        second_metrics: mb,
        delta_cs_mje_mm: mb.cs_mje_mm - ma.cs_mje_mm,
        delta_rs_mje_mm: mb.rs_mje_mm - ma.rs_mje_mm,
        delta_inlier_weight: opt_delta(ma.mean_inlier_weight, mb.mean_inlier_weight),
        delta_outlier_weight: opt_delta(ma.mean_outlier_weight, mb.mean_outlier_weight),
    }
}

pub fn compare_modes(pair: (&TrainConfig, &TrainConfig)) -> Result<ModeComparison> {
    Ok(compare_reports(&train(pair.0)?, &train(pair.1)?))
}

/// The three ablation directions checked from one base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    /// End-to-end (first) against detached (second), both rectified.
    pub end_to_end: ModeComparison,
    /// Unrectified (first) against rectified (second), both end-to-end.
    pub rectification: ModeComparison,
    pub e2e_beats_detached: bool,
    pub rectified_beats_unrectified: bool,
    pub outliers_downweighted: bool,
}

pub fn run_trends(base: &TrainConfig) -> Result<TrendReport> {
    let e2e = TrainConfig {
        mode: Mode::E2e,
        rectified: true,
        ..base.clone()
    };
    let detached = TrainConfig {
        mode: Mode::Detached,
        ..e2e.clone()
    };
    let unrectified = TrainConfig {
        rectified: false,
        ..e2e.clone()
    };
    let e2e_report = train(&e2e)?;
    let end_to_end = compare_reports(&e2e_report, &train(&detached)?);
    let rectification = compare_reports(&train(&unrectified)?, &e2e_report);
    let m = e2e_report.final_metrics;
    let outliers_downweighted = matches!(
        (m.mean_outlier_weight, m.mean_inlier_weight),
        (Some(o), Some(i)) if o < i
    );
    Ok(TrendReport {
        e2e_beats_detached: end_to_end.delta_cs_mje_mm > 0.0,
        rectified_beats_unrectified: rectification.delta_cs_mje_mm < 0.0,
        outliers_downweighted,
        end_to_end,
        rectification,
    })
}
