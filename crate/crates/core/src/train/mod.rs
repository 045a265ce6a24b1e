//! A linear stand-in for a keypoint network, trained through the root solve.
//!
//! The model maps corrupted 2D and 3D keypoint observations to 2D keypoints,
//! root-relative vertices and per-keypoint confidences. The root translation
//! comes from the weighted solve, and camera-space losses either
//! backpropagate through it (end-to-end) or stop at it (detached).

pub mod data;
pub mod model;
pub mod pipeline;
pub mod run;

pub use data::{make_dataset, DataConfig, Dataset, HandTemplate, ToySample};
pub use model::{featurize, init_model, ModelDims, Prediction, ToyModel};
pub use pipeline::{
    batch_gradient, evaluate, forward, step, EvalMetrics, LossTerms, LossWeights, Mode,
};
pub use run::{
    compare_modes, compare_reports, run_trends, train, train_on, EpochRecord, ModeComparison,
    TrainConfig, TrainOutcome, TrainReport, TrendReport,
};
