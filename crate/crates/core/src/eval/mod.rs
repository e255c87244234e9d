//! Detection metrics, 2-D projection of memory outputs, and the
//! train-then-evaluate runner used for ablations and sweeps.

mod metrics;
mod pca;
mod runner;

pub use metrics::{
    apcer_bpcer, eer, frame_accuracy, future_mse, video_accuracy, write_reports_csv, MetricsReport, ScoreSet,
};
pub use pca::{pca_2d, pca_project2d, Pca2d};
pub use runner::{disc_seed, evaluate, run_ablation, train_and_evaluate, AblationRow, Evaluation, TrainedModel, Variant};
