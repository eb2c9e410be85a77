//! Classification by nearest class embedding, calibrated stacking and GZSL
//! metrics.

pub mod gzsl;
pub mod metrics;

pub use gzsl::{
    build_task, calibration_grid, default_grid, embed_class_table, embed_samples, evaluate_gzsl,
    pairwise_distances, search_calibration, DistanceTable, EvalReport, GzslTask, GAMMA_MAX,
    GAMMA_STEP,
};
pub use metrics::{harmonic_mean, mean_class_accuracy, per_class_accuracy};
