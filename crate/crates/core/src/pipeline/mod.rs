//! Training, model selection and the experiment drivers.

mod checks;
mod curves;
mod experiment;
mod grid;
mod split;
mod train;

pub use checks::{
    causality_check, gradient_error, loss_gradcheck, primitive_gradcheck, survival_math_check, CheckResult,
    CAUSALITY_TOLERANCE, END_TO_END_TOLERANCE, ORACLE_TOLERANCE, PRIMITIVE_TOLERANCE,
};
pub use curves::emit_curves;
pub use experiment::{
    replicate_seed, run_causal_experiment, run_prediction_experiment, AteSummary, ExperimentConfig,
    ExperimentReport, MaeSummary, ModelResult, ReplicateReport, RuntimeInfo,
};
pub use grid::{grid_search, CellResult, GridCell, GridConfig, GridOutcome};
pub use split::{split, SealedIndices, Split};
pub use train::{evaluate_mae, predicted_times, train, EpochRecord, TrainConfig, TrainOutcome};
