//! Confounded semi-synthetic survival cohorts with a noiseless ground-truth
//! oracle.

mod config;
mod covariates;
mod dataset;
mod hazard;
mod trajectory;

pub use config::{SimConfig, VitalClip};
pub use covariates::{sample_covariates, Covariates};
pub use dataset::{
    assign_treatment, generate_dataset, hazard_path, patient_rng, propensity, read_cohort, read_jsonl, true_ate,
    write_jsonl, Cohort, OracleRecord, PatientRecord, SimSummary, Simulation,
};
pub use hazard::{hazard, raw_hazard, vital_effect, Coefficients};
pub use trajectory::{sample_trajectory, Trajectory};
