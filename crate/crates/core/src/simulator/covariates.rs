//! Synthetic stand-ins for ICU covariates.
//!
//! A latent standard-normal severity drives both the three diagnoses
//! (through a Gaussian copula) and the vitals (through a negative mean
//! shift), so the vitals correlate with treatment without entering the
//! assignment mechanism.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use super::config::SimConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub male: bool,
    /// Hypertension, coronary atherosclerosis, atrial fibrillation.
    pub diagnoses: [bool; 3],
    /// Latent severity (not model-visible).
    pub severity: f64,
    /// `t_max` rows of standardized hematocrit, hemoglobin, platelets,
    /// mean blood pressure.
    pub vitals: Vec<[f64; 4]>,
}

impl Covariates {
    /// Male plus the three diagnoses, in outcome-coefficient order.
    pub fn statics(&self) -> [bool; 4] {
        [self.male, self.diagnoses[0], self.diagnoses[1], self.diagnoses[2]]
    }

    /// Severely ill: two or more of the three diagnoses.
    pub fn severe(&self) -> bool {
        self.diagnoses.iter().filter(|&&d| d).count() >= 2
    }
}

fn threshold(prevalence: f64) -> f64 {
    if prevalence <= 0.0 {
        f64::INFINITY
    } else if prevalence >= 1.0 {
        f64::NEG_INFINITY
    } else {
        Normal::standard().inverse_cdf(1.0 - prevalence)
    }
}

pub fn sample_covariates(config: &SimConfig, rng: &mut impl Rng) -> Covariates {
    let severity: f64 = rng.sample(StandardNormal);
    let male = rng.random::<f64>() < config.male_prevalence;
    let rho = config.diagnosis_correlation;
    let diagnoses = std::array::from_fn(|j| {
        let noise: f64 = rng.sample(StandardNormal);
        let latent = rho.sqrt() * severity + (1.0 - rho).sqrt() * noise;
        latent > threshold(config.diagnosis_prevalence[j])
    });
    let phi = config.vital_autocorrelation;
    let innovation = (1.0 - phi * phi).sqrt();
    let kappa = config.vital_severity_loading;
    let idio = (1.0 - kappa * kappa).sqrt();
    let mut state: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let mut vitals = Vec::with_capacity(config.t_max);
    for t in 0..config.t_max {
        if t > 0 {
            for s in state.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *s = phi * *s + innovation * e;
            }
        }
        vitals.push(std::array::from_fn(|j| -kappa * severity + idio * state[j]));
    }
    Covariates {
        male,
        diagnoses,
        severity,
        vitals,
    }
}
