use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How negative vitals enter the log hazard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VitalClip {
    /// `min(v², clip)`: quadratic contribution capped at `clip`.
    Cap,
    /// `max(v², clip)`: the formula read literally, with a floor of `clip`.
    Floor,
}

/// Every constant of the data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_patients: usize,
    pub t_max: usize,
    pub seed: u64,
    /// Baseline hazard scale `H0`.
    pub h0: f64,
    /// Baseline decay rate `λ`.
    pub lambda: f64,
    /// Log hazard ratio of treatment `θ`.
    pub theta: f64,
    /// Static coefficients are drawn from `Uniform(beta_range)`.
    pub beta_range: (f64, f64),
    /// Vital coefficients are drawn from `Uniform(gamma_range)`.
    pub gamma_range: (f64, f64),
    /// Per-step log hazard growth for severely ill patients.
    pub interaction_rate: f64,
    /// Standard deviation of the Gaussian noise added to logit `S(t)`.
    pub noise_sigma: f64,
    /// Hazards are clamped into `[lower, upper]`.
    pub hazard_bounds: (f64, f64),
    /// Propensity when severely ill, and otherwise.
    pub propensity_levels: (f64, f64),
    pub vital_clip: f64,
    pub vital_clip_mode: VitalClip,
    pub male_prevalence: f64,
    /// Prevalence of hypertension, coronary atherosclerosis, atrial fibrillation.
    pub diagnosis_prevalence: [f64; 3],
    /// Latent (tetrachoric-style) correlation among the three diagnoses.
    pub diagnosis_correlation: f64,
    /// AR(1) coefficient of every vital series.
    pub vital_autocorrelation: f64,
    /// Loading of the latent severity on the vitals (sicker ⇒ lower vitals).
    pub vital_severity_loading: f64,
    /// Cutoffs at which the oracle records counterfactual RMSTs.
    pub taus: Vec<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_patients: 5000,
            t_max: 128,
            seed: 0,
            h0: 0.001,
            lambda: 0.25,
            theta: -0.5,
            beta_range: (0.7, 1.2),
            gamma_range: (0.1, 0.3),
            interaction_rate: 1.02f64.ln(),
            noise_sigma: 0.5,
            hazard_bounds: (1e-7, 0.1),
            propensity_levels: (0.8, 0.2),
            vital_clip: 3.0,
            vital_clip_mode: VitalClip::Cap,
            male_prevalence: 0.5,
            diagnosis_prevalence: [0.3; 3],
            diagnosis_correlation: 0.3,
            vital_autocorrelation: 0.9,
            vital_severity_loading: 0.5,
            taus: vec![8, 12, 16],
        }
    }
}

fn probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if self.h0 <= 0.0 {
            return Err(Error::Config(format!("h0 = {} must be positive", self.h0)));
        }
        let (lo, hi) = self.hazard_bounds;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("hazard bounds ({lo}, {hi}) must satisfy 0 < lo <= hi < 1")));
        }
        let (p1, p0) = self.propensity_levels;
        for p in [p1, p0] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("propensity level {p} violates positivity")));
            }
        }
        if self.beta_range.0 > self.beta_range.1 || self.gamma_range.0 > self.gamma_range.1 {
            return Err(Error::Config("coefficient ranges must be ordered".into()));
        }
        if self.noise_sigma < 0.0 || self.vital_clip < 0.0 {
            return Err(Error::Config("noise_sigma and vital_clip must be non-negative".into()));
        }
        probability("male_prevalence", self.male_prevalence)?;
        for p in self.diagnosis_prevalence {
            probability("diagnosis_prevalence", p)?;
        }
        if !(0.0..1.0).contains(&self.diagnosis_correlation) {
            return Err(Error::Config("diagnosis_correlation must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.vital_autocorrelation.abs()) {
            return Err(Error::Config("vital_autocorrelation must lie in (-1, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.vital_severity_loading.abs()) {
            return Err(Error::Config("vital_severity_loading must lie in (-1, 1)".into()));
        }
        if let Some(tau) = self.taus.iter().find(|&&tau| tau == 0 || tau > self.t_max) {
            return Err(Error::Config(format!("tau {tau} outside 1..={}", self.t_max)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.h0, 0.001);
        assert_eq!(cfg.theta, -0.5);
        assert!((cfg.interaction_rate.exp() - 1.02).abs() < 1e-15);
    }

    #[test]
    fn positivity_is_enforced() {
        let cfg = SimConfig {
            propensity_levels: (1.0, 0.2),
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SimConfig {
            hazard_bounds: (0.2, 0.1),
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_json_uses_defaults() {
        let cfg: SimConfig = serde_json::from_str(r#"{"n_patients": 10, "theta": 0.0}"#).unwrap();
        assert_eq!(cfg.n_patients, 10);
        assert_eq!(cfg.theta, 0.0);
        assert_eq!(cfg.t_max, 128);
    }
}
