use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{SimConfig, VitalClip};

/// Randomly drawn outcome coefficients, shared by the whole cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    /// Static effects: male, hypertension, coronary atherosclerosis, atrial fibrillation.
    pub beta: [f64; 4],
    /// Vital effects: hematocrit, hemoglobin, platelets, mean blood pressure.
    pub gamma: [f64; 4],
}

impl Coefficients {
    pub fn draw(config: &SimConfig, rng: &mut impl Rng) -> Self {
        let mut uniform = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };
        let beta = std::array::from_fn(|_| uniform(config.beta_range));
        let gamma = std::array::from_fn(|_| uniform(config.gamma_range));
        Self { beta, gamma }
    }
}

/// Log-hazard contribution of one standardized vital: zero at or above the
/// mean, quadratic below it, clipped at `clip`.
pub fn vital_effect(v: f64, clip: f64, mode: VitalClip) -> f64 {
    if v >= 0.0 {
        0.0
    } else {
        match mode {
            VitalClip::Cap => (v * v).min(clip),
            VitalClip::Floor => (v * v).max(clip),
        }
    }
}

/// Hazard at step `t` before clamping:
/// `H0·e^{−λt} · e^{θA} · e^{Σβ_j Z_j} · e^{rate·t·Z*} · e^{Σγ_j g(V_j(t))}`.
pub fn raw_hazard(
    t: usize,
    treated: bool,
    statics: &[bool; 4],
    severe: bool,
    vitals: &[f64; 4],
    coeffs: &Coefficients,
    config: &SimConfig,
) -> f64 {
    let t = t as f64;
    let baseline = config.h0 * (-config.lambda * t).exp();
    let treatment = if treated { config.theta.exp() } else { 1.0 };
    let static_lp: f64 = statics
        .iter()
        .zip(&coeffs.beta)
        .map(|(&z, b)| if z { *b } else { 0.0 })
        .sum();
    let interaction = if severe { (config.interaction_rate * t).exp() } else { 1.0 };
    let vital_lp: f64 = vitals
        .iter()
        .zip(&coeffs.gamma)
        .map(|(&v, g)| g * vital_effect(v, config.vital_clip, config.vital_clip_mode))
        .sum();
    baseline * treatment * static_lp.exp() * interaction * vital_lp.exp()
}

/// [`raw_hazard`] clamped into the configured bounds.
pub fn hazard(
    t: usize,
    treated: bool,
    statics: &[bool; 4],
    severe: bool,
    vitals: &[f64; 4],
    coeffs: &Coefficients,
    config: &SimConfig,
) -> f64 {
    let (lo, hi) = config.hazard_bounds;
    raw_hazard(t, treated, statics, severe, vitals, coeffs, config).clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coeffs() -> Coefficients {
        Coefficients {
            beta: [0.8, 0.9, 1.0, 1.1],
            gamma: [0.1, 0.2, 0.25, 0.3],
        }
    }

    #[test]
    fn vital_effect_branches() {
        assert_eq!(vital_effect(0.7, 3.0, VitalClip::Cap), 0.0);
        assert_eq!(vital_effect(-1.0, 3.0, VitalClip::Cap), 1.0);
        assert_eq!(vital_effect(-2.0, 3.0, VitalClip::Cap), 3.0);
        assert_eq!(vital_effect(-1.0, 3.0, VitalClip::Floor), 3.0);
        assert_eq!(vital_effect(-2.0, 3.0, VitalClip::Floor), 4.0);
    }

    #[test]
    fn baseline_at_time_zero() {
        let cfg = SimConfig::default();
        let h = hazard(0, false, &[false; 4], false, &[0.5; 4], &coeffs(), &cfg);
        assert_eq!(h, 0.001);
    }

    #[test]
    fn treatment_factor() {
        let cfg = SimConfig::default();
        let z = [true, false, true, false];
        let v = [0.1, -0.4, 0.3, -1.2];
        let h0 = raw_hazard(3, false, &z, false, &v, &coeffs(), &cfg);
        let h1 = raw_hazard(3, true, &z, false, &v, &coeffs(), &cfg);
        assert!((h1 / h0 - 0.6065306597126334).abs() < 1e-12);
    }

    #[test]
    fn severity_interaction_grows_two_percent_per_step() {
        let cfg = SimConfig::default();
        let z = [false, true, true, false];
        let v = [0.0; 4];
        let ratio = |t| {
            raw_hazard(t, false, &z, true, &v, &coeffs(), &cfg) / raw_hazard(t, false, &z, false, &v, &coeffs(), &cfg)
        };
        assert!((ratio(10) - 1.02f64.powi(10)).abs() < 1e-12);
        assert!((ratio(10) - 1.2190).abs() < 1e-4);
        for t in 1..20 {
            assert!((ratio(t + 1) / ratio(t) - 1.02).abs() < 1e-12);
        }
    }

    #[test]
    fn clamping_keeps_hazards_in_bounds() {
        let cfg = SimConfig::default();
        let h = hazard(1, false, &[true; 4], true, &[-5.0; 4], &coeffs(), &cfg);
        assert_eq!(h, 0.1);
        let h = hazard(120, true, &[false; 4], false, &[1.0; 4], &coeffs(), &cfg);
        assert_eq!(h, 1e-7);
    }
}
