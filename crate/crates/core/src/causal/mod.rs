//! Average treatment effect on restricted mean survival time: unadjusted
//! difference, outcome regression, inverse propensity weighting and
//! augmented IPW.

mod estimators;
mod propensity;

use serde::{Deserialize, Serialize};

pub use estimators::{
    aipw_estimate, imputed_outcome, ipw_estimate, ipw_weight_sums, observed_outcome, or_estimate,
    unadjusted_difference, Counterfactuals, OracleOutcome, OutcomeModel, PROPENSITY_CLIP,
};
pub use propensity::{fit_propensity, PropensityFit, PropensityModel, PropensitySpec};

use crate::error::{Error, Result};
use crate::simulator::{Cohort, OracleRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Unadjusted,
    #[serde(rename = "or")]
    OutcomeRegression,
    Ipw,
    Aipw,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Unadjusted, Method::OutcomeRegression, Method::Ipw, Method::Aipw];

    pub fn name(self) -> &'static str {
        match self {
            Method::Unadjusted => "unadjusted",
            Method::OutcomeRegression => "or",
            Method::Ipw => "ipw",
            Method::Aipw => "aipw",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator {s}")))
    }
}

/// One estimate, with its error against the oracle when one is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub method: String,
    pub tau: usize,
    pub estimate: f64,
    pub true_ate: Option<f64>,
    pub bias: Option<f64>,
    /// Standard deviation of `estimate` across replicates, when aggregated.
    pub replicate_sd: Option<f64>,
}

impl AteReport {
    pub fn new(method: impl Into<String>, tau: usize, estimate: f64, true_ate: Option<f64>) -> Self {
        Self {
            method: method.into(),
            tau,
            estimate,
            true_ate,
            bias: true_ate.map(|t| estimate - t),
            replicate_sd: None,
        }
    }
}

/// Where the restricted outcome `Y` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeDefinition {
    /// `min(O, τ)`.
    #[default]
    Observed,
    /// Censored shortfalls filled in from the outcome model's factual curve.
    Imputed,
}

/// Inputs shared by every estimator.
pub struct EstimationInputs<'a> {
    pub cohort: &'a Cohort,
    pub taus: &'a [usize],
    pub outcome_model: Option<&'a dyn OutcomeModel>,
    /// Appended to the names of model-based methods, e.g. `or_dynst`.
    pub outcome_label: Option<&'a str>,
    /// Needed for [`OutcomeDefinition::Imputed`].
    pub factual_curves: Option<&'a [Vec<f64>]>,
    pub propensity: Option<&'a [f64]>,
    pub oracle: Option<&'a [OracleRecord]>,
    pub outcome: OutcomeDefinition,
    pub clip: f64,
}

/// Runs `methods` at every cutoff; reports come out ordered by cutoff, then
/// by the order of `methods`.
pub fn estimate_ate(inputs: &EstimationInputs<'_>, methods: &[Method]) -> Result<Vec<AteReport>> {
    let cohort = inputs.cohort;
    let treated = cohort.treatments();
    let needs_outcome = methods
        .iter()
        .any(|m| matches!(m, Method::OutcomeRegression | Method::Aipw));
    let needs_propensity = methods.iter().any(|m| matches!(m, Method::Ipw | Method::Aipw));
    let counterfactuals = match (needs_outcome, inputs.outcome_model) {
        (true, Some(m)) => Some(m.counterfactual_rmst(cohort, inputs.taus)?),
        (true, None) => return Err(Error::Config("outcome regression and AIPW need an outcome model".into())),
        (false, _) => None,
    };
    let propensity = match (needs_propensity, inputs.propensity) {
        (true, Some(p)) => Some(p),
        (true, None) => return Err(Error::Config("IPW and AIPW need propensity scores".into())),
        (false, _) => None,
    };
    let oracle = inputs.oracle.map(OracleOutcome::new);
    let truths = match &oracle {
        Some(o) => Some(o.counterfactual_rmst(cohort, inputs.taus)?),
        None => None,
    };
    let mut reports = Vec::new();
    for &tau in inputs.taus {
        if tau == 0 || tau > cohort.t_max {
            return Err(Error::Config(format!("tau {tau} outside 1..={}", cohort.t_max)));
        }
        let y = match (inputs.outcome, inputs.factual_curves) {
            (OutcomeDefinition::Observed, _) => observed_outcome(cohort, tau),
            (OutcomeDefinition::Imputed, Some(curves)) => imputed_outcome(cohort, curves, tau)?,
            (OutcomeDefinition::Imputed, None) => {
                return Err(Error::Config("imputed outcomes need factual survival curves".into()))
            }
        };
        let truth = match (&truths, inputs.oracle) {
            (Some(t), Some(_)) => {
                let (m1, m0) = t.at(tau)?;
                Some(or_estimate(m1, m0)?)
            }
            _ => None,
        };
        for &method in methods {
            let estimate = match method {
                Method::Unadjusted => unadjusted_difference(&treated, &y)?,
                Method::Ipw => ipw_estimate(&treated, &y, propensity.unwrap_or_default(), inputs.clip)?,
                Method::OutcomeRegression => {
                    let (m1, m0) = counterfactuals.as_ref().map_or(Ok((&[][..], &[][..])), |c| c.at(tau))?;
                    or_estimate(m1, m0)?
                }
                Method::Aipw => {
                    let (m1, m0) = counterfactuals.as_ref().map_or(Ok((&[][..], &[][..])), |c| c.at(tau))?;
                    aipw_estimate(&treated, &y, m1, m0, propensity.unwrap_or_default(), inputs.clip)?
                }
            };
            let name = match (method, inputs.outcome_label) {
                (Method::OutcomeRegression | Method::Aipw, Some(label)) => format!("{}_{label}", method.name()),
                _ => method.name().to_string(),
            };
            reports.push(AteReport::new(name, tau, estimate, truth));
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind, SurvivalModel};
    use crate::simulator::{generate_dataset, true_ate, SimConfig};

    fn sim(n: usize, seed: u64) -> crate::simulator::Simulation {
        generate_dataset(&SimConfig {
            n_patients: n,
            t_max: 16,
            seed,
            ..SimConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn oracle_outcome_regression_recovers_truth() {
        let s = sim(500, 2);
        let oracle = OracleOutcome::new(&s.oracle);
        let inputs = EstimationInputs {
            cohort: &s.cohort,
            taus: &[8, 12, 16],
            outcome_model: Some(&oracle),
            outcome_label: None,
            factual_curves: None,
            propensity: None,
            oracle: Some(&s.oracle),
            outcome: OutcomeDefinition::Observed,
            clip: PROPENSITY_CLIP,
        };
        for r in estimate_ate(&inputs, &[Method::OutcomeRegression]).unwrap() {
            assert!(r.bias.unwrap().abs() < 1e-12);
            assert!((r.estimate - true_ate(&s.oracle, r.tau).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn outcome_model_blind_to_treatment_gives_zero() {
        let s = sim(50, 4);
        let cfg = ModelConfig::new(8, 1, 16, 6, 4);
        let mut model = SurvivalModel::build(ModelKind::Linear, cfg, 1).unwrap();
        let w = model.params().find("linear.w").unwrap();
        model.params_mut().get_mut(w).data_mut()[5] = 0.0;
        let cf = model.counterfactual_rmst(&s.cohort, &[12]).unwrap();
        let (m1, m0) = cf.at(12).unwrap();
        assert_eq!(or_estimate(m1, m0).unwrap(), 0.0);
    }

    #[test]
    fn missing_nuisance_is_a_config_error() {
        let s = sim(40, 1);
        let inputs = EstimationInputs {
            cohort: &s.cohort,
            taus: &[8],
            outcome_model: None,
            outcome_label: None,
            factual_curves: None,
            propensity: None,
            oracle: None,
            outcome: OutcomeDefinition::Observed,
            clip: PROPENSITY_CLIP,
        };
        assert!(estimate_ate(&inputs, &[Method::Aipw]).is_err());
        let r = estimate_ate(&inputs, &[Method::Unadjusted]).unwrap();
        assert_eq!(r[0].bias, None);
    }

    #[test]
    fn imputation_leaves_uncensored_windows_alone() {
        let s = sim(100, 3);
        let curves = vec![vec![0.5; 16]; 100];
        let y = imputed_outcome(&s.cohort, &curves, 8).unwrap();
        assert_eq!(y, observed_outcome(&s.cohort, 8));
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
