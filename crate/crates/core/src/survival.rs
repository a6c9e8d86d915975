//! Discrete-time survival quantities over hourly steps `t = 1..t_max`.
//!
//! Index `k` of every curve vector holds time `t = k + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step hazards `h(t)`, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardCurve(Vec<f64>);

/// Survival probabilities `S(t)`, in `[0, 1]` and non-increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve(Vec<f64>);

impl HazardCurve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|h| !(0.0..=1.0).contains(*h)) {
            return Err(Error::Data(format!("hazard {bad} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn t_max(&self) -> usize {
        self.0.len()
    }
}

impl SurvivalCurve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Data(format!("survival probability {bad} outside [0, 1]")));
        }
        if values.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Data("survival curve increases".into()));
        }
        Ok(Self(values))
    }

    /// Builds the curve `∏_{τ≤t} q(τ)` from per-step survival probabilities
    /// `q = 1 − h`, as predicted by a hazard model.
    pub fn from_complements(q: &[f64]) -> Result<Self> {
        let h = q.iter().map(|q| 1.0 - q).collect();
        Ok(survival_from_hazard(&HazardCurve::new(h)?))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn t_max(&self) -> usize {
        self.0.len()
    }

    /// `S(t)` for 1-based `t`; `S(0) = 1`.
    pub fn at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.0[t - 1]
        }
    }

    /// Sum of `S(1..=tau)`.
    pub fn restricted_mean(&self, tau: usize) -> Result<f64> {
        check_tau(tau, self.t_max())?;
        Ok(self.0[..tau].iter().sum())
    }
}

fn check_tau(tau: usize, t_max: usize) -> Result<()> {
    if tau == 0 || tau > t_max {
        return Err(Error::Data(format!("cutoff tau={tau} outside 1..={t_max}")));
    }
    Ok(())
}

/// `S(t) = ∏_{τ=1..t} (1 − h(τ))`.
pub fn survival_from_hazard(h: &HazardCurve) -> SurvivalCurve {
    let mut s = 1.0;
    let values = h
        .values()
        .iter()
        .map(|h| {
            s *= 1.0 - h;
            s
        })
        .collect();
    SurvivalCurve(values)
}

/// `E[T] = Σ_{t=1..t_max} S(t)`.
pub fn expected_survival_time(s: &SurvivalCurve) -> f64 {
    s.values().iter().sum()
}

/// Restricted mean survival time at `tau`: cohort mean of `Σ_{t≤τ} S_i(t)`.
pub fn rmst(curves: &[SurvivalCurve], tau: usize) -> Result<f64> {
    if curves.is_empty() {
        return Err(Error::Data("rmst of an empty cohort".into()));
    }
    let mut total = 0.0;
    for c in curves {
        total += c.restricted_mean(tau)?;
    }
    Ok(total / curves.len() as f64)
}

/// Per-patient error: absolute error for events, shortfall below the
/// censoring time for censored patients.
pub fn censored_error(predicted: f64, observed: f64, event: bool) -> f64 {
    if event {
        (observed - predicted).abs()
    } else {
        (observed - predicted).max(0.0)
    }
}

/// Censoring-aware mean absolute error over a cohort.
pub fn censored_mae(predicted: &[f64], observed: &[f64], events: &[bool]) -> Result<f64> {
    if predicted.len() != observed.len() || predicted.len() != events.len() {
        return Err(Error::Shape {
            op: "censored_mae",
            lhs: vec![predicted.len()],
            rhs: vec![observed.len(), events.len()],
        });
    }
    if predicted.is_empty() {
        return Err(Error::Data("censored_mae of an empty cohort".into()));
    }
    let total: f64 = predicted
        .iter()
        .zip(observed)
        .zip(events)
        .map(|((&p, &o), &e)| censored_error(p, o, e))
        .sum();
    Ok(total / predicted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_hazard_means_certain_survival() {
        let s = survival_from_hazard(&HazardCurve::new(vec![0.0; 16]).unwrap());
        assert!(s.values().iter().all(|&v| v == 1.0));
        assert_eq!(expected_survival_time(&s), 16.0);
    }

    #[test]
    fn half_hazard() {
        let s = survival_from_hazard(&HazardCurve::new(vec![0.5; 4]).unwrap());
        assert_eq!(s.at(2), 0.25);
        assert_eq!(expected_survival_time(&s), 0.9375);
        let zero = SurvivalCurve::new(vec![0.0; 5]).unwrap();
        assert_eq!(expected_survival_time(&zero), 0.0);
    }

    #[test]
    fn rmst_examples() {
        let ones = vec![SurvivalCurve::new(vec![1.0; 16]).unwrap(); 3];
        assert_eq!(rmst(&ones, 8).unwrap(), 8.0);
        let a = SurvivalCurve::new(vec![0.9, 0.8, 0.5]).unwrap();
        let b = SurvivalCurve::new(vec![0.6, 0.3, 0.3]).unwrap();
        assert_eq!(rmst(std::slice::from_ref(&a), 3).unwrap(), expected_survival_time(&a));
        // (0.9 + 0.8 + 0.6 + 0.3) / 2
        assert!((rmst(&[a.clone(), b.clone()], 2).unwrap() - 1.3).abs() < 1e-15);
        assert!(rmst(std::slice::from_ref(&a), 0).is_err());
        assert!(rmst(&[a], 4).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(censored_mae(&[7.0], &[10.0], &[true]).unwrap(), 3.0);
        assert_eq!(censored_mae(&[12.0], &[10.0], &[false]).unwrap(), 0.0);
        assert_eq!(censored_mae(&[6.0], &[10.0], &[false]).unwrap(), 4.0);
        assert!(censored_mae(&[1.0], &[1.0, 2.0], &[true]).is_err());
    }

    #[test]
    fn rejects_invalid_curves() {
        assert!(HazardCurve::new(vec![0.1, 1.2]).is_err());
        assert!(SurvivalCurve::new(vec![0.5, 0.7]).is_err());
    }

    proptest! {
        #[test]
        fn survival_is_non_increasing(h in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let s = survival_from_hazard(&HazardCurve::new(h).unwrap());
            prop_assert!(s.values().windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(s.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn rmst_monotone_and_bounded(h in prop::collection::vec(0.0f64..=1.0, 2..30)) {
            let s = survival_from_hazard(&HazardCurve::new(h).unwrap());
            let mut prev = 0.0;
            for tau in 1..=s.t_max() {
                let r = rmst(std::slice::from_ref(&s), tau).unwrap();
                prop_assert!(r >= prev);
                prop_assert!(r <= tau as f64);
                prev = r;
            }
        }

        #[test]
        fn mae_nonnegative_and_zero_iff_exact(
            rows in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0, any::<bool>()), 1..20)
        ) {
            let p: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let o: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let e: Vec<bool> = rows.iter().map(|r| r.2).collect();
            let mae = censored_mae(&p, &o, &e).unwrap();
            prop_assert!(mae >= 0.0);
            let exact = rows.iter().all(|&(p, o, e)| if e { p == o } else { p >= o });
            prop_assert_eq!(mae == 0.0, exact);
        }
    }
}
