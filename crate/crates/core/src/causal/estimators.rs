use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::SurvivalModel;
use crate::simulator::{Cohort, OracleRecord};

/// Default propensity clip.
pub const PROPENSITY_CLIP: f64 = 0.01;

/// Per-patient RMST predictions under both treatments at several cutoffs.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterfactuals {
    pub taus: Vec<usize>,
    /// `m1[k][i]`: patient `i` under treatment at `taus[k]`.
    pub m1: Vec<Vec<f64>>,
    pub m0: Vec<Vec<f64>>,
}

impl Counterfactuals {
    pub fn at(&self, tau: usize) -> Result<(&[f64], &[f64])> {
        let k = self
            .taus
            .iter()
            .position(|&t| t == tau)
            .ok_or_else(|| Error::Estimation(format!("no counterfactual predictions at tau {tau}")))?;
        Ok((&self.m1[k], &self.m0[k]))
    }
}

/// Anything that predicts restricted mean survival under forced treatment.
pub trait OutcomeModel {
    fn counterfactual_rmst(&self, cohort: &Cohort, taus: &[usize]) -> Result<Counterfactuals>;
}

/// Reads the simulator's noiseless counterfactual RMSTs.
#[derive(Debug, Clone)]
pub struct OracleOutcome<'a> {
    by_id: HashMap<usize, &'a OracleRecord>,
}

impl<'a> OracleOutcome<'a> {
    pub fn new(oracle: &'a [OracleRecord]) -> Self {
        Self {
            by_id: oracle.iter().map(|r| (r.id, r)).collect(),
        }
    }
}

impl OutcomeModel for OracleOutcome<'_> {
    fn counterfactual_rmst(&self, cohort: &Cohort, taus: &[usize]) -> Result<Counterfactuals> {
        let mut m1 = vec![Vec::with_capacity(cohort.len()); taus.len()];
        let mut m0 = m1.clone();
        for r in &cohort.records {
            let o = self
                .by_id
                .get(&r.id)
                .ok_or_else(|| Error::Data(format!("oracle has no patient {}", r.id)))?;
            for (k, tau) in taus.iter().enumerate() {
                match (o.rmst1.get(tau), o.rmst0.get(tau)) {
                    (Some(&a), Some(&b)) => {
                        m1[k].push(a);
                        m0[k].push(b);
                    }
                    _ => return Err(Error::Data(format!("oracle has no RMST at tau {tau}"))),
                }
            }
        }
        Ok(Counterfactuals {
            taus: taus.to_vec(),
            m1,
            m0,
        })
    }
}

fn check_taus(taus: &[usize], t_max: usize) -> Result<()> {
    if let Some(tau) = taus.iter().find(|&&tau| tau == 0 || tau > t_max) {
        return Err(Error::Config(format!("tau {tau} outside 1..={t_max}")));
    }
    Ok(())
}

fn partial_sums(curves: &[Vec<f64>], taus: &[usize]) -> Vec<Vec<f64>> {
    taus.iter()
        .map(|&tau| curves.iter().map(|s| s[..tau].iter().sum()).collect())
        .collect()
}

impl OutcomeModel for SurvivalModel {
    fn counterfactual_rmst(&self, cohort: &Cohort, taus: &[usize]) -> Result<Counterfactuals> {
        check_taus(taus, cohort.t_max)?;
        let s1 = self.predict_survival(&cohort.all_inputs(Some(true))?)?;
        let s0 = self.predict_survival(&cohort.all_inputs(Some(false))?)?;
        Ok(Counterfactuals {
            taus: taus.to_vec(),
            m1: partial_sums(&s1, taus),
            m0: partial_sums(&s0, taus),
        })
    }
}

/// Observed restricted outcome `Y = min(O, τ)`.
pub fn observed_outcome(cohort: &Cohort, tau: usize) -> Vec<f64> {
    cohort.records.iter().map(|r| r.o.min(tau) as f64).collect()
}

/// `Y` with the part of `[O, τ]` lost to censoring filled in from a
/// predicted factual survival curve: `O + Σ_{O<t≤τ} Ŝ(t)/Ŝ(O)`.
pub fn imputed_outcome(cohort: &Cohort, factual_curves: &[Vec<f64>], tau: usize) -> Result<Vec<f64>> {
    check_taus(&[tau], cohort.t_max)?;
    if factual_curves.len() != cohort.len() {
        return Err(Error::Shape {
            op: "imputed_outcome",
            lhs: vec![cohort.len()],
            rhs: vec![factual_curves.len()],
        });
    }
    Ok(cohort
        .records
        .iter()
        .zip(factual_curves)
        .map(|(r, s)| {
            if r.event() || r.o >= tau {
                return r.o.min(tau) as f64;
            }
            let base = s[r.o - 1];
            if base <= 0.0 {
                return r.o as f64;
            }
            r.o as f64 + s[r.o..tau].iter().map(|v| v / base).sum::<f64>()
        })
        .collect())
}

fn check_len(op: &'static str, n: usize, others: &[usize]) -> Result<()> {
    if let Some(&m) = others.iter().find(|&&m| m != n) {
        return Err(Error::Shape {
            op,
            lhs: vec![n],
            rhs: vec![m],
        });
    }
    if n == 0 {
        return Err(Error::Estimation(format!("{op}: empty cohort")));
    }
    Ok(())
}

fn clipped(p: f64, clip: f64) -> f64 {
    p.clamp(clip, 1.0 - clip)
}

/// Mean outcome among the treated minus mean among controls.
pub fn unadjusted_difference(treated: &[bool], y: &[f64]) -> Result<f64> {
    check_len("unadjusted", treated.len(), &[y.len()])?;
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (&a, &y) in treated.iter().zip(y) {
        if a {
            s1 += y;
            n1 += 1;
        } else {
            s0 += y;
            n0 += 1;
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::Estimation("unadjusted difference needs both arms".into()));
    }
    Ok(s1 / n1 as f64 - s0 / n0 as f64)
}

/// Horvitz–Thompson: `mean[A·Y/π − (1−A)·Y/(1−π)]`, `π` clipped into
/// `[clip, 1 − clip]`.
pub fn ipw_estimate(treated: &[bool], y: &[f64], propensity: &[f64], clip: f64) -> Result<f64> {
    check_len("ipw", treated.len(), &[y.len(), propensity.len()])?;
    let total: f64 = treated
        .iter()
        .zip(y)
        .zip(propensity)
        .map(|((&a, &y), &p)| {
            let p = clipped(p, clip);
            if a {
                y / p
            } else {
                -y / (1.0 - p)
            }
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// Per-arm sums of inverse-propensity weights; each estimates `n`.
pub fn ipw_weight_sums(treated: &[bool], propensity: &[f64], clip: f64) -> (f64, f64) {
    treated
        .iter()
        .zip(propensity)
        .fold((0.0, 0.0), |(w1, w0), (&a, &p)| {
            let p = clipped(p, clip);
            if a {
                (w1 + 1.0 / p, w0)
            } else {
                (w1, w0 + 1.0 / (1.0 - p))
            }
        })
}

/// Outcome regression: `mean[m̂₁ − m̂₀]`.
pub fn or_estimate(m1: &[f64], m0: &[f64]) -> Result<f64> {
    check_len("or", m1.len(), &[m0.len()])?;
    Ok(m1.iter().zip(m0).map(|(a, b)| a - b).sum::<f64>() / m1.len() as f64)
}

/// Augmented IPW:
/// `mean[m̂₁ − m̂₀ + A(Y − m̂₁)/π − (1−A)(Y − m̂₀)/(1−π)]`.
pub fn aipw_estimate(
    treated: &[bool],
    y: &[f64],
    m1: &[f64],
    m0: &[f64],
    propensity: &[f64],
    clip: f64,
) -> Result<f64> {
    check_len("aipw", treated.len(), &[y.len(), m1.len(), m0.len(), propensity.len()])?;
    let mut total = 0.0;
    for i in 0..y.len() {
        let p = clipped(propensity[i], clip);
        let correction = if treated[i] {
            (y[i] - m1[i]) / p
        } else {
            -(y[i] - m0[i]) / (1.0 - p)
        };
        total += m1[i] - m0[i] + correction;
    }
    Ok(total / y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_propensity_ipw_doubles_arm_sums() {
        let a = [true, false, true, false, false, true];
        let y = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0];
        let ipw = ipw_estimate(&a, &y, &[0.5; 6], PROPENSITY_CLIP).unwrap();
        assert!((ipw - 2.0 * (16.0 - 7.0) / 6.0).abs() < 1e-12);
        // balanced arms make this the unadjusted difference
        let unadj = unadjusted_difference(&a, &y).unwrap();
        assert!((ipw - unadj).abs() < 1e-12);
    }

    #[test]
    fn empty_arm_is_an_error() {
        assert!(unadjusted_difference(&[true, true], &[1.0, 2.0]).is_err());
        assert!(ipw_estimate(&[], &[], &[], 0.01).is_err());
    }

    #[test]
    fn clipping_bounds_weights() {
        let (w1, _) = ipw_weight_sums(&[true], &[1e-6], 0.01);
        assert_eq!(w1, 100.0);
    }

    #[test]
    fn aipw_with_exact_outcomes_ignores_propensity() {
        let a = [true, false, true, false];
        let m1 = [5.0, 6.0, 7.0, 8.0];
        let m0 = [4.0, 4.5, 5.0, 5.5];
        let y: Vec<f64> = (0..4).map(|i| if a[i] { m1[i] } else { m0[i] }).collect();
        let or = or_estimate(&m1, &m0).unwrap();
        for p in [0.1, 0.5, 0.9] {
            let est = aipw_estimate(&a, &y, &m1, &m0, &[p; 4], PROPENSITY_CLIP).unwrap();
            assert!((est - or).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn estimators_ignore_patient_order(
            rows in prop::collection::vec((any::<bool>(), 0.0..16.0f64, 0.05..0.95f64, 0.0..16.0f64, 0.0..16.0f64), 2..40),
            rot in 0usize..40,
        ) {
            let mut rows = rows;
            rows[0].0 = true;
            rows[1].0 = false;
            let eval = |rows: &[(bool, f64, f64, f64, f64)]| {
                let a: Vec<bool> = rows.iter().map(|r| r.0).collect();
                let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
                let p: Vec<f64> = rows.iter().map(|r| r.2).collect();
                let m1: Vec<f64> = rows.iter().map(|r| r.3).collect();
                let m0: Vec<f64> = rows.iter().map(|r| r.4).collect();
                [
                    unadjusted_difference(&a, &y).unwrap(),
                    ipw_estimate(&a, &y, &p, 0.01).unwrap(),
                    or_estimate(&m1, &m0).unwrap(),
                    aipw_estimate(&a, &y, &m1, &m0, &p, 0.01).unwrap(),
                ]
            };
            let before = eval(&rows);
            let k = rot % rows.len();
            rows.rotate_left(k);
            rows.reverse();
            let after = eval(&rows);
            for (x, y) in before.iter().zip(&after) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
