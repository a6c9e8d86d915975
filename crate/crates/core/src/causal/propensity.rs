use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::Cohort;

const MAX_NEWTON_ITERS: usize = 100;
const SEPARATION_WEIGHT: f64 = 25.0;

/// Logistic treatment model over a subset of the static bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    /// Indices into each record's `z`.
    pub features: Vec<usize>,
    /// Adds every pairwise product of the selected features.
    pub interactions: bool,
    /// Ridge strength `λ` on the non-intercept weights.
    pub penalty: f64,
    /// Intercept first.
    pub weights: Vec<f64>,
}

/// How to fit a [`PropensityModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensitySpec {
    pub features: Vec<usize>,
    pub interactions: bool,
    /// Candidate ridge strengths, compared by cross-validated log loss.
    pub penalties: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for PropensitySpec {
    fn default() -> Self {
        Self {
            features: vec![1, 2, 3],
            interactions: false,
            penalties: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0],
            folds: 5,
            seed: 0,
        }
    }
}

/// A fitted propensity model with its selection trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    pub model: PropensityModel,
    /// `(penalty, mean held-out log loss)` for every candidate.
    pub cv_loss: Vec<(f64, f64)>,
    /// Set when the selected fit separated the data and the strongest
    /// penalty was used instead.
    pub separated: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn design_row(features: &[usize], interactions: bool, z: &[u8]) -> Vec<f64> {
    let x: Vec<f64> = features.iter().map(|&j| z[j] as f64).collect();
    let mut row = Vec::with_capacity(1 + x.len() * (x.len() + 1) / 2);
    row.push(1.0);
    row.extend_from_slice(&x);
    if interactions {
        for a in 0..x.len() {
            for b in a + 1..x.len() {
                row.push(x[a] * x[b]);
            }
        }
    }
    row
}

impl PropensityModel {
    pub fn score(&self, z: &[u8]) -> f64 {
        let row = design_row(&self.features, self.interactions, z);
        sigmoid(row.iter().zip(&self.weights).map(|(x, w)| x * w).sum())
    }

    pub fn predict(&self, cohort: &Cohort) -> Vec<f64> {
        cohort.records.iter().map(|r| self.score(&r.z)).collect()
    }
}

struct LogisticFit {
    weights: Vec<f64>,
    separated: bool,
}

fn objective(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, penalty: f64) -> f64 {
    let eta = x * w;
    let nll: f64 = eta
        .iter()
        .zip(y.iter())
        .map(|(&e, &y)| {
            // log(1 + e^e) − y·e, stable for either sign
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            softplus - y * e
        })
        .sum();
    nll + 0.5 * penalty * w.rows(1, w.len() - 1).norm_squared()
}

/// Penalized maximum likelihood by damped Newton steps.
fn fit_logistic(x: &DMatrix<f64>, y: &DVector<f64>, penalty: f64) -> Result<LogisticFit> {
    let k = x.ncols();
    let mut ridge = DMatrix::<f64>::identity(k, k) * penalty;
    ridge[(0, 0)] = 0.0;
    let mut w = DVector::<f64>::zeros(k);
    let mut obj = objective(x, y, &w, penalty);
    let mut converged = false;
    for _ in 0..MAX_NEWTON_ITERS {
        let p = (x * &w).map(sigmoid);
        let grad = x.transpose() * (&p - y) + &ridge * &w;
        let weights = p.map(|p| p * (1.0 - p));
        let xw = DMatrix::from_fn(x.nrows(), k, |i, j| x[(i, j)] * weights[i]);
        let hessian = x.transpose() * xw + &ridge + DMatrix::<f64>::identity(k, k) * 1e-10;
        let Some(chol) = hessian.cholesky() else {
            break;
        };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &w - &step * t;
            let cand_obj = objective(x, y, &cand, penalty);
            if cand_obj <= obj {
                w = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || step.amax() * t < 1e-10 {
            converged = true;
            break;
        }
    }
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::Estimation("logistic fit produced non-finite weights".into()));
    }
    let separated = !converged || w.amax() > SEPARATION_WEIGHT;
    Ok(LogisticFit {
        weights: w.iter().copied().collect(),
        separated,
    })
}

fn held_out_log_loss(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> f64 {
    let w = DVector::from_column_slice(w);
    let p = (x * w).map(sigmoid);
    let total: f64 = p
        .iter()
        .zip(y.iter())
        .map(|(&p, &y)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / y.len() as f64
}

fn select_rows(x: &DMatrix<f64>, y: &DVector<f64>, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    (x.select_rows(rows.iter()), y.select_rows(rows.iter()))
}

/// Fits the treatment model, choosing the ridge strength by k-fold
/// cross-validated log loss (ties go to the stronger penalty).
pub fn fit_propensity(cohort: &Cohort, spec: &PropensitySpec) -> Result<PropensityFit> {
    let z_len = cohort.records.first().map_or(0, |r| r.z.len());
    if let Some(j) = spec.features.iter().find(|&&j| j >= z_len) {
        return Err(Error::Config(format!("propensity feature {j} outside 0..{z_len}")));
    }
    if spec.penalties.is_empty() || spec.penalties.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(Error::Config("penalty grid must be non-empty and non-negative".into()));
    }
    let n = cohort.len();
    if spec.folds < 2 || spec.folds > n {
        return Err(Error::Config(format!("cannot run {}-fold CV on {n} patients", spec.folds)));
    }
    let treated = cohort.records.iter().filter(|r| r.treated()).count();
    if treated == 0 || treated == n {
        return Err(Error::Estimation("treatment is constant; propensity undefined".into()));
    }
    let rows: Vec<Vec<f64>> = cohort
        .records
        .iter()
        .map(|r| design_row(&spec.features, spec.interactions, &r.z))
        .collect();
    let k = rows[0].len();
    let x = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
    let y = DVector::from_iterator(n, cohort.records.iter().map(|r| r.a as f64));

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut penalties = spec.penalties.clone();
    penalties.sort_by(f64::total_cmp);

    let mut cv_loss = Vec::with_capacity(penalties.len());
    for &penalty in &penalties {
        let mut loss = 0.0;
        for fold in 0..spec.folds {
            let (test, train): (Vec<usize>, Vec<usize>) = order
                .iter()
                .enumerate()
                .map(|(pos, &i)| (pos % spec.folds == fold, i))
                .fold((Vec::new(), Vec::new()), |(mut te, mut tr), (is_test, i)| {
                    if is_test {
                        te.push(i)
                    } else {
                        tr.push(i)
                    }
                    (te, tr)
                });
            let (xt, yt) = select_rows(&x, &y, &train);
            let fit = fit_logistic(&xt, &yt, penalty)?;
            let (xv, yv) = select_rows(&x, &y, &test);
            loss += held_out_log_loss(&xv, &yv, &fit.weights);
        }
        cv_loss.push((penalty, loss / spec.folds as f64));
    }
    let mut best = cv_loss.len() - 1;
    for i in (0..cv_loss.len()).rev() {
        if cv_loss[i].1 < cv_loss[best].1 - 1e-12 {
            best = i;
        }
    }
    let mut penalty = cv_loss[best].0;
    let mut fit = fit_logistic(&x, &y, penalty)?;
    let separated = fit.separated;
    if separated {
        let strongest = *penalties.last().unwrap_or(&penalty);
        log::warn!("propensity fit separated the data at penalty {penalty}; refitting at {strongest}");
        penalty = strongest;
        fit = fit_logistic(&x, &y, penalty)?;
    }
    Ok(PropensityFit {
        model: PropensityModel {
            features: spec.features.clone(),
            interactions: spec.interactions,
            penalty,
            weights: fit.weights,
        },
        cv_loss,
        separated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_dataset, PatientRecord, SimConfig};

    fn record(id: usize, z: Vec<u8>, a: u8) -> PatientRecord {
        PatientRecord {
            id,
            z,
            v: vec![vec![0.0]],
            a,
            o: 1,
            delta: 0,
        }
    }

    #[test]
    fn constant_feature_recovers_treated_fraction() {
        let records = (0..400).map(|i| record(i, vec![1], (i % 4 == 0) as u8)).collect();
        let cohort = Cohort::new(records).unwrap();
        let spec = PropensitySpec {
            features: vec![0],
            ..PropensitySpec::default()
        };
        let fit = fit_propensity(&cohort, &spec).unwrap();
        for p in fit.model.predict(&cohort) {
            assert!((p - 0.25).abs() < 1e-3, "{p}");
        }
    }

    #[test]
    fn separation_falls_back_to_strongest_penalty() {
        let records = (0..200).map(|i| record(i, vec![(i % 2) as u8], (i % 2) as u8)).collect();
        let cohort = Cohort::new(records).unwrap();
        let spec = PropensitySpec {
            features: vec![0],
            penalties: vec![0.0, 1.0],
            ..PropensitySpec::default()
        };
        let fit = fit_propensity(&cohort, &spec).unwrap();
        assert!(fit.separated);
        assert_eq!(fit.model.penalty, 1.0);
        assert!(fit.model.predict(&cohort).iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn constant_treatment_is_an_error() {
        let records = (0..20).map(|i| record(i, vec![0], 1)).collect();
        let cohort = Cohort::new(records).unwrap();
        let spec = PropensitySpec {
            features: vec![0],
            ..PropensitySpec::default()
        };
        assert!(fit_propensity(&cohort, &spec).is_err());
    }

    #[test]
    fn severity_bit_recovers_assignment_levels() {
        let sim = generate_dataset(&SimConfig {
            n_patients: 4000,
            t_max: 4,
            taus: vec![4],
            seed: 11,
            ..SimConfig::default()
        })
        .unwrap();
        let spec = PropensitySpec {
            features: vec![4],
            ..PropensitySpec::default()
        };
        let fit = fit_propensity(&sim.cohort, &spec).unwrap();
        for (p, o) in fit.model.predict(&sim.cohort).iter().zip(&sim.oracle) {
            assert!((p - o.pi_true).abs() < 0.05, "{p} vs {}", o.pi_true);
        }
    }
}
