use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::SimConfig;
use super::covariates::{sample_covariates, Covariates};
use super::hazard::{hazard, Coefficients};
use super::trajectory::sample_trajectory;
use crate::error::{Error, Result};
use crate::model::ModelInput;

/// One model-visible patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: usize,
    /// Male, hypertension, coronary atherosclerosis, atrial fibrillation, Z*.
    pub z: Vec<u8>,
    /// `t_max` rows of standardized vitals.
    pub v: Vec<Vec<f64>>,
    pub a: u8,
    pub o: usize,
    pub delta: u8,
}

impl PatientRecord {
    pub fn treated(&self) -> bool {
        self.a == 1
    }

    pub fn event(&self) -> bool {
        self.delta == 1
    }

    fn validate(&self, t_max: usize, z_len: usize, q: usize) -> Result<()> {
        let bit = |x: u8| x <= 1;
        if self.z.len() != z_len || !self.z.iter().all(|&b| bit(b)) || !bit(self.a) || !bit(self.delta) {
            return Err(Error::Data(format!("patient {}: malformed binary fields", self.id)));
        }
        if self.v.len() != t_max || self.v.iter().any(|row| row.len() != q) {
            return Err(Error::Data(format!(
                "patient {}: temporal matrix is not {t_max} x {q}",
                self.id
            )));
        }
        if self.o == 0 || self.o > t_max {
            return Err(Error::Data(format!(
                "patient {}: observed time {} outside 1..={t_max}",
                self.id, self.o
            )));
        }
        Ok(())
    }
}

/// Ground truth for one patient; never shown to a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub id: usize,
    /// Noiseless factual survival curve.
    pub s_true: Vec<f64>,
    /// Noiseless RMST under treatment, keyed by cutoff.
    pub rmst1: BTreeMap<usize, f64>,
    /// Noiseless RMST under control, keyed by cutoff.
    pub rmst0: BTreeMap<usize, f64>,
    pub pi_true: f64,
}

/// A validated cohort sharing `t_max` and feature widths.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub t_max: usize,
    pub records: Vec<PatientRecord>,
}

impl Cohort {
    pub fn new(records: Vec<PatientRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Data("empty cohort".into()))?;
        let t_max = first.v.len();
        let z_len = first.z.len();
        let q = first.v.first().map_or(0, Vec::len);
        for r in &records {
            r.validate(t_max, z_len, q)?;
        }
        Ok(Self { t_max, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Static width seen by the models: the `z` bits plus treatment.
    pub fn p_static(&self) -> usize {
        self.records[0].z.len() + 1
    }

    pub fn q_temporal(&self) -> usize {
        self.records[0].v.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            t_max: self.t_max,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn observed(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.o).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.records.iter().map(PatientRecord::event).collect()
    }

    pub fn treatments(&self) -> Vec<bool> {
        self.records.iter().map(PatientRecord::treated).collect()
    }

    /// Model layout for `indices`. With `treatment = Some(a)` every patient's
    /// treatment bit is replaced by `a`.
    pub fn model_input(&self, indices: &[usize], treatment: Option<bool>) -> Result<ModelInput> {
        let (p, q) = (self.p_static(), self.q_temporal());
        let mut statics = Vec::with_capacity(indices.len() * p);
        let mut temporal = Vec::with_capacity(indices.len() * self.t_max * q);
        for &i in indices {
            let r = self.records.get(i).ok_or_else(|| Error::Data(format!("patient index {i} out of range")))?;
            statics.extend(r.z.iter().map(|&b| b as f64));
            let a = treatment.unwrap_or(r.treated());
            statics.push(if a { 1.0 } else { 0.0 });
            for row in &r.v {
                temporal.extend_from_slice(row);
            }
        }
        ModelInput::new(indices.len(), self.t_max, p, q, statics, temporal)
    }

    /// Model layout for the whole cohort.
    pub fn all_inputs(&self, treatment: Option<bool>) -> Result<ModelInput> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.model_input(&all, treatment)
    }
}

/// Cohort-level facts reported alongside a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub n_patients: usize,
    pub t_max: usize,
    pub censoring_rate: f64,
    pub mean_observed_time: f64,
    pub treated_fraction: f64,
    pub severe_fraction: f64,
    pub coefficients: Coefficients,
    pub true_ate: BTreeMap<usize, f64>,
}

/// A simulated cohort with its ground truth.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: SimConfig,
    pub coefficients: Coefficients,
    pub cohort: Cohort,
    pub oracle: Vec<OracleRecord>,
}

/// `P(A = 1 | Z*)`.
pub fn propensity(severe: bool, config: &SimConfig) -> f64 {
    if severe {
        config.propensity_levels.0
    } else {
        config.propensity_levels.1
    }
}

pub fn assign_treatment(severe: bool, config: &SimConfig, rng: &mut impl Rng) -> bool {
    rng.random::<f64>() < propensity(severe, config)
}

/// Per-step clamped hazards of one patient under treatment `treated`.
pub fn hazard_path(cov: &Covariates, treated: bool, coeffs: &Coefficients, config: &SimConfig) -> Vec<f64> {
    let statics = cov.statics();
    let severe = cov.severe();
    cov.vitals
        .iter()
        .enumerate()
        .map(|(k, v)| hazard(k + 1, treated, &statics, severe, v, coeffs, config))
        .collect()
}

fn noiseless_survival(hazards: &[f64]) -> Vec<f64> {
    let mut s = 1.0;
    hazards
        .iter()
        .map(|h| {
            s *= 1.0 - h;
            s
        })
        .collect()
}

fn restricted(s: &[f64], taus: &[usize]) -> BTreeMap<usize, f64> {
    taus.iter().map(|&tau| (tau, s[..tau].iter().sum())).collect()
}

/// Random stream for patient `i`; stream 0 is reserved for the coefficients.
pub fn patient_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

/// Simulates one cohort. Each patient draws from an independent stream of
/// the master seed, so records do not depend on cohort size or order.
pub fn generate_dataset(config: &SimConfig) -> Result<Simulation> {
    config.validate()?;
    if config.n_patients == 0 {
        return Err(Error::Config("n_patients must be positive".into()));
    }
    let mut coeff_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let coefficients = Coefficients::draw(config, &mut coeff_rng);
    let mut records = Vec::with_capacity(config.n_patients);
    let mut oracle = Vec::with_capacity(config.n_patients);
    for id in 0..config.n_patients {
        let mut rng = patient_rng(config.seed, id);
        let cov = sample_covariates(config, &mut rng);
        let severe = cov.severe();
        let treated = assign_treatment(severe, config, &mut rng);
        let h1 = hazard_path(&cov, true, &coefficients, config);
        let h0 = hazard_path(&cov, false, &coefficients, config);
        let factual = if treated { &h1 } else { &h0 };
        let tr = sample_trajectory(factual, config.noise_sigma, &mut rng);
        let s1 = noiseless_survival(&h1);
        let s0 = noiseless_survival(&h0);
        let mut z: Vec<u8> = cov.statics().iter().map(|&b| b as u8).collect();
        z.push(severe as u8);
        records.push(PatientRecord {
            id,
            z,
            v: cov.vitals.iter().map(|row| row.to_vec()).collect(),
            a: treated as u8,
            o: tr.observed,
            delta: tr.event as u8,
        });
        oracle.push(OracleRecord {
            id,
            s_true: tr.survival,
            rmst1: restricted(&s1, &config.taus),
            rmst0: restricted(&s0, &config.taus),
            pi_true: propensity(severe, config),
        });
    }
    Ok(Simulation {
        config: config.clone(),
        coefficients,
        cohort: Cohort::new(records)?,
        oracle,
    })
}

/// Mean over the cohort of `RMST₁(τ) − RMST₀(τ)` from the noiseless
/// counterfactual curves.
pub fn true_ate(oracle: &[OracleRecord], tau: usize) -> Result<f64> {
    if oracle.is_empty() {
        return Err(Error::Data("empty oracle".into()));
    }
    let mut total = 0.0;
    for r in oracle {
        let (Some(a), Some(b)) = (r.rmst1.get(&tau), r.rmst0.get(&tau)) else {
            return Err(Error::Data(format!("oracle has no RMST at tau {tau}")));
        };
        total += a - b;
    }
    Ok(total / oracle.len() as f64)
}

impl Simulation {
    pub fn summary(&self) -> Result<SimSummary> {
        let n = self.cohort.len() as f64;
        let records = &self.cohort.records;
        let censored = records.iter().filter(|r| !r.event()).count() as f64;
        let severe = records.iter().filter(|r| r.z.last() == Some(&1)).count() as f64;
        let mut true_ates = BTreeMap::new();
        for &tau in &self.config.taus {
            true_ates.insert(tau, true_ate(&self.oracle, tau)?);
        }
        Ok(SimSummary {
            n_patients: records.len(),
            t_max: self.cohort.t_max,
            censoring_rate: censored / n,
            mean_observed_time: records.iter().map(|r| r.o as f64).sum::<f64>() / n,
            treated_fraction: records.iter().filter(|r| r.treated()).count() as f64 / n,
            severe_fraction: severe / n,
            coefficients: self.coefficients.clone(),
            true_ate: true_ates,
        })
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            items.push(serde_json::from_str(&line)?);
        }
    }
    Ok(items)
}

pub fn read_cohort(path: &Path) -> Result<Cohort> {
    Cohort::new(read_jsonl(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SimConfig {
        SimConfig {
            n_patients: 200,
            t_max: 24,
            seed,
            ..SimConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for k in 0..2 {
            let sim = generate_dataset(&small(3)).unwrap();
            let path = dir.path().join(format!("d{k}.jsonl"));
            write_jsonl(&path, &sim.cohort.records).unwrap();
            bytes.push(std::fs::read(&path).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
        let other = generate_dataset(&small(4)).unwrap();
        assert_ne!(other.cohort.records, generate_dataset(&small(3)).unwrap().cohort.records);
    }

    #[test]
    fn records_satisfy_invariants() {
        let sim = generate_dataset(&small(1)).unwrap();
        for (r, o) in sim.cohort.records.iter().zip(&sim.oracle) {
            assert!((1..=24).contains(&r.o));
            assert_eq!(r.z.len(), 5);
            let n_diag = r.z[1..4].iter().filter(|&&b| b == 1).count();
            assert_eq!(r.z[4] == 1, n_diag >= 2);
            assert_eq!(o.pi_true, if r.z[4] == 1 { 0.8 } else { 0.2 });
            assert!(o.s_true.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn prefix_of_a_larger_cohort_is_identical() {
        let a = generate_dataset(&small(2)).unwrap();
        let b = generate_dataset(&SimConfig {
            n_patients: 300,
            ..small(2)
        })
        .unwrap();
        assert_eq!(a.cohort.records[..], b.cohort.records[..200]);
    }

    #[test]
    fn zero_theta_gives_zero_effect() {
        let sim = generate_dataset(&SimConfig {
            theta: 0.0,
            ..small(5)
        })
        .unwrap();
        for tau in [8, 12, 16] {
            assert_eq!(true_ate(&sim.oracle, tau).unwrap(), 0.0);
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let sim = generate_dataset(&small(8)).unwrap();
        let path = dir.path().join("o.jsonl");
        write_jsonl(&path, &sim.oracle).unwrap();
        let back: Vec<OracleRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back, sim.oracle);
        let path = dir.path().join("d.jsonl");
        write_jsonl(&path, &sim.cohort.records).unwrap();
        assert_eq!(read_cohort(&path).unwrap(), sim.cohort);
    }

    #[test]
    fn counterfactual_inputs_override_treatment() {
        let sim = generate_dataset(&small(6)).unwrap();
        let x = sim.cohort.model_input(&[0, 1, 2], Some(true)).unwrap();
        assert_eq!((x.p, x.q, x.t_max), (6, 4, 24));
        for i in 0..3 {
            assert_eq!(x.statics[i * 6 + 5], 1.0);
        }
    }
}
