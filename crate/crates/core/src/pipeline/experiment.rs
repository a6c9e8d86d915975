use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checks::{causality_check, loss_gradcheck, primitive_gradcheck, survival_math_check, CheckResult};
use super::grid::{grid_search, GridCell, GridConfig};
use super::split::split;
use super::train::{evaluate_mae, TrainConfig};
use crate::causal::{
    estimate_ate, fit_propensity, AteReport, EstimationInputs, Method, OutcomeDefinition, OutcomeModel,
    PropensityModel, PropensitySpec, PROPENSITY_CLIP,
};
use crate::error::{Error, Result};
use crate::model::{ModelKind, SurvivalModel};
use crate::simulator::{generate_dataset, SimConfig, SimSummary};

/// Everything a prediction or causal experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub replicates: usize,
    /// Master seed; every replicate derives its own streams from it.
    pub seed: u64,
    /// Models compared in the prediction experiment.
    pub models: Vec<ModelKind>,
    pub prediction_split: (f64, f64, f64),
    pub causal_split: (f64, f64),
    /// Outcome models for outcome regression and AIPW.
    pub outcome_models: Vec<ModelKind>,
    pub propensity: PropensitySpec,
    pub clip: f64,
    pub outcome: OutcomeDefinition,
    /// Runs the self-checks and stops short of the directional findings.
    pub smoke: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            grid: GridConfig::default(),
            replicates: 6,
            seed: 0,
            models: vec![ModelKind::Dynst, ModelKind::StaticSt, ModelKind::Linear],
            prediction_split: (0.7, 0.15, 0.15),
            causal_split: (0.8, 0.2),
            outcome_models: vec![ModelKind::Dynst],
            propensity: PropensitySpec::default(),
            clip: PROPENSITY_CLIP,
            outcome: OutcomeDefinition::Observed,
            smoke: false,
        }
    }
}

impl ExperimentConfig {
    /// 1000 patients, two replicates, one grid cell of two epochs.
    pub fn smoke(seed: u64) -> Self {
        let train = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        Self {
            sim: SimConfig {
                n_patients: 1000,
                ..SimConfig::default()
            },
            grid: GridConfig::single(&train),
            train,
            replicates: 2,
            seed,
            smoke: true,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be positive".into()));
        }
        self.sim.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Seed of replicate `r` under master seed `master`.
pub fn replicate_seed(master: u64, r: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(r as u64 + 1);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: ModelKind,
    pub selected: GridCell,
    pub val_mae: f64,
    pub test_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub index: usize,
    pub seed: u64,
    pub simulation: SimSummary,
    pub models: Vec<ModelResult>,
    pub ate: Vec<AteReport>,
    pub propensity: Option<PropensityModel>,
}

/// Test MAE of one model across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeSummary {
    pub model: ModelKind,
    pub mean: f64,
    /// Omitted with fewer than two replicates.
    pub sd: Option<f64>,
    pub per_replicate: Vec<f64>,
}

/// An estimator at one cutoff, averaged over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteSummary {
    #[serde(flatten)]
    pub report: AteReport,
    pub mean_abs_bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeInfo {
    pub version: String,
    pub grid_cells_evaluated: usize,
    pub epochs_trained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config: ExperimentConfig,
    pub replicates: Vec<ReplicateReport>,
    pub prediction: Vec<MaeSummary>,
    pub ate: Vec<AteSummary>,
    /// Invariants; any failure makes the run fail.
    pub checks: Vec<CheckResult>,
    /// Directional comparisons; informational.
    pub findings: Vec<CheckResult>,
    pub runtime: RuntimeInfo,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn mae(&self, model: ModelKind) -> Option<&MaeSummary> {
        self.prediction.iter().find(|m| m.model == model)
    }

    pub fn ate_summary(&self, method: &str, tau: usize) -> Option<&AteSummary> {
        self.ate.iter().find(|a| a.report.method == method && a.report.tau == tau)
    }
}

fn mean_sd(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() >= 2)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, sd)
}

fn summarize_mae(replicates: &[ReplicateReport], kinds: &[ModelKind]) -> Vec<MaeSummary> {
    kinds
        .iter()
        .filter_map(|&kind| {
            let per_replicate: Vec<f64> = replicates
                .iter()
                .filter_map(|r| r.models.iter().find(|m| m.model == kind).and_then(|m| m.test_mae))
                .collect();
            if per_replicate.is_empty() {
                return None;
            }
            let (mean, sd) = mean_sd(&per_replicate);
            Some(MaeSummary {
                model: kind,
                mean,
                sd,
                per_replicate,
            })
        })
        .collect()
}

fn summarize_ate(replicates: &[ReplicateReport]) -> Vec<AteSummary> {
    let mut groups: BTreeMap<(usize, String), Vec<&AteReport>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in replicates {
        for a in &r.ate {
            let key = (a.tau, a.method.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(a);
        }
    }
    order
        .into_iter()
        .map(|key| {
            let reps = &groups[&key];
            let estimates: Vec<f64> = reps.iter().map(|a| a.estimate).collect();
            let (estimate, sd) = mean_sd(&estimates);
            let truths: Option<Vec<f64>> = reps.iter().map(|a| a.true_ate).collect();
            let true_ate = truths.map(|t| mean_sd(&t).0);
            let abs_bias: Option<Vec<f64>> = reps.iter().map(|a| a.bias.map(f64::abs)).collect();
            let mut report = AteReport::new(key.1, key.0, estimate, true_ate);
            report.replicate_sd = sd;
            AteSummary {
                report,
                mean_abs_bias: abs_bias.map(|b| mean_sd(&b).0),
            }
        })
        .collect()
}

fn base_train(config: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..config.train.clone()
    }
}

fn causality_cuts(t_max: usize, smoke: bool) -> Vec<usize> {
    if smoke {
        let stride = (t_max / 8).max(1);
        let mut cuts: Vec<usize> = (0..t_max).step_by(stride).collect();
        if cuts.last() != Some(&(t_max - 1)) {
            cuts.push(t_max - 1);
        }
        cuts
    } else {
        (0..t_max).collect()
    }
}

fn self_checks(config: &ExperimentConfig, model: Option<(&SurvivalModel, &crate::simulator::Cohort)>) -> Result<Vec<CheckResult>> {
    let mut checks = primitive_gradcheck(config.seed)?;
    checks.push(loss_gradcheck(ModelKind::Dynst, config.seed)?);
    if let Some((model, cohort)) = model {
        let n = cohort.len().min(100);
        let idx: Vec<usize> = (0..n).collect();
        let input = cohort.model_input(&idx, None)?;
        checks.push(causality_check(model, &input, &causality_cuts(cohort.t_max, config.smoke), config.seed)?);
    }
    checks.push(survival_math_check(config.seed, 1000)?);
    Ok(checks)
}

fn finding(name: String, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

/// For every replicate: simulate, split, grid-search each model on the
/// validation set, then score it once on the held-out test set.
pub fn run_prediction_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut replicates = Vec::with_capacity(config.replicates);
    let (mut cells, mut epochs) = (0, 0);
    let mut check_model = None;
    for r in 0..config.replicates {
        let seed = replicate_seed(config.seed, r);
        let sim = generate_dataset(&SimConfig {
            seed,
            ..config.sim.clone()
        })?;
        let parts = split(sim.cohort.len(), config.prediction_split, seed)?;
        let mut fitted = Vec::new();
        for &kind in &config.models {
            log::info!("replicate {r}: tuning {}", kind.name());
            let out = grid_search(
                kind,
                &sim.cohort,
                &parts.train,
                &parts.val,
                &config.grid,
                &base_train(config, seed),
            )?;
            cells += out.cells.len();
            epochs += out.epochs_trained;
            fitted.push((kind, out));
        }
        let test = parts.test.open();
        let mut models = Vec::new();
        for (kind, out) in &fitted {
            let test_mae = if test.is_empty() {
                None
            } else {
                Some(evaluate_mae(&out.model, &sim.cohort, test)?)
            };
            models.push(ModelResult {
                model: *kind,
                selected: out.best,
                val_mae: out.best_val_mae,
                test_mae,
            });
        }
        if r == 0 {
            check_model = fitted
                .into_iter()
                .find(|(k, _)| *k == ModelKind::Dynst)
                .map(|(_, out)| (out.model, sim.cohort.subset(&parts.val)));
        }
        replicates.push(ReplicateReport {
            index: r,
            seed,
            simulation: sim.summary()?,
            models,
            ate: Vec::new(),
            propensity: None,
        });
    }
    let prediction = summarize_mae(&replicates, &config.models);
    let checks = self_checks(config, check_model.as_ref().map(|(m, c)| (m, c)))?;
    let mut findings = Vec::new();
    let get = |k| prediction.iter().find(|m| m.model == k).map(|m| m.mean);
    if let (Some(d), Some(s), Some(l)) = (get(ModelKind::Dynst), get(ModelKind::StaticSt), get(ModelKind::Linear)) {
        findings.push(finding(
            "mae_ordering".into(),
            d <= s && s <= l,
            format!("mean test MAE dynst {d:.4}, static_st {s:.4}, linear {l:.4}"),
        ));
    }
    Ok(ExperimentReport {
        experiment: "predict".into(),
        config: config.clone(),
        replicates,
        prediction,
        ate: Vec::new(),
        checks,
        findings,
        runtime: RuntimeInfo {
            version: env!("CARGO_PKG_VERSION").into(),
            grid_cells_evaluated: cells,
            epochs_trained: epochs,
        },
    })
}

/// For every replicate: simulate with the oracle, tune each outcome model
/// on an 80/20 split, fit the propensity model, and run every estimator on
/// the whole cohort at each cutoff.
pub fn run_causal_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let taus = config.sim.taus.clone();
    let (a, b) = config.causal_split;
    let mut replicates = Vec::with_capacity(config.replicates);
    let (mut cells, mut epochs) = (0, 0);
    let mut check_model = None;
    for r in 0..config.replicates {
        let seed = replicate_seed(config.seed, r);
        let sim = generate_dataset(&SimConfig {
            seed,
            ..config.sim.clone()
        })?;
        let cohort = &sim.cohort;
        let parts = split(cohort.len(), (a, b, 0.0), seed)?;
        let propensity = fit_propensity(
            cohort,
            &PropensitySpec {
                seed,
                ..config.propensity.clone()
            },
        )?;
        let scores = propensity.model.predict(cohort);
        let base = EstimationInputs {
            cohort,
            taus: &taus,
            outcome_model: None,
            outcome_label: None,
            factual_curves: None,
            propensity: Some(&scores),
            oracle: Some(&sim.oracle),
            outcome: OutcomeDefinition::Observed,
            clip: config.clip,
        };
        let mut ate = estimate_ate(&base, &[Method::Unadjusted, Method::Ipw])?;
        let mut models = Vec::new();
        for &kind in &config.outcome_models {
            log::info!("replicate {r}: tuning outcome model {}", kind.name());
            let out = grid_search(
                kind,
                cohort,
                &parts.train,
                &parts.val,
                &config.grid,
                &base_train(config, seed),
            )?;
            cells += out.cells.len();
            epochs += out.epochs_trained;
            let curves = match config.outcome {
                OutcomeDefinition::Imputed => Some(out.model.predict_survival(&cohort.all_inputs(None)?)?),
                OutcomeDefinition::Observed => None,
            };
            let outcome_model: &dyn OutcomeModel = &out.model;
            let inputs = EstimationInputs {
                outcome_model: Some(outcome_model),
                outcome_label: Some(kind.name()),
                factual_curves: curves.as_deref(),
                outcome: config.outcome,
                ..base
            };
            ate.extend(estimate_ate(&inputs, &[Method::OutcomeRegression, Method::Aipw])?);
            models.push(ModelResult {
                model: kind,
                selected: out.best,
                val_mae: out.best_val_mae,
                test_mae: None,
            });
            if r == 0 && check_model.is_none() && kind != ModelKind::Linear {
                check_model = Some((out.model, cohort.subset(&parts.val)));
            }
        }
        ate.sort_by(|x, y| x.tau.cmp(&y.tau).then_with(|| x.method.cmp(&y.method)));
        replicates.push(ReplicateReport {
            index: r,
            seed,
            simulation: sim.summary()?,
            models,
            ate,
            propensity: Some(propensity.model),
        });
    }
    let summaries = summarize_ate(&replicates);
    let mut checks = self_checks(config, check_model.as_ref().map(|(m, c)| (m, c)))?;
    for &tau in &taus {
        if let Some(s) = summaries.iter().find(|s| s.report.method == "unadjusted" && s.report.tau == tau) {
            let bias = s.report.bias.unwrap_or(f64::NAN);
            checks.push(finding(
                format!("unadjusted_bias_negative@{tau}"),
                bias < 0.0,
                format!("mean unadjusted bias {bias:.4}"),
            ));
        }
    }
    let mut findings = Vec::new();
    if !config.smoke {
        let abs_bias = |m: &str, tau| {
            summaries
                .iter()
                .find(|s| s.report.method == m && s.report.tau == tau)
                .and_then(|s| s.mean_abs_bias)
        };
        for &tau in &taus {
            for &kind in &config.outcome_models {
                let (aipw, or) = (format!("aipw_{}", kind.name()), format!("or_{}", kind.name()));
                if let (Some(x), Some(y), Some(z)) =
                    (abs_bias(&aipw, tau), abs_bias(&or, tau), abs_bias("unadjusted", tau))
                {
                    findings.push(finding(
                        format!("abs_bias_ordering_{}@{tau}", kind.name()),
                        x <= y && y < z,
                        format!("mean |bias| {aipw} {x:.4}, {or} {y:.4}, unadjusted {z:.4}"),
                    ));
                }
            }
        }
    }
    Ok(ExperimentReport {
        experiment: "causal".into(),
        config: config.clone(),
        replicates,
        prediction: Vec::new(),
        ate: summaries,
        checks,
        findings,
        runtime: RuntimeInfo {
            version: env!("CARGO_PKG_VERSION").into(),
            grid_cells_evaluated: cells,
            epochs_trained: epochs,
        },
    })
}
