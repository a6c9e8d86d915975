use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use dynst::causal::{
    estimate_ate, fit_propensity, EstimationInputs, Method, OutcomeDefinition, OutcomeModel, PropensitySpec,
    PROPENSITY_CLIP,
};
use dynst::model::{ModelKind, SurvivalModel};
use dynst::pipeline::{
    emit_curves, evaluate_mae, grid_search, loss_gradcheck, primitive_gradcheck, run_causal_experiment,
    run_prediction_experiment, split, survival_math_check, train, ExperimentConfig, GridConfig, TrainConfig,
};
use dynst::simulator::{generate_dataset, read_cohort, read_jsonl, write_jsonl, OracleRecord, SimConfig};
use dynst::{Error, Result};

/// Relative output paths are resolved against this directory when set.
const OUT_DIR_ENV: &str = "DYNST_OUT_DIR";

#[derive(Parser)]
#[command(name = "dynst", version, about = "Dynamic survival transformer and RMST treatment-effect estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON config file; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set n_patients=2000` or
    /// `--set train.optimizer.lr=0.003`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a cohort and its oracle.
    Simulate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the cohort summary (stdout when omitted).
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Train one model (or grid-search one) and save a checkpoint.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dynst")]
        model: ModelKind,
        #[arg(long)]
        out: PathBuf,
        /// Grid JSON; trains the single configured cell when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Train/validation/test ratios.
        #[arg(long, default_value = "0.7,0.15,0.15")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Training history and selection report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Censored MAE of a checkpoint, optionally writing survival curves.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Evaluate on the test part of this split instead of every patient.
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for per-patient and mean survival curve CSVs.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Estimate average treatment effects on RMST.
    EstimateAte {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Outcome model checkpoint, needed by `or` and `aipw`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "unadjusted,or,ipw,aipw")]
        methods: String,
        #[arg(long, default_value = "8,12,16")]
        tau: String,
        /// Use the oracle's true propensities instead of a fitted model.
        #[arg(long)]
        true_propensity: bool,
        #[arg(long, default_value_t = PROPENSITY_CLIP)]
        clip: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a replicated experiment.
    Experiment {
        #[command(subcommand)]
        kind: ExperimentKind,
    },
    /// Finite-difference gradient checks and survival-math self-checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum ExperimentKind {
    Predict(ExperimentArgs),
    Causal(ExperimentArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    seed: Option<u64>,
    /// 1000 patients, two replicates, a single grid cell.
    #[arg(long)]
    smoke: bool,
    /// Cap on grid cells per model.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

enum Outcome {
    Ok,
    InvariantViolated,
}

fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() => PathBuf::from(dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    let path = output_path(path);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("cannot set {key}: {part} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config field {key}")));
        }
        if k + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Ok(())
}

/// Defaults, then the config file, then each `--set`.
fn load_config<T: Serialize + DeserializeOwned + Default>(overrides: &Overrides) -> Result<T> {
    let base = match &overrides.config {
        Some(path) => serde_json::from_str::<T>(&std::fs::read_to_string(path)?)?,
        None => T::default(),
    };
    let mut value = serde_json::to_value(base)?;
    for entry in &overrides.set {
        let (key, raw) = entry
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {entry}")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, key.trim(), parsed)?;
    }
    Ok(serde_json::from_value(value)?)
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse {what} from {s:?}")))
        })
        .collect()
}

fn parse_split(text: &str) -> Result<(f64, f64, f64)> {
    match parse_list::<f64>(text, "split ratio")?[..] {
        [a, b, c] => Ok((a, b, c)),
        [a, b] => Ok((a, b, 0.0)),
        _ => Err(Error::Config(format!("split needs two or three ratios, got {text}"))),
    }
}

fn simulate(overrides: &Overrides, out: &Path, oracle: &Path, seed: Option<u64>, summary: Option<&Path>) -> Result<Outcome> {
    let mut config: SimConfig = load_config(overrides)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let sim = generate_dataset(&config)?;
    let (out, oracle) = (output_path(out), output_path(oracle));
    for path in [&out, &oracle] {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_jsonl(&out, &sim.cohort.records)?;
    write_jsonl(&oracle, &sim.oracle)?;
    let stats = sim.summary()?;
    match summary {
        Some(path) => {
            write_json(path, &stats)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&stats)?),
    }
    Ok(Outcome::Ok)
}

#[allow(clippy::too_many_arguments)]
fn train_command(
    overrides: &Overrides,
    data: &Path,
    kind: ModelKind,
    out: &Path,
    grid: Option<&Path>,
    split_text: &str,
    seed: Option<u64>,
    report: Option<&Path>,
) -> Result<Outcome> {
    let mut config: TrainConfig = load_config(overrides)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let cohort = read_cohort(data)?;
    let parts = split(cohort.len(), parse_split(split_text)?, config.seed)?;
    let (model, summary) = match grid {
        Some(path) => {
            let grid: GridConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            let out = grid_search(kind, &cohort, &parts.train, &parts.val, &grid, &config)?;
            let summary = serde_json::json!({
                "model": kind,
                "selected": out.best,
                "val_mae": out.best_val_mae,
                "cells": out.cells,
            });
            (out.model, summary)
        }
        None => {
            let out = train(kind, &cohort, &parts.train, &parts.val, &config)?;
            let summary = serde_json::json!({
                "model": kind,
                "config": config,
                "best_epoch": out.best_epoch,
                "val_mae": out.best_val_mae,
                "history": out.history,
            });
            (out.model, summary)
        }
    };
    let path = output_path(out);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    model.save(&path)?;
    match report {
        Some(p) => {
            write_json(p, &summary)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&summary)?),
    }
    Ok(Outcome::Ok)
}

fn evaluate(data: &Path, model: &Path, split_text: Option<&str>, seed: u64, curves: Option<&Path>) -> Result<Outcome> {
    let cohort = read_cohort(data)?;
    let model = SurvivalModel::load(model)?;
    let indices = match split_text {
        Some(text) => split(cohort.len(), parse_split(text)?, seed)?.test.open().to_vec(),
        None => (0..cohort.len()).collect(),
    };
    let mae = evaluate_mae(&model, &cohort, &indices)?;
    if let Some(dir) = curves {
        emit_curves(&model, &cohort, &indices, &output_path(dir), model.kind().name())?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "model": model.kind(),
            "patients": indices.len(),
            "censored_mae": mae,
        }))?
    );
    Ok(Outcome::Ok)
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    data: &Path,
    oracle: Option<&Path>,
    model: Option<&Path>,
    methods: &str,
    tau: &str,
    true_propensity: bool,
    clip: f64,
    seed: u64,
    out: &Path,
) -> Result<Outcome> {
    let cohort = read_cohort(data)?;
    let oracle: Option<Vec<OracleRecord>> = oracle.map(read_jsonl).transpose()?;
    let model = model.map(SurvivalModel::load).transpose()?;
    let methods: Vec<Method> = parse_list(methods, "estimator")?;
    let taus: Vec<usize> = parse_list(tau, "tau")?;
    let needs_propensity = methods.iter().any(|m| matches!(m, Method::Ipw | Method::Aipw));
    let scores = if !needs_propensity {
        None
    } else if true_propensity {
        let oracle = oracle
            .as_ref()
            .ok_or_else(|| Error::Config("--true-propensity needs --oracle".into()))?;
        let by_id: std::collections::HashMap<usize, f64> = oracle.iter().map(|o| (o.id, o.pi_true)).collect();
        Some(
            cohort
                .records
                .iter()
                .map(|r| {
                    by_id
                        .get(&r.id)
                        .copied()
                        .ok_or_else(|| Error::Data(format!("oracle has no patient {}", r.id)))
                })
                .collect::<Result<Vec<f64>>>()?,
        )
    } else {
        let spec = PropensitySpec {
            seed,
            ..PropensitySpec::default()
        };
        Some(fit_propensity(&cohort, &spec)?.model.predict(&cohort))
    };
    let outcome_model = model.as_ref().map(|m| m as &dyn OutcomeModel);
    let inputs = EstimationInputs {
        cohort: &cohort,
        taus: &taus,
        outcome_model,
        outcome_label: None,
        factual_curves: None,
        propensity: scores.as_deref(),
        oracle: oracle.as_deref(),
        outcome: OutcomeDefinition::Observed,
        clip,
    };
    let reports = estimate_ate(&inputs, &methods)?;
    write_json(out, &reports)?;
    Ok(Outcome::Ok)
}

fn experiment(kind: &ExperimentKind) -> Result<Outcome> {
    let (args, causal) = match kind {
        ExperimentKind::Predict(a) => (a, false),
        ExperimentKind::Causal(a) => (a, true),
    };
    let mut config: ExperimentConfig = if args.smoke {
        let base = ExperimentConfig::smoke(args.seed.unwrap_or(0));
        let mut value = serde_json::to_value(base)?;
        for entry in &args.overrides.set {
            let (key, raw) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {entry}")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key.trim(), parsed)?;
        }
        serde_json::from_value(value)?
    } else {
        load_config(&args.overrides)?
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(budget) = args.budget {
        config.grid.budget = Some(budget);
    }
    let started = std::time::Instant::now();
    let report = if causal {
        run_causal_experiment(&config)?
    } else {
        run_prediction_experiment(&config)?
    };
    let path = write_json(&args.out, &report)?;
    log::info!("wrote {} in {:.1}s", path.display(), started.elapsed().as_secs_f64());
    for c in report.checks.iter().chain(&report.findings) {
        eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(if report.passed() {
        Outcome::Ok
    } else {
        Outcome::InvariantViolated
    })
}

fn gradcheck(seed: u64) -> Result<Outcome> {
    let mut checks = primitive_gradcheck(seed)?;
    for kind in [ModelKind::Dynst, ModelKind::StaticSt, ModelKind::Linear] {
        checks.push(loss_gradcheck(kind, seed)?);
    }
    checks.push(survival_math_check(seed, 1000)?);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(if checks.iter().all(|c| c.passed) {
        Outcome::Ok
    } else {
        Outcome::InvariantViolated
    })
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Simulate {
            overrides,
            out,
            oracle,
            seed,
            summary,
        } => simulate(&overrides, &out, &oracle, seed, summary.as_deref()),
        Command::Train {
            overrides,
            data,
            model,
            out,
            grid,
            split,
            seed,
            report,
        } => train_command(&overrides, &data, model, &out, grid.as_deref(), &split, seed, report.as_deref()),
        Command::Evaluate {
            data,
            model,
            split,
            seed,
            curves,
        } => evaluate(&data, &model, split.as_deref(), seed, curves.as_deref()),
        Command::EstimateAte {
            data,
            oracle,
            model,
            methods,
            tau,
            true_propensity,
            clip,
            seed,
            out,
        } => estimate(
            &data,
            oracle.as_deref(),
            model.as_deref(),
            &methods,
            &tau,
            true_propensity,
            clip,
            seed,
            &out,
        ),
        Command::Experiment { kind } => experiment(&kind),
        Command::Gradcheck { seed } => gradcheck(seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::InvariantViolated) => {
            eprintln!("error: invariant violated");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
