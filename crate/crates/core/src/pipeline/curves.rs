use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::SurvivalModel;
use crate::simulator::Cohort;

/// Writes `<stem>_patients.csv` (`id,S1,…,S_tmax`, one row per patient)
/// and `<stem>_mean.csv` (`t,mean_survival`) into `dir`.
pub fn emit_curves(
    model: &SurvivalModel,
    cohort: &Cohort,
    indices: &[usize],
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf)> {
    if indices.is_empty() {
        return Err(Error::Data("no patients to plot".into()));
    }
    let curves = model.predict_survival(&cohort.model_input(indices, None)?)?;
    let t_max = cohort.t_max;
    let mut patients = String::from("id");
    for t in 1..=t_max {
        write!(patients, ",S{t}").ok();
    }
    patients.push('\n');
    let mut mean = vec![0.0; t_max];
    for (&i, curve) in indices.iter().zip(&curves) {
        write!(patients, "{}", cohort.records[i].id).ok();
        for (t, s) in curve.iter().enumerate() {
            write!(patients, ",{s}").ok();
            mean[t] += s / indices.len() as f64;
        }
        patients.push('\n');
    }
    let mut cohort_mean = String::from("t,mean_survival\n");
    for (t, s) in mean.iter().enumerate() {
        writeln!(cohort_mean, "{},{s}", t + 1).ok();
    }
    std::fs::create_dir_all(dir)?;
    let a = dir.join(format!("{stem}_patients.csv"));
    let b = dir.join(format!("{stem}_mean.csv"));
    std::fs::write(&a, patients)?;
    std::fs::write(&b, cohort_mean)?;
    Ok((a, b))
}
