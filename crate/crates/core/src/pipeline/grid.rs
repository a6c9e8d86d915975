use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::train::{train, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelKind, SurvivalModel};
use crate::simulator::Cohort;

/// Candidate values for every tuned hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub d_model: Vec<usize>,
    pub n_layers: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub alpha: Vec<f64>,
    pub epochs: Vec<usize>,
    /// Evaluate at most this many cells, in enumeration order.
    pub budget: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            d_model: vec![32, 48, 64],
            n_layers: vec![2, 3, 4],
            batch_size: vec![16, 32],
            alpha: vec![0.0, 0.1, 0.2],
            epochs: vec![1, 2, 3, 4, 5],
            budget: None,
        }
    }
}

impl GridConfig {
    /// A single cell.
    pub fn single(config: &TrainConfig) -> Self {
        Self {
            d_model: vec![config.d_model],
            n_layers: vec![config.n_layers],
            batch_size: vec![config.batch_size],
            alpha: vec![config.alpha],
            epochs: vec![config.epochs],
            budget: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_model.is_empty()
            || self.n_layers.is_empty()
            || self.batch_size.is_empty()
            || self.alpha.is_empty()
            || self.epochs.is_empty()
        {
            return Err(Error::Config("every grid dimension needs at least one value".into()));
        }
        if self.budget == Some(0) {
            return Err(Error::Config("grid budget must be positive".into()));
        }
        Ok(())
    }

    /// Cells in enumeration order: `d_model`, `n_layers`, `batch_size`,
    /// `alpha`, then `epochs` (ascending) innermost. The linear baseline has
    /// no width or depth, so only the first value of each is used for it.
    pub fn cells(&self, kind: ModelKind) -> Vec<GridCell> {
        let (d_model, n_layers) = if kind == ModelKind::Linear {
            (&self.d_model[..1], &self.n_layers[..1])
        } else {
            (&self.d_model[..], &self.n_layers[..])
        };
        let mut epochs = self.epochs.clone();
        epochs.sort_unstable();
        epochs.dedup();
        let mut cells = Vec::new();
        for &d in d_model {
            for &m in n_layers {
                for &b in &self.batch_size {
                    for &a in &self.alpha {
                        for &e in &epochs {
                            cells.push(GridCell {
                                d_model: d,
                                n_layers: m,
                                batch_size: b,
                                alpha: a,
                                epochs: e,
                            });
                        }
                    }
                }
            }
        }
        cells.truncate(self.budget.unwrap_or(usize::MAX));
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub d_model: usize,
    pub n_layers: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub epochs: usize,
}

impl GridCell {
    fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            batch_size: self.batch_size,
            alpha: self.alpha,
            epochs: self.epochs,
            ..base.clone()
        }
    }

    fn same_run(&self, other: &GridCell) -> bool {
        (self.d_model, self.n_layers, self.batch_size) == (other.d_model, other.n_layers, other.batch_size)
            && self.alpha == other.alpha
    }

    /// Selection order: lower validation MAE, then smaller `d_model`, then
    /// smaller `n_layers`, then the remaining fields.
    fn rank(a: &(GridCell, f64), b: &(GridCell, f64)) -> Ordering {
        a.1.total_cmp(&b.1)
            .then(a.0.d_model.cmp(&b.0.d_model))
            .then(a.0.n_layers.cmp(&b.0.n_layers))
            .then(a.0.batch_size.cmp(&b.0.batch_size))
            .then(a.0.alpha.total_cmp(&b.0.alpha))
            .then(a.0.epochs.cmp(&b.0.epochs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best: GridCell,
    pub best_val_mae: f64,
    pub model: SurvivalModel,
    pub cells: Vec<CellResult>,
    /// Training epochs actually run.
    pub epochs_trained: usize,
}

/// Exhaustive search over `grid`, selecting on validation censored MAE.
///
/// Cells differing only in `epochs` share one run: with early stopping, the
/// cell with `k` epochs scores the best validation MAE among the first `k`.
pub fn grid_search(
    kind: ModelKind,
    cohort: &Cohort,
    train_idx: &[usize],
    val_idx: &[usize],
    grid: &GridConfig,
    base: &TrainConfig,
) -> Result<GridOutcome> {
    grid.validate()?;
    if val_idx.is_empty() {
        return Err(Error::Config("grid search needs a validation set".into()));
    }
    let cells = grid.cells(kind);
    let mut results = Vec::with_capacity(cells.len());
    let mut best: Option<(GridCell, f64, SurvivalModel)> = None;
    let mut epochs_trained = 0;
    let mut start = 0;
    while start < cells.len() {
        let end = start + cells[start..].iter().take_while(|c| c.same_run(&cells[start])).count();
        let group = &cells[start..end];
        let longest = group[group.len() - 1];
        let outcome = train(kind, cohort, train_idx, val_idx, &longest.apply(base))?;
        epochs_trained += outcome.history.len();
        let mut group_best: Option<(GridCell, f64)> = None;
        for cell in group {
            let val_mae = outcome.history[..cell.epochs]
                .iter()
                .filter_map(|h| h.val_mae)
                .fold(f64::INFINITY, f64::min);
            results.push(CellResult { cell: *cell, val_mae });
            let cand = (*cell, val_mae);
            if group_best.as_ref().is_none_or(|g| GridCell::rank(&cand, g) == Ordering::Less) {
                group_best = Some(cand);
            }
        }
        if let Some((cell, mae)) = group_best {
            let improves = best
                .as_ref()
                .is_none_or(|(c, m, _)| GridCell::rank(&(cell, mae), &(*c, *m)) == Ordering::Less);
            if improves {
                best = Some((cell, mae, outcome.model));
            }
        }
        start = end;
    }
    let (best, best_val_mae, model) = best.ok_or_else(|| Error::Config("empty grid".into()))?;
    log::info!("{} grid: best {best:?} with val MAE {best_val_mae:.5}", kind.name());
    Ok(GridOutcome {
        best,
        best_val_mae,
        model,
        cells: results,
        epochs_trained,
    })
}
