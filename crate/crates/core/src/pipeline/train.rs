use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, Targets};
use crate::model::{ModelConfig, ModelKind, SurvivalModel};
use crate::simulator::Cohort;
use crate::survival::censored_mae;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Start the output bias at the training set's crude per-step hazard.
    pub init_from_crude_hazard: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 8,
            batch_size: 32,
            alpha: 0.1,
            epochs: 5,
            dropout: 0.1,
            optimizer: AdamConfig::default(),
            seed: 0,
            init_from_crude_hazard: true,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, t_max: usize, p_static: usize, q_temporal: usize) -> ModelConfig {
        ModelConfig {
            n_heads: self.n_heads,
            ..ModelConfig::new(self.d_model, self.n_layers, t_max, p_static, q_temporal).with_dropout(self.dropout)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        LossConfig::new(self.alpha)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training loss per patient, averaged over the epoch.
    pub train_loss: f64,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation MAE (the last
    /// epoch when there is no validation set).
    pub model: SurvivalModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
}

/// `T̂ = Σ_t Ŝ(t)` for every patient in `indices`.
pub fn predicted_times(model: &SurvivalModel, cohort: &Cohort, indices: &[usize]) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Ok(Vec::new());
    }
    let curves = model.predict_survival(&cohort.model_input(indices, None)?)?;
    Ok(curves.iter().map(|s| s.iter().sum()).collect())
}

/// Censored MAE of `model` on the patients in `indices`.
pub fn evaluate_mae(model: &SurvivalModel, cohort: &Cohort, indices: &[usize]) -> Result<f64> {
    let predicted = predicted_times(model, cohort, indices)?;
    let observed: Vec<f64> = indices.iter().map(|&i| cohort.records[i].o as f64).collect();
    let events: Vec<bool> = indices.iter().map(|&i| cohort.records[i].event()).collect();
    censored_mae(&predicted, &observed, &events)
}

/// `logit(1 − events / person-steps)` over `indices`.
fn crude_survival_logit(cohort: &Cohort, indices: &[usize]) -> Option<f64> {
    let events = indices.iter().filter(|&&i| cohort.records[i].event()).count() as f64;
    let exposure: f64 = indices.iter().map(|&i| cohort.records[i].o as f64).sum();
    if exposure == 0.0 {
        return None;
    }
    let q = (1.0 - events / exposure).clamp(1e-4, 1.0 - 1e-6);
    Some((q / (1.0 - q)).ln())
}

fn diverged(epoch: usize, batch: usize, cause: impl std::fmt::Display, model: &SurvivalModel) -> Error {
    Error::Divergence {
        epoch,
        batch,
        detail: format!("{cause}; parameter norms: {}", model.params().norm_summary()),
    }
}

/// Minibatch training with early stopping on validation censored MAE.
pub fn train(
    kind: ModelKind,
    cohort: &Cohort,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let loss_config = LossConfig::new(config.alpha)?;
    let model_config = config.model_config(cohort.t_max, cohort.p_static(), cohort.q_temporal());
    let mut model = SurvivalModel::build(kind, model_config, config.seed)?;
    if config.init_from_crude_hazard {
        if let Some(logit) = crude_survival_logit(cohort, train_idx) {
            model.set_output_logit(logit);
        }
    }
    let mut optimizer = AdamState::new(config.optimizer, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order = train_idx.to_vec();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, rows) in order.chunks(config.batch_size).enumerate() {
            let input = cohort.model_input(rows, None)?;
            let targets = Targets::new(
                rows.iter().map(|&i| cohort.records[i].o).collect(),
                rows.iter().map(|&i| cohort.records[i].event()).collect(),
                cohort.t_max,
            )?;
            let mut g = Graph::new(true, rng.next_u64());
            let step = (|| {
                let q = model.forward(&mut g, &input)?;
                let loss = total_loss(&mut g, q, &targets, loss_config)?;
                Ok::<_, Error>(loss)
            })();
            let loss = match step {
                Ok(loss) => loss,
                Err(e @ Error::NonFinite { .. }) => return Err(diverged(epoch, batch, e, &model)),
                Err(e) => return Err(e),
            };
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(diverged(epoch, batch, format!("loss {value}"), &model));
            }
            model.params_mut().zero_grad();
            match g.backward(loss, model.params_mut()) {
                Ok(()) => {}
                Err(e @ Error::NonFinite { .. }) => return Err(diverged(epoch, batch, e, &model)),
                Err(e) => return Err(e),
            }
            optimizer.step(model.params_mut())?;
            if model.params().ids().any(|id| !model.params().get(id).is_finite()) {
                return Err(diverged(epoch, batch, "non-finite parameter after update", &model));
            }
            epoch_loss += value;
        }
        let val_mae = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate_mae(&model, cohort, val_idx)?)
        };
        let train_loss = epoch_loss / order.len() as f64;
        log::info!(
            "{} epoch {epoch}: train loss {train_loss:.5}, val MAE {}",
            kind.name(),
            val_mae.map_or("n/a".into(), |m| format!("{m:.5}"))
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mae,
        });
        let score = val_mae.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b || val_mae.is_none()) {
            best = Some((score, epoch, model.params().snapshot()));
        }
    }

    let (best_epoch, best_val_mae) = match best {
        Some((score, epoch, snapshot)) => {
            model.params_mut().restore(&snapshot)?;
            (Some(epoch), score.is_finite().then_some(score))
        }
        None => (None, None),
    };
    model.params_mut().zero_grad();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_mae,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_dataset, SimConfig};

    fn cohort(n: usize) -> Cohort {
        generate_dataset(&SimConfig {
            n_patients: n,
            t_max: 8,
            taus: vec![8],
            seed: 4,
            ..SimConfig::default()
        })
        .unwrap()
        .cohort
    }

    fn tiny() -> TrainConfig {
        TrainConfig {
            d_model: 8,
            n_layers: 1,
            batch_size: 8,
            epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let c = cohort(20);
        let cfg = TrainConfig { epochs: 0, ..tiny() };
        let out = train(ModelKind::Dynst, &c, &[0, 1, 2], &[3, 4], &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, None);
        let fresh = SurvivalModel::build(ModelKind::Dynst, cfg.model_config(8, 6, 4), cfg.seed).unwrap();
        let mut fresh = fresh;
        fresh.set_output_logit(crude_survival_logit(&c, &[0, 1, 2]).unwrap());
        assert_eq!(out.model.params().snapshot(), fresh.params().snapshot());
    }

    #[test]
    fn training_is_reproducible() {
        let c = cohort(40);
        let idx: Vec<usize> = (0..30).collect();
        let val: Vec<usize> = (30..40).collect();
        for kind in [ModelKind::Dynst, ModelKind::StaticSt, ModelKind::Linear] {
            let a = train(kind, &c, &idx, &val, &tiny()).unwrap();
            let b = train(kind, &c, &idx, &val, &tiny()).unwrap();
            assert_eq!(a.model.params().snapshot(), b.model.params().snapshot());
            assert_eq!(a.history, b.history);
        }
    }

    #[test]
    fn best_checkpoint_matches_reported_mae() {
        let c = cohort(40);
        let idx: Vec<usize> = (0..30).collect();
        let val: Vec<usize> = (30..40).collect();
        let out = train(ModelKind::Linear, &c, &idx, &val, &TrainConfig { epochs: 4, ..tiny() }).unwrap();
        let best = out.best_val_mae.unwrap();
        let min = out.history.iter().filter_map(|h| h.val_mae).fold(f64::INFINITY, f64::min);
        assert_eq!(best, min);
        assert_eq!(evaluate_mae(&out.model, &c, &val).unwrap(), best);
    }

    #[test]
    fn single_patient_cross_entropy_decreases() {
        let c = cohort(5);
        let cfg = TrainConfig {
            alpha: 0.0,
            epochs: 6,
            batch_size: 1,
            dropout: 0.0,
            optimizer: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..tiny()
        };
        let out = train(ModelKind::Dynst, &c, &[0], &[], &cfg).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|h| h.train_loss).collect();
        assert!(losses.windows(2).take(3).all(|w| w[1] < w[0]), "{losses:?}");
    }
}
