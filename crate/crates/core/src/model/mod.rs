//! Hazard models: the dynamic survival transformer, its static-only variant
//! and a linear discrete-time baseline.

mod config;
mod input;
mod linear;
mod positional;
mod transformer;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::ModelConfig;
pub use input::ModelInput;
pub use linear::LinearBaseline;
pub use positional::positional_encoding;
pub use transformer::DynstModel;

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};

/// Rows per inference pass in [`SurvivalModel::predict_q`].
const INFERENCE_CHUNK: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Static and temporal features.
    Dynst,
    /// Same architecture without temporal features.
    StaticSt,
    /// `sigmoid(w·Z + b_t)`.
    Linear,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dynst => "dynst",
            ModelKind::StaticSt => "static_st",
            ModelKind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynst" => Ok(Self::Dynst),
            "static_st" | "static" => Ok(Self::StaticSt),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown model kind {other}"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    t_max: usize,
    p_static: usize,
    q_temporal: usize,
    transformer: Option<ModelConfig>,
}

/// A trainable model producing `q̂ = 1 − ĥ` per patient and step.
#[derive(Debug, Clone)]
pub enum SurvivalModel {
    Transformer { kind: ModelKind, model: DynstModel },
    Linear(LinearBaseline),
}

impl SurvivalModel {
    /// Builds an untrained model. `q_temporal` is the width of the temporal
    /// inputs the model will be fed; the static variant and the linear
    /// baseline discard them.
    pub fn build(kind: ModelKind, config: ModelConfig, seed: u64) -> Result<Self> {
        match kind {
            ModelKind::Dynst => Ok(Self::Transformer {
                kind,
                model: DynstModel::new(config, seed)?,
            }),
            ModelKind::StaticSt => Ok(Self::Transformer {
                kind,
                model: DynstModel::new(
                    ModelConfig {
                        q_temporal: 0,
                        ..config
                    },
                    seed,
                )?,
            }),
            ModelKind::Linear => Ok(Self::Linear(LinearBaseline::new(config.p_static, config.t_max, seed)?)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Transformer { kind, .. } => *kind,
            Self::Linear(_) => ModelKind::Linear,
        }
    }

    pub fn t_max(&self) -> usize {
        match self {
            Self::Transformer { model, .. } => model.config().t_max,
            Self::Linear(m) => m.t_max(),
        }
    }

    pub fn transformer_config(&self) -> Option<&ModelConfig> {
        match self {
            Self::Transformer { model, .. } => Some(model.config()),
            Self::Linear(_) => None,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Self::Transformer { model, .. } => model.params(),
            Self::Linear(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::Transformer { model, .. } => model.params_mut(),
            Self::Linear(m) => m.params_mut(),
        }
    }

    pub fn set_output_logit(&mut self, logit: f64) {
        match self {
            Self::Transformer { model, .. } => model.set_output_logit(logit),
            Self::Linear(m) => m.set_output_logit(logit),
        }
    }

    /// `q̂` node of shape `[batch, t_max]`.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<NodeId> {
        match self {
            Self::Transformer {
                kind: ModelKind::StaticSt,
                model,
            } => model.static_variant_forward(g, input),
            Self::Transformer { model, .. } => model.forward(g, input),
            Self::Linear(m) => m.forward(g, input),
        }
    }

    /// Evaluation-mode `q̂`, row-major `batch × t_max`.
    pub fn predict_q(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(input.batch * input.t_max);
        let mut start = 0;
        while start < input.batch {
            let len = INFERENCE_CHUNK.min(input.batch - start);
            let mut g = Graph::new(false, 0);
            let q = self.forward(&mut g, &input.rows(start, len))?;
            out.extend_from_slice(g.value(q));
            start += len;
        }
        Ok(out)
    }

    /// Predicted survival curves `Ŝ(t) = ∏ q̂`, one row per patient.
    pub fn predict_survival(&self, input: &ModelInput) -> Result<Vec<Vec<f64>>> {
        let q = self.predict_q(input)?;
        Ok(q.chunks(input.t_max.max(1))
            .map(|row| {
                let mut s = 1.0;
                row.iter()
                    .map(|q| {
                        s *= q;
                        s
                    })
                    .collect()
            })
            .collect())
    }

    fn header(&self, p_static: usize, q_temporal: usize) -> Header {
        Header {
            kind: self.kind(),
            t_max: self.t_max(),
            p_static,
            q_temporal,
            transformer: self.transformer_config().copied(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (p, q) = match self {
            Self::Transformer { model, .. } => (model.config().p_static, model.config().q_temporal),
            Self::Linear(m) => (m.p_static(), 0),
        };
        let header = serde_json::to_value(self.header(p, q))?;
        self.params().save(path, header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, header) = ParamStore::load(path)?;
        let header: Header = serde_json::from_value(header)?;
        match (header.kind, header.transformer) {
            (ModelKind::Linear, _) => Ok(Self::Linear(LinearBaseline::from_params(
                header.p_static,
                header.t_max,
                &store,
            )?)),
            (kind, Some(cfg)) => Ok(Self::Transformer {
                kind,
                model: DynstModel::from_params(cfg, &store)?,
            }),
            (kind, None) => Err(Error::Data(format!(
                "checkpoint for {} lacks a transformer config",
                kind.name()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip_predicts_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            d_ff: 16,
            ..ModelConfig::new(8, 1, 4, 2, 3)
        };
        let input = ModelInput::new(
            2,
            4,
            2,
            3,
            vec![1.0, 0.0, 0.0, 1.0],
            (0..24).map(|i| (i as f64 * 0.3).sin()).collect(),
        )
        .unwrap();
        for kind in [ModelKind::Dynst, ModelKind::StaticSt, ModelKind::Linear] {
            let model = SurvivalModel::build(kind, cfg, 5).unwrap();
            let path = dir.path().join(format!("{}.json", kind.name()));
            model.save(&path).unwrap();
            let back = SurvivalModel::load(&path).unwrap();
            assert_eq!(back.kind(), kind);
            assert_eq!(model.predict_q(&input).unwrap(), back.predict_q(&input).unwrap());
        }
    }
}
