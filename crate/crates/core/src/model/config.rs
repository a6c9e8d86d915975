use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a survival transformer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub t_max: usize,
    pub p_static: usize,
    pub q_temporal: usize,
}

impl ModelConfig {
    pub fn new(d_model: usize, n_layers: usize, t_max: usize, p_static: usize, q_temporal: usize) -> Self {
        Self {
            d_model,
            n_layers,
            n_heads: 8,
            d_ff: 4 * d_model,
            dropout: 0.1,
            t_max,
            p_static,
            q_temporal,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("d_model, n_layers, n_heads and d_ff must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model {} must be even", self.d_model)));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let embeddings = (self.p_static + 1) * d + (self.q_temporal + 1) * d;
        let attention = 4 * (d * d + d);
        let norms = 2 * 2 * d;
        let feed_forward = d * f + f + f * d + d;
        let head = d * d + d + d + 1;
        embeddings + self.n_layers * (attention + norms + feed_forward) + head
    }
}
