use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::input::ModelInput;
use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Discrete-time logistic baseline: `q̂(t) = sigmoid(w·Z + b_t)`.
///
/// Ignores temporal features and has no time-by-covariate interaction.
#[derive(Debug, Clone)]
pub struct LinearBaseline {
    p_static: usize,
    t_max: usize,
    params: ParamStore,
    weights: ParamId,
    intercepts: ParamId,
}

impl LinearBaseline {
    pub fn new(p_static: usize, t_max: usize, seed: u64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = if p_static == 0 { 0.0 } else { 1.0 / (p_static as f64).sqrt() };
        let w = (0..p_static).map(|_| rng.random_range(-1.0..=1.0) * bound).collect();
        let mut params = ParamStore::new();
        let weights = params.add("linear.w", Tensor::new(vec![p_static, 1], w)?);
        let intercepts = params.add("linear.b", Tensor::zeros(&[t_max]));
        Ok(Self {
            p_static,
            t_max,
            params,
            weights,
            intercepts,
        })
    }

    pub fn from_params(p_static: usize, t_max: usize, stored: &ParamStore) -> Result<Self> {
        let mut model = Self::new(p_static, t_max, 0)?;
        model.params.load_values_from(stored)?;
        Ok(model)
    }

    pub fn p_static(&self) -> usize {
        self.p_static
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_output_logit(&mut self, logit: f64) {
        self.params.get_mut(self.intercepts).data_mut().fill(logit);
    }

    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<NodeId> {
        if input.p != self.p_static || input.t_max != self.t_max {
            return Err(Error::Shape {
                op: "linear_baseline",
                lhs: vec![self.t_max, self.p_static],
                rhs: vec![input.t_max, input.p],
            });
        }
        let z = g.constant(Tensor::new(vec![input.batch, input.p], input.statics.clone())?)?;
        let w = g.param(&self.params, self.weights)?;
        let b = g.param(&self.params, self.intercepts)?;
        let risk = g.matmul(z, w)?;
        let logits = g.add(risk, b)?;
        g.sigmoid(logits)
    }
}
