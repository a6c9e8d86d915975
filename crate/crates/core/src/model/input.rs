use crate::error::{Error, Result};

/// A batch of patients in model layout.
///
/// `statics` is `batch × p`; `temporal` is `batch × t_max × q`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub batch: usize,
    pub t_max: usize,
    pub p: usize,
    pub q: usize,
    pub statics: Vec<f64>,
    pub temporal: Vec<f64>,
}

impl ModelInput {
    pub fn new(batch: usize, t_max: usize, p: usize, q: usize, statics: Vec<f64>, temporal: Vec<f64>) -> Result<Self> {
        if statics.len() != batch * p || temporal.len() != batch * t_max * q {
            return Err(Error::Shape {
                op: "model_input",
                lhs: vec![batch, t_max, p, q],
                rhs: vec![statics.len(), temporal.len()],
            });
        }
        Ok(Self {
            batch,
            t_max,
            p,
            q,
            statics,
            temporal,
        })
    }

    /// Stacks single-patient inputs; every patient must share `t_max`, `p`, `q`.
    pub fn stack(items: &[ModelInput]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
        let mut statics = Vec::new();
        let mut temporal = Vec::new();
        let mut batch = 0;
        for it in items {
            if (it.t_max, it.p, it.q) != (first.t_max, first.p, first.q) {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: vec![first.t_max, first.p, first.q],
                    rhs: vec![it.t_max, it.p, it.q],
                });
            }
            statics.extend_from_slice(&it.statics);
            temporal.extend_from_slice(&it.temporal);
            batch += it.batch;
        }
        Self::new(batch, first.t_max, first.p, first.q, statics, temporal)
    }

    /// Patient `i` as a batch of one.
    pub fn row(&self, i: usize) -> Self {
        let tq = self.t_max * self.q;
        Self {
            batch: 1,
            t_max: self.t_max,
            p: self.p,
            q: self.q,
            statics: self.statics[i * self.p..(i + 1) * self.p].to_vec(),
            temporal: self.temporal[i * tq..(i + 1) * tq].to_vec(),
        }
    }

    /// Patients `[start, start + len)`.
    pub fn rows(&self, start: usize, len: usize) -> Self {
        let tq = self.t_max * self.q;
        Self {
            batch: len,
            t_max: self.t_max,
            p: self.p,
            q: self.q,
            statics: self.statics[start * self.p..(start + len) * self.p].to_vec(),
            temporal: self.temporal[start * tq..(start + len) * tq].to_vec(),
        }
    }

    /// Same patients with no temporal features.
    pub fn without_temporal(&self) -> Self {
        Self {
            q: 0,
            temporal: Vec::new(),
            ..self.clone()
        }
    }
}
