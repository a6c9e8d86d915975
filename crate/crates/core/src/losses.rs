//! Censoring-aware training objective, built on the autodiff graph.
//!
//! With `Ŝ_i(t) = ∏_{τ≤t} q̂_i(τ)` and `T̂_i = Σ_t Ŝ_i(t)`:
//!
//! - `L1` is the survival cross-entropy: events reward `Ŝ(t)` before the
//!   event time and `1 − Ŝ(t)` from it on; censored patients reward `Ŝ(t)`
//!   up to and including the censoring time.
//! - `L2` is the censored absolute error of `T̂` (absolute error for events,
//!   shortfall below the censoring time otherwise).
//! - the total is `Σ_i (1−α)·L1_i + α·L2_i`, summed (not averaged) over the
//!   batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
}

impl LossConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self { alpha })
    }
}

/// Observed times (1-based) and event indicators for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub observed: Vec<usize>,
    pub events: Vec<bool>,
}

impl Targets {
    pub fn new(observed: Vec<usize>, events: Vec<bool>, t_max: usize) -> Result<Self> {
        if observed.len() != events.len() {
            return Err(Error::Shape {
                op: "targets",
                lhs: vec![observed.len()],
                rhs: vec![events.len()],
            });
        }
        if let Some(o) = observed.iter().find(|&&o| o == 0 || o > t_max) {
            return Err(Error::Data(format!("observed time {o} outside 1..={t_max}")));
        }
        Ok(Self { observed, events })
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }
}

/// Graph nodes shared by both losses.
#[derive(Debug, Clone, Copy)]
pub struct SurvivalNodes {
    /// `Ŝ`, `[batch, t_max]`.
    pub survival: NodeId,
    /// `T̂ = Σ_t Ŝ(t)`, `[batch]`.
    pub expected_time: NodeId,
}

fn check_q(g: &Graph, q: NodeId, targets: &Targets) -> Result<(usize, usize)> {
    let shape = g.shape(q);
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape {
            op: "loss",
            lhs: shape.to_vec(),
            rhs: vec![targets.len()],
        });
    }
    if let Some(o) = targets.observed.iter().find(|&&o| o == 0 || o > shape[1]) {
        return Err(Error::Data(format!("observed time {o} outside 1..={}", shape[1])));
    }
    Ok((shape[0], shape[1]))
}

/// `Ŝ` and `T̂` from per-step `q̂` of shape `[batch, t_max]`.
pub fn survival_nodes(g: &mut Graph, q: NodeId) -> Result<SurvivalNodes> {
    let q = g.clamp(q, LOG_CLAMP, 1.0)?;
    let log_q = g.log(q)?;
    let log_s = g.cumsum(log_q, 1)?;
    let survival = g.exp(log_s)?;
    let expected_time = g.sum(survival, 1)?;
    Ok(SurvivalNodes {
        survival,
        expected_time,
    })
}

/// Per-patient survival cross-entropy, `[batch]`.
pub fn loss_l1(g: &mut Graph, nodes: &SurvivalNodes, targets: &Targets) -> Result<NodeId> {
    let (b, t) = check_q(g, nodes.survival, targets)?;
    let mut alive = vec![0.0; b * t];
    let mut failed = vec![0.0; b * t];
    for (i, (&o, &event)) in targets.observed.iter().zip(&targets.events).enumerate() {
        for step in 1..=t {
            let k = i * t + step - 1;
            if event {
                if step < o {
                    alive[k] = 1.0;
                } else {
                    failed[k] = 1.0;
                }
            } else if step <= o {
                alive[k] = 1.0;
            }
        }
    }
    let s = g.clamp(nodes.survival, LOG_CLAMP, 1.0 - LOG_CLAMP)?;
    let log_s = g.log(s)?;
    let one_minus = g.scale(nodes.survival, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let one_minus = g.clamp(one_minus, LOG_CLAMP, 1.0 - LOG_CLAMP)?;
    let log_f = g.log(one_minus)?;
    let alive = g.constant(Tensor::new(vec![b, t], alive)?)?;
    let failed = g.constant(Tensor::new(vec![b, t], failed)?)?;
    let a = g.mul(log_s, alive)?;
    let f = g.mul(log_f, failed)?;
    let ll = g.add(a, f)?;
    let ll = g.sum(ll, 1)?;
    g.scale(ll, -1.0)
}

/// Per-patient censored absolute error of `T̂`, `[batch]`.
pub fn loss_l2(g: &mut Graph, nodes: &SurvivalNodes, targets: &Targets) -> Result<NodeId> {
    let (b, _) = check_q(g, nodes.survival, targets)?;
    let observed = g.constant(Tensor::vector(targets.observed.iter().map(|&o| o as f64).collect()))?;
    let diff = g.sub(observed, nodes.expected_time)?;
    let abs = g.abs(diff)?;
    let hinge = g.relu(diff)?;
    let ev: Vec<f64> = targets.events.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
    let cens: Vec<f64> = ev.iter().map(|e| 1.0 - e).collect();
    let ev = g.constant(Tensor::new(vec![b], ev)?)?;
    let cens = g.constant(Tensor::new(vec![b], cens)?)?;
    let a = g.mul(abs, ev)?;
    let h = g.mul(hinge, cens)?;
    g.add(a, h)
}

/// Scalar training loss `Σ_i (1−α)·L1_i + α·L2_i` for `q̂` of shape
/// `[batch, t_max]`.
pub fn total_loss(g: &mut Graph, q: NodeId, targets: &Targets, config: LossConfig) -> Result<NodeId> {
    let nodes = survival_nodes(g, q)?;
    let l1 = loss_l1(g, &nodes, targets)?;
    let l2 = loss_l2(g, &nodes, targets)?;
    let l1 = g.scale(l1, 1.0 - config.alpha)?;
    let l2 = g.scale(l2, config.alpha)?;
    let per_patient = g.add(l1, l2)?;
    g.sum_all(per_patient)
}
