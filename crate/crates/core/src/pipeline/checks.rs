//! Self-checks run by the `gradcheck` command and the smoke experiment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::Result;
use crate::losses::{total_loss, LossConfig, Targets};
use crate::model::{ModelConfig, ModelInput, ModelKind, SurvivalModel};
use crate::survival::{censored_mae, expected_survival_time, rmst, survival_from_hazard, HazardCurve};

const FD_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const CAUSALITY_TOLERANCE: f64 = 1e-12;
pub const ORACLE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-3)`: relative error with an absolute floor
/// for gradients near zero.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// How to draw inputs for an op.
#[derive(Clone, Copy)]
enum Draw {
    Any,
    Positive,
    /// Magnitude at least 0.1, for ops with a kink at zero.
    AwayFromZero,
    /// Uniform on `(-1, 1)` but at least 0.05 from `±0.5`.
    AwayFromHalf,
}

fn draw(rng: &mut ChaCha8Rng, how: Draw, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| match how {
            Draw::Any => rng.random_range(-1.5..1.5),
            Draw::Positive => rng.random_range(0.2..2.0),
            Draw::AwayFromZero => {
                let m = rng.random_range(0.1..1.5);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            }
            Draw::AwayFromHalf => loop {
                let v: f64 = rng.random_range(-1.0..1.0);
                if (v.abs() - 0.5).abs() > 0.05 {
                    break v;
                }
            },
        })
        .collect()
}

type OpFn = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

fn weighted_output(g: &mut Graph, out: NodeId, weights: &[f64]) -> Result<NodeId> {
    let w = g.constant(Tensor::new(g.shape(out).to_vec(), weights.to_vec())?)?;
    let y = g.mul(out, w)?;
    g.sum_all(y)
}

fn eval_op(inputs: &[Tensor], op: &OpFn, weights: &[f64], seed: u64) -> Result<f64> {
    let mut g = Graph::new(true, seed);
    let ids = inputs
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = op(&mut g, &ids)?;
    let loss = weighted_output(&mut g, out, weights)?;
    Ok(g.scalar(loss))
}

fn check_op(name: &str, shapes: &[&[usize]], how: Draw, op: &OpFn, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::new(s.to_vec(), draw(rng, how, s.iter().product())))
        .collect::<Result<_>>()?;
    let seed = rng.random();
    let mut g = Graph::new(true, seed);
    let ids = inputs
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = op(&mut g, &ids)?;
    let weights = draw(rng, Draw::Any, g.value(out).len());
    let loss = weighted_output(&mut g, out, &weights)?;
    let grads = g.gradients(loss)?;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; input.len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= FD_STEP;
            let numeric = (eval_op(&plus, op, &weights, seed)? - eval_op(&minus, op, &weights, seed)?) / (2.0 * FD_STEP);
            worst = worst.max(gradient_error(a, numeric));
        }
    }
    Ok(CheckResult::new(
        format!("grad:{name}"),
        worst < PRIMITIVE_TOLERANCE,
        format!("max relative error {worst:.3e}"),
    ))
}

/// Finite-difference checks of every differentiable primitive on random
/// inputs.
pub fn primitive_gradcheck(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<bool> = (0..16).map(|k| k % 4 > k / 4).collect();
    type Case<'a> = (&'static str, Vec<&'a [usize]>, Draw, Box<OpFn>);
    let cases: Vec<Case> = vec![
        ("add", vec![&[2, 3], &[3]], Draw::Any, Box::new(|g, x| g.add(x[0], x[1]))),
        ("sub", vec![&[2, 3], &[2, 1]], Draw::Any, Box::new(|g, x| g.sub(x[0], x[1]))),
        ("mul", vec![&[2, 3], &[2, 3]], Draw::Any, Box::new(|g, x| g.mul(x[0], x[1]))),
        ("matmul", vec![&[2, 3], &[3, 4]], Draw::Any, Box::new(|g, x| g.matmul(x[0], x[1]))),
        (
            "matmul_batched",
            vec![&[2, 2, 3], &[2, 3, 2]],
            Draw::Any,
            Box::new(|g, x| g.matmul(x[0], x[1])),
        ),
        (
            "linear",
            vec![&[2, 3, 4], &[4, 5], &[5]],
            Draw::Any,
            Box::new(|g, x| g.linear(x[0], x[1], x[2])),
        ),
        ("sigmoid", vec![&[3, 4]], Draw::Any, Box::new(|g, x| g.sigmoid(x[0]))),
        ("log", vec![&[3, 4]], Draw::Positive, Box::new(|g, x| g.log(x[0]))),
        ("exp", vec![&[3, 4]], Draw::Any, Box::new(|g, x| g.exp(x[0]))),
        ("abs", vec![&[3, 4]], Draw::AwayFromZero, Box::new(|g, x| g.abs(x[0]))),
        ("relu", vec![&[3, 4]], Draw::AwayFromZero, Box::new(|g, x| g.relu(x[0]))),
        ("scale", vec![&[3, 4]], Draw::Any, Box::new(|g, x| g.scale(x[0], -1.7))),
        ("add_scalar", vec![&[3, 4]], Draw::Any, Box::new(|g, x| g.add_scalar(x[0], 0.3))),
        (
            "clamp",
            vec![&[3, 4]],
            Draw::AwayFromHalf,
            Box::new(|g, x| g.clamp(x[0], -0.5, 0.5)),
        ),
        ("softmax", vec![&[3, 4]], Draw::Any, Box::new(|g, x| g.softmax(x[0], 1))),
        ("softmax_axis0", vec![&[3, 4]], Draw::Any, Box::new(|g, x| g.softmax(x[0], 0))),
        ("layer_norm", vec![&[3, 5]], Draw::Any, Box::new(|g, x| g.layer_norm(x[0], 1))),
        ("dropout", vec![&[4, 5]], Draw::Any, Box::new(|g, x| g.dropout(x[0], 0.3))),
        (
            "concat",
            vec![&[2, 3], &[2, 2]],
            Draw::Any,
            Box::new(|g, x| g.concat(&[x[0], x[1]], 1)),
        ),
        ("slice", vec![&[3, 5]], Draw::Any, Box::new(|g, x| g.slice(x[0], 1, 1, 3))),
        ("sum", vec![&[3, 4]], Draw::Any, Box::new(|g, x| g.sum(x[0], 0))),
        ("mean", vec![&[3, 4]], Draw::Any, Box::new(|g, x| g.mean(x[0], 1))),
        ("cumsum", vec![&[3, 4]], Draw::Any, Box::new(|g, x| g.cumsum(x[0], 1))),
        (
            "masked_fill",
            vec![&[2, 4, 4]],
            Draw::Any,
            Box::new(move |g, x| g.masked_fill(x[0], &mask, &[4, 4], -3.0)),
        ),
        (
            "causal_softmax",
            vec![&[2, 4, 4]],
            Draw::Any,
            Box::new(|g, x| g.causal_softmax(x[0], 0.7)),
        ),
        ("reshape", vec![&[3, 4]], Draw::Any, Box::new(|g, x| g.reshape(x[0], &[2, 6]))),
        (
            "permute",
            vec![&[2, 3, 4]],
            Draw::Any,
            Box::new(|g, x| g.permute(x[0], &[2, 0, 1])),
        ),
        ("transpose_last", vec![&[2, 3, 4]], Draw::Any, Box::new(|g, x| g.transpose_last(x[0]))),
    ];
    cases
        .iter()
        .map(|(name, shapes, how, op)| check_op(name, shapes, *how, op.as_ref(), &mut rng))
        .collect()
}

fn toy_batch(rng: &mut ChaCha8Rng, batch: usize, t_max: usize, p: usize, q: usize) -> Result<ModelInput> {
    let statics = (0..batch * p).map(|_| f64::from(rng.random::<bool>() as u8)).collect();
    let temporal = (0..batch * t_max * q).map(|_| rng.random_range(-2.0..2.0)).collect();
    ModelInput::new(batch, t_max, p, q, statics, temporal)
}

fn model_loss(model: &SurvivalModel, input: &ModelInput, targets: &Targets, config: LossConfig) -> Result<f64> {
    let mut g = Graph::new(false, 0);
    let q = model.forward(&mut g, input)?;
    let loss = total_loss(&mut g, q, targets, config)?;
    Ok(g.scalar(loss))
}

/// Finite-difference check of the full training loss with respect to every
/// parameter of a small model, on a batch of 3 patients with `t_max = 6`.
pub fn loss_gradcheck(kind: ModelKind, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, t_max, p, q) = (3, 6, 6, 4);
    let config = ModelConfig {
        d_ff: 16,
        ..ModelConfig::new(8, 2, t_max, p, q).with_dropout(0.0)
    };
    let mut model = SurvivalModel::build(kind, config, rng.random())?;
    let input = toy_batch(&mut rng, batch, t_max, p, q)?;
    let targets = Targets::new(vec![2, 6, 4], vec![true, false, true], t_max)?;
    let loss_config = LossConfig::new(0.3)?;

    let mut g = Graph::new(false, 0);
    let qhat = model.forward(&mut g, &input)?;
    let loss = total_loss(&mut g, qhat, &targets, loss_config)?;
    model.params_mut().zero_grad();
    g.backward(loss, model.params_mut())?;
    let analytic: Vec<Vec<f64>> = model
        .params()
        .ids()
        .map(|id| {
            let t = model.params().get(id);
            t.grad().map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()])
        })
        .collect();

    let ids: Vec<_> = model.params().ids().collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (&id, grads) in ids.iter().zip(&analytic) {
        for (j, &a) in grads.iter().enumerate() {
            let original = model.params().get(id).data()[j];
            model.params_mut().get_mut(id).data_mut()[j] = original + FD_STEP;
            let up = model_loss(&model, &input, &targets, loss_config)?;
            model.params_mut().get_mut(id).data_mut()[j] = original - FD_STEP;
            let down = model_loss(&model, &input, &targets, loss_config)?;
            model.params_mut().get_mut(id).data_mut()[j] = original;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(gradient_error(a, numeric));
            checked += 1;
        }
    }
    Ok(CheckResult::new(
        format!("grad:loss:{}", kind.name()),
        worst < END_TO_END_TOLERANCE,
        format!("{checked} parameters, max relative error {worst:.3e}"),
    ))
}

/// Perturbs temporal inputs after step `t` for each cut `t` and checks that
/// `q̂(1..=t)` is unchanged.
pub fn causality_check(model: &SurvivalModel, input: &ModelInput, cuts: &[usize], seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_max, q) = (input.t_max, input.q);
    let base = model.predict_q(input)?;
    let mut worst = 0.0f64;
    for i in 0..input.batch {
        let row = input.row(i);
        let copies: Vec<ModelInput> = cuts
            .iter()
            .map(|&cut| {
                let mut c = row.clone();
                for v in &mut c.temporal[(cut + 1).min(t_max) * q..] {
                    *v += rng.random_range(-5.0..5.0);
                }
                c
            })
            .collect();
        let perturbed = model.predict_q(&ModelInput::stack(&copies)?)?;
        for (k, &cut) in cuts.iter().enumerate() {
            for t in 0..=cut.min(t_max - 1) {
                let diff = (perturbed[k * t_max + t] - base[i * t_max + t]).abs();
                worst = worst.max(diff);
            }
        }
    }
    Ok(CheckResult::new(
        "causality",
        worst < CAUSALITY_TOLERANCE,
        format!(
            "{} patients x {} cuts, max change before the cut {worst:.3e}",
            input.batch,
            cuts.len()
        ),
    ))
}

/// Compares the survival functions with direct loop evaluations on random
/// curves.
pub fn survival_math_check(seed: u64, n_curves: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_max = 24;
    let mut worst = 0.0f64;
    let mut curves = Vec::with_capacity(n_curves);
    let mut raw = Vec::with_capacity(n_curves);
    for _ in 0..n_curves {
        let h: Vec<f64> = (0..t_max).map(|_| rng.random_range(0.0..0.3)).collect();
        let s = survival_from_hazard(&HazardCurve::new(h.clone())?);
        for t in 0..t_max {
            let mut brute = 1.0;
            for hk in &h[..=t] {
                brute *= 1.0 - hk;
            }
            worst = worst.max((s.values()[t] - brute).abs());
        }
        let mut total = 0.0;
        for t in 0..t_max {
            total += s.values()[t];
        }
        worst = worst.max((expected_survival_time(&s) - total).abs());
        raw.push(s.values().to_vec());
        curves.push(s);
    }
    for tau in [1, 8, 12, 16, t_max] {
        let mut brute = 0.0;
        for c in &raw {
            for v in &c[..tau] {
                brute += v / n_curves as f64;
            }
        }
        worst = worst.max((rmst(&curves, tau)? - brute).abs());
    }
    let predicted: Vec<f64> = curves.iter().map(expected_survival_time).collect();
    let observed: Vec<f64> = (0..n_curves).map(|_| rng.random_range(1..=t_max) as f64).collect();
    let events: Vec<bool> = (0..n_curves).map(|_| rng.random()).collect();
    let mut brute = 0.0;
    for i in 0..n_curves {
        let d = observed[i] - predicted[i];
        brute += if events[i] { d.abs() } else if d > 0.0 { d } else { 0.0 };
    }
    brute /= n_curves as f64;
    worst = worst.max((censored_mae(&predicted, &observed, &events)? - brute).abs());
    Ok(CheckResult::new(
        "survival_math",
        worst < ORACLE_TOLERANCE,
        format!("{n_curves} curves, max abs deviation {worst:.3e}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for r in primitive_gradcheck(3).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn survival_math_passes() {
        assert!(survival_math_check(1, 50).unwrap().passed);
    }

    #[test]
    fn error_floor() {
        assert_eq!(gradient_error(1.0, 1.0), 0.0);
        assert!((gradient_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }
}
