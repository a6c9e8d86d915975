//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Every forward op appends one node; node inputs always precede the node, so
//! the backward sweep is a plain reverse walk over the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Clamp(NodeId, f64, f64),
    Softmax(NodeId, usize),
    CausalSoftmax(NodeId, f64),
    LayerNorm { input: NodeId, axis: usize, rstd: Vec<f64> },
    Dropout(NodeId, Vec<f64>),
    Concat(Vec<NodeId>, usize),
    Slice { input: NodeId, axis: usize, start: usize },
    Sum(NodeId, usize),
    Mean(NodeId, usize),
    SumAll(NodeId),
    CumSum(NodeId, usize),
    MaskedFill { input: NodeId, mask: Vec<bool> },
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::gradients`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Append-only computation graph.
///
/// `train_mode` controls dropout; the seeded RNG makes dropout masks
/// reproducible.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    train_mode: bool,
    rng: ChaCha8Rng,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Maps each element of a broadcast output back to its source offset in
/// an input of shape `input`, in row-major output order.
enum Broadcast {
    /// `input` equals the trailing axes of the output, so offsets cycle.
    Cyclic(usize),
    Table(Vec<usize>),
}

impl Broadcast {
    fn new(input: &[usize], out: &[usize]) -> Self {
        let n: usize = out.iter().product();
        let lead = out.len() - input.len();
        if input == &out[lead..] {
            return Broadcast::Cyclic(input.iter().product::<usize>().max(1));
        }
        let mut strides = vec![0; out.len()];
        let mut acc = 1;
        for i in (0..input.len()).rev() {
            strides[i + lead] = if input[i] == 1 { 0 } else { acc };
            acc *= input[i];
        }
        let mut idx = vec![0usize; out.len()];
        let mut offsets = Vec::with_capacity(n);
        let mut off = 0usize;
        for _ in 0..n {
            offsets.push(off);
            for d in (0..out.len()).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        Broadcast::Table(offsets)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Broadcast::Cyclic(m) => i % m,
            Broadcast::Table(t) => t[i],
        }
    }
}

fn all_finite(values: &[f64]) -> bool {
    // `x * 0` is NaN exactly when `x` is not finite.
    let mut acc = [0.0f64; 8];
    let chunks = values.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] += c[k] * 0.0;
        }
    }
    acc.iter().all(|v| *v == 0.0) && rest.iter().all(|v| v.is_finite())
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if all_finite(values) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `exp(z)` rounds to exactly zero below this.
const EXP_UNDERFLOW: f64 = -746.0;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new(train_mode: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            train_mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn train_mode(&self) -> bool {
        self.train_mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, value: Vec<f64>, kind: Op, rg: bool) -> Result<NodeId> {
        check_finite(op, &value)?;
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op: kind,
            requires_grad: rg,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records a leaf; `tensor.requires_grad()` decides whether gradients
    /// are tracked for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<NodeId> {
        let rg = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push("leaf", shape, tensor.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<NodeId> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn variable(&mut self, tensor: Tensor) -> Result<NodeId> {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        let t = store.get(id);
        self.push("param", t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true)
    }

    fn binary(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, kind: Op) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out = broadcast_shape(op, sa, sb)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let n: usize = out.iter().product();
            match (Broadcast::new(sa, &out), Broadcast::new(sb, &out)) {
                (Broadcast::Cyclic(m), Broadcast::Cyclic(k)) if m == n => {
                    let mut v = Vec::with_capacity(n);
                    for chunk in va.chunks_exact(k) {
                        v.extend(chunk.iter().zip(vb).map(|(x, y)| f(*x, *y)));
                    }
                    v
                }
                (Broadcast::Cyclic(m), Broadcast::Cyclic(k)) if k == n => {
                    let mut v = Vec::with_capacity(n);
                    for chunk in vb.chunks_exact(m) {
                        v.extend(va.iter().zip(chunk).map(|(x, y)| f(*x, *y)));
                    }
                    v
                }
                (oa, ob) => (0..n).map(|i| f(va[oa.at(i)], vb[ob.at(i)])).collect(),
            }
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(op, out, value, kind, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either rank 2 (shared across all leading axes of `a`) or has
    /// exactly the leading axes of `a`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 || (sb.len() > 2 && sb[..sb.len() - 2] != sa[..sa.len() - 2]) {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut value = vec![0.0; batch * m * n];
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if sb.len() == 2 {
            gemm(batch * m, k, n, va, false, vb, false, &mut value, false);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    false,
                    &vb[i * k * n..(i + 1) * k * n],
                    false,
                    &mut value[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out_shape, value, Op::MatMul(a, b), rg)
    }

    /// `x · W + b` with `W: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, weight)?;
        self.add(xw, bias)
    }

    fn unary(&mut self, op: &'static str, a: NodeId, f: impl Fn(f64) -> f64, kind: Op) -> Result<NodeId> {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(op, shape, value, kind, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.nodes[a.0].value.iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// `max(x, 0)` elementwise.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::Contract(format!("clamp bounds out of order: {lo} > {hi}")));
        }
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    fn check_axis(&self, op: &'static str, a: NodeId, axis: usize) -> Result<()> {
        let shape = &self.nodes[a.0].shape;
        if axis >= shape.len() {
            return Err(Error::Shape {
                op,
                lhs: shape.clone(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, dim, inner) = split_axis(&shape, axis);
        let x = &self.nodes[a.0].value;
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let max = (0..dim).map(|d| x[base + d * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for d in 0..dim {
                    let z = x[base + d * inner] - max;
                    let e = if z < EXP_UNDERFLOW { 0.0 } else { z.exp() };
                    y[base + d * inner] = e;
                    total += e;
                }
                for d in 0..dim {
                    y[base + d * inner] /= total;
                }
            }
        }
        let rg = self.rg(a);
        self.push("softmax", shape, y, Op::Softmax(a, axis), rg)
    }

    /// Softmax of `scale · a` over the last axis of each trailing `[T, T]`
    /// block, where row `i` only sees columns `0..=i`; later columns come
    /// out exactly zero. Same result as filling the strict upper triangle
    /// with a large negative value before [`Graph::softmax`].
    pub fn causal_softmax(&mut self, a: NodeId, scale: f64) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::Shape {
                op: "causal_softmax",
                lhs: shape,
                rhs: vec![],
            });
        }
        let t = shape[r - 1].max(1);
        let x = &self.nodes[a.0].value;
        let mut y = Vec::with_capacity(x.len());
        for (k, xr) in x.chunks_exact(t).enumerate() {
            let seen = &xr[..=k % t];
            let max = seen.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v * scale));
            let start = y.len();
            let mut total = 0.0;
            for v in seen {
                let z = v * scale - max;
                let e = if z < EXP_UNDERFLOW { 0.0 } else { z.exp() };
                total += e;
                y.push(e);
            }
            for e in &mut y[start..] {
                *e /= total;
            }
            y.resize(start + t, 0.0);
        }
        let rg = self.rg(a);
        self.push("causal_softmax", shape, y, Op::CausalSoftmax(a, scale), rg)
    }

    /// Normalizes to zero mean and unit variance along `axis` (eps 1e-5),
    /// without affine parameters.
    pub fn layer_norm(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        self.check_axis("layer_norm", a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, dim, inner) = split_axis(&shape, axis);
        let x = &self.nodes[a.0].value;
        let mut y = vec![0.0; x.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mean = (0..dim).map(|d| x[base + d * inner]).sum::<f64>() / dim as f64;
                let var = (0..dim).map(|d| (x[base + d * inner] - mean).powi(2)).sum::<f64>() / dim as f64;
                let r = 1.0 / (var + EPS).sqrt();
                rstd[o * inner + i] = r;
                for d in 0..dim {
                    y[base + d * inner] = (x[base + d * inner] - mean) * r;
                }
            }
        }
        let rg = self.rg(a);
        self.push("layer_norm", shape, y, Op::LayerNorm { input: a, axis, rstd }, rg)
    }

    /// Inverted dropout: identity outside train mode, otherwise zeroes each
    /// entry with probability `p` and rescales survivors by `1/(1-p)`.
    pub fn dropout(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.train_mode || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[a.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = self.nodes[a.0].value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push("dropout", shape, value, Op::Dropout(a, mask), rg)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.nodes[first.0].shape.clone();
        let mut total = 0;
        for id in inputs {
            let s = &self.nodes[id.0].shape;
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut value = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for id in inputs {
                let d = self.nodes[id.0].shape[axis];
                let v = &self.nodes[id.0].value;
                value.extend_from_slice(&v[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push("concat", shape, value, Op::Concat(inputs.to_vec(), axis), rg)
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.check_axis("slice", a, axis)?;
        let src = self.nodes[a.0].shape.clone();
        if start + len > src[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: src,
                rhs: vec![start, len],
            });
        }
        let (outer, dim, inner) = split_axis(&src, axis);
        let v = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * dim * inner + start * inner;
            value.extend_from_slice(&v[from..from + len * inner]);
        }
        let mut shape = src;
        shape[axis] = len;
        let rg = self.rg(a);
        self.push("slice", shape, value, Op::Slice { input: a, axis, start }, rg)
    }

    fn reduce(&mut self, a: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let op = if mean { "mean" } else { "sum" };
        self.check_axis(op, a, axis)?;
        let src = self.nodes[a.0].shape.clone();
        let (outer, dim, inner) = split_axis(&src, axis);
        let v = &self.nodes[a.0].value;
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &v[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                value[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(acc, x)| *acc += x);
            }
        }
        if mean {
            if dim == 0 {
                return Err(Error::Domain {
                    op: "mean",
                    detail: "mean over an empty axis".into(),
                });
            }
            value.iter_mut().for_each(|x| *x /= dim as f64);
        }
        let mut shape = src;
        shape.remove(axis);
        let kind = if mean { Op::Mean(a, axis) } else { Op::Sum(a, axis) };
        let rg = self.rg(a);
        self.push(op, shape, value, kind, rg)
    }

    /// Sums over `axis`, removing it.
    pub fn sum(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(a, axis, true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push("sum_all", Vec::new(), vec![total], Op::SumAll(a), rg)
    }

    /// Running sum along `axis`.
    pub fn cumsum(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("cumsum", a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, dim, inner) = split_axis(&shape, axis);
        let mut value = self.nodes[a.0].value.clone();
        for o in 0..outer {
            for d in 1..dim {
                for i in 0..inner {
                    let prev = value[(o * dim + d - 1) * inner + i];
                    value[(o * dim + d) * inner + i] += prev;
                }
            }
        }
        let rg = self.rg(a);
        self.push("cumsum", shape, value, Op::CumSum(a, axis), rg)
    }

    /// Replaces entries where `mask` is true by `fill`. `mask_shape` must be a
    /// trailing suffix of the input shape; the mask repeats over leading axes.
    pub fn masked_fill(&mut self, a: NodeId, mask: &[bool], mask_shape: &[usize], fill: f64) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        let suffix_ok = mask_shape.len() <= shape.len()
            && shape[shape.len() - mask_shape.len()..] == *mask_shape
            && mask.len() == mask_shape.iter().product::<usize>();
        if !suffix_ok {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: shape,
                rhs: mask_shape.to_vec(),
            });
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(mask.iter().cycle())
            .map(|(&x, &hit)| if hit { fill } else { x })
            .collect();
        let rg = self.rg(a);
        let mask = mask.to_vec();
        self.push("masked_fill", shape, value, Op::MaskedFill { input: a, mask }, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let src = &self.nodes[a.0].shape;
        if shape.iter().product::<usize>() != src.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: src.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        self.push("reshape", shape.to_vec(), value, Op::Reshape(a), rg)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let src = self.nodes[a.0].shape.clone();
        let mut seen = vec![false; src.len()];
        let valid = perm.len() == src.len()
            && perm.iter().all(|&p| p < src.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Shape {
                op: "permute",
                lhs: src,
                rhs: perm.to_vec(),
            });
        }
        let shape: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let value = permute_data(&self.nodes[a.0].value, &src, perm);
        let rg = self.rg(a);
        self.push("permute", shape, value, Op::Permute(a, perm.to_vec()), rg)
    }

    /// Transposes the last two axes.
    pub fn transpose_last(&mut self, a: NodeId) -> Result<NodeId> {
        let r = self.nodes[a.0].shape.len();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs the backward pass and accumulates parameter gradients into
    /// `store`. Repeated calls accumulate until [`ParamStore::zero_grad`].
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&node.op, &grads.grads[idx]) {
                store.get_mut(*pid).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut send = |id: NodeId, delta: Vec<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let input = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(*a, self.reduce_broadcast(*a, &node.shape, g, |i| g[i]));
                send(*b, self.reduce_broadcast(*b, &node.shape, g, |i| sign * g[i]));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (input(*a), input(*b));
                let oa = Broadcast::new(&self.nodes[a.0].shape, &node.shape);
                let ob = Broadcast::new(&self.nodes[b.0].shape, &node.shape);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; va.len()];
                    for i in 0..g.len() {
                        da[oa.at(i)] += g[i] * vb[ob.at(i)];
                    }
                    send(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; vb.len()];
                    for i in 0..g.len() {
                        db[ob.at(i)] += g[i] * va[oa.at(i)];
                    }
                    send(*b, db);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let (va, vb) = (input(*a), input(*b));
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; va.len()];
                    if sb.len() == 2 {
                        gemm(batch * m, n, k, g, false, vb, true, &mut da, false);
                    } else {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &vb[i * k * n..(i + 1) * k * n],
                                true,
                                &mut da[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                    }
                    send(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; vb.len()];
                    if sb.len() == 2 {
                        gemm(k, batch * m, n, va, true, g, false, &mut db, false);
                    } else {
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &va[i * m * k..(i + 1) * m * k],
                                true,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &mut db[i * k * n..(i + 1) * k * n],
                                false,
                            );
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Sigmoid(a) => send(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Log(a) => send(*a, g.iter().zip(input(*a)).map(|(g, x)| g / x).collect()),
            Op::Exp(a) => send(*a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Abs(a) => send(
                *a,
                g.iter()
                    .zip(input(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect(),
            ),
            Op::Relu(a) => send(
                *a,
                g.iter().zip(input(*a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            ),
            Op::Scale(a, c) => send(*a, g.iter().map(|g| g * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Clamp(a, lo, hi) => send(
                *a,
                g.iter()
                    .zip(input(*a))
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax(a, axis) => {
                let (outer, dim, inner) = split_axis(&node.shape, *axis);
                let mut da = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * dim * inner + i;
                        let dot: f64 = (0..dim).map(|d| g[base + d * inner] * y[base + d * inner]).sum();
                        for d in 0..dim {
                            let j = base + d * inner;
                            da[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                send(*a, da);
            }
            Op::CausalSoftmax(a, scale) => {
                let t = node.shape[node.shape.len() - 1].max(1);
                let mut da = vec![0.0; g.len()];
                for (k, ((gr, yr), dr)) in g.chunks_exact(t).zip(y.chunks_exact(t)).zip(da.chunks_exact_mut(t)).enumerate() {
                    let row = k % t;
                    let dot: f64 = gr[..=row].iter().zip(&yr[..=row]).map(|(g, y)| g * y).sum();
                    for j in 0..=row {
                        dr[j] = scale * yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, da);
            }
            Op::LayerNorm { input: a, axis, rstd } => {
                let (outer, dim, inner) = split_axis(&node.shape, *axis);
                let mut da = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * dim * inner + i;
                        let r = rstd[o * inner + i];
                        let mg: f64 = (0..dim).map(|d| g[base + d * inner]).sum::<f64>() / dim as f64;
                        let mgy: f64 =
                            (0..dim).map(|d| g[base + d * inner] * y[base + d * inner]).sum::<f64>() / dim as f64;
                        for d in 0..dim {
                            let j = base + d * inner;
                            da[j] = r * (g[j] - mg - y[j] * mgy);
                        }
                    }
                }
                send(*a, da);
            }
            Op::Dropout(a, mask) => send(*a, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::Concat(inputs, axis) => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total = node.shape[*axis];
                let mut offset = 0;
                for id in inputs {
                    let d = self.nodes[id.0].shape[*axis];
                    let mut da = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        da.extend_from_slice(&g[from..from + d * inner]);
                    }
                    offset += d;
                    send(*id, da);
                }
            }
            Op::Slice { input: a, axis, start } => {
                let src = &self.nodes[a.0].shape;
                let (outer, dim, inner) = split_axis(src, *axis);
                let len = node.shape[*axis];
                let mut da = vec![0.0; input(*a).len()];
                for o in 0..outer {
                    let to = o * dim * inner + start * inner;
                    da[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*a, da);
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let src = &self.nodes[a.0].shape;
                let (outer, dim, inner) = split_axis(src, *axis);
                let c = if matches!(node.op, Op::Mean(..)) { 1.0 / dim as f64 } else { 1.0 };
                let mut da = vec![0.0; input(*a).len()];
                for o in 0..outer {
                    for d in 0..dim {
                        for i in 0..inner {
                            da[(o * dim + d) * inner + i] = c * g[o * inner + i];
                        }
                    }
                }
                send(*a, da);
            }
            Op::SumAll(a) => send(*a, vec![g[0]; input(*a).len()]),
            Op::CumSum(a, axis) => {
                let (outer, dim, inner) = split_axis(&node.shape, *axis);
                let mut da = g.to_vec();
                for o in 0..outer {
                    for d in (0..dim.saturating_sub(1)).rev() {
                        for i in 0..inner {
                            let next = da[(o * dim + d + 1) * inner + i];
                            da[(o * dim + d) * inner + i] += next;
                        }
                    }
                }
                send(*a, da);
            }
            Op::MaskedFill { input: a, mask } => {
                send(*a, g.iter().zip(mask.iter().cycle()).map(|(g, &hit)| if hit { 0.0 } else { *g }).collect())
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                send(*a, permute_data(g, &node.shape, &inverse));
            }
        }
    }

    /// Sums `grad(i)` over broadcast axes back to the shape of `input`.
    fn reduce_broadcast(&self, input: NodeId, out: &[usize], g: &[f64], grad: impl Fn(usize) -> f64) -> Vec<f64> {
        let shape = &self.nodes[input.0].shape;
        if shape == out {
            return (0..g.len()).map(grad).collect();
        }
        let mut acc = vec![0.0; self.nodes[input.0].value.len()];
        match Broadcast::new(shape, out) {
            Broadcast::Cyclic(m) => {
                for start in (0..g.len()).step_by(m) {
                    for (j, a) in acc.iter_mut().enumerate() {
                        *a += grad(start + j);
                    }
                }
            }
            offsets => {
                for i in 0..g.len() {
                    acc[offsets.at(i)] += grad(i);
                }
            }
        }
        acc
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut src_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        src_strides[d] = src_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}
