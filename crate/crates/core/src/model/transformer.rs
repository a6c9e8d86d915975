//! Survival transformer: per-step embeddings of static and temporal inputs,
//! sinusoidal positions, a causally masked post-norm encoder and a sigmoid
//! head producing `q̂(t) = 1 − ĥ(t)` at every step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::input::ModelInput;
use super::positional::positional_encoding;
use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    norm1_gain: ParamId,
    norm1_bias: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    norm2_gain: ParamId,
    norm2_bias: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    static_w: ParamId,
    static_b: ParamId,
    temporal_w: ParamId,
    temporal_b: ParamId,
    layers: Vec<LayerParams>,
    head1_w: ParamId,
    head1_b: ParamId,
    head2_w: ParamId,
    head2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct DynstModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    positions: Vec<f64>,
}

/// Uniform `±1/√fan_in` initialisation; zero when `fan_in == 0`.
fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let n = shape.iter().product();
    let bound = if fan_in == 0 { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
    let data = (0..n).map(|_| rng.random_range(-1.0..=1.0) * bound).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl DynstModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, p, q) = (config.d_model, config.d_ff, config.p_static, config.q_temporal);
        let mut params = ParamStore::new();
        let mut linear = |params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| {
            let w = params.add(format!("{name}.w"), uniform(&mut rng, &[fan_in, fan_out], fan_in));
            let b = params.add(format!("{name}.b"), uniform(&mut rng, &[fan_out], fan_in));
            (w, b)
        };
        let (static_w, static_b) = linear(&mut params, "embed.static", p, d);
        let (temporal_w, temporal_b) = linear(&mut params, "embed.temporal", q, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let (wq, bq) = linear(&mut params, &format!("layer{l}.attn.q"), d, d);
            let (wk, bk) = linear(&mut params, &format!("layer{l}.attn.k"), d, d);
            let (wv, bv) = linear(&mut params, &format!("layer{l}.attn.v"), d, d);
            let (wo, bo) = linear(&mut params, &format!("layer{l}.attn.out"), d, d);
            let norm1_gain = params.add(format!("layer{l}.norm1.gain"), Tensor::full(&[d], 1.0));
            let norm1_bias = params.add(format!("layer{l}.norm1.bias"), Tensor::zeros(&[d]));
            let (ff1_w, ff1_b) = linear(&mut params, &format!("layer{l}.ff1"), d, f);
            let (ff2_w, ff2_b) = linear(&mut params, &format!("layer{l}.ff2"), f, d);
            let norm2_gain = params.add(format!("layer{l}.norm2.gain"), Tensor::full(&[d], 1.0));
            let norm2_bias = params.add(format!("layer{l}.norm2.bias"), Tensor::zeros(&[d]));
            layers.push(LayerParams {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                norm1_gain,
                norm1_bias,
                ff1_w,
                ff1_b,
                ff2_w,
                ff2_b,
                norm2_gain,
                norm2_bias,
            });
        }
        let (head1_w, head1_b) = linear(&mut params, "head.hidden", d, d);
        let (head2_w, head2_b) = linear(&mut params, "head.out", d, 1);
        let t = config.t_max;
        Ok(Self {
            positions: positional_encoding(t, d)?,
            config,
            params,
            layout: Layout {
                static_w,
                static_b,
                temporal_w,
                temporal_b,
                layers,
                head1_w,
                head1_b,
                head2_w,
                head2_b,
            },
        })
    }

    /// Rebuilds a model from stored parameters (names and shapes must match).
    pub fn from_params(config: ModelConfig, stored: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_values_from(stored)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Sets the head's output bias, i.e. the logit of `q̂` at initialisation.
    pub fn set_output_logit(&mut self, logit: f64) {
        self.params.get_mut(self.layout.head2_b).data_mut()[0] = logit;
    }

    /// Zeroes every embedding and head bias (used by tests).
    pub fn zero_biases(&mut self) {
        for id in [
            self.layout.static_b,
            self.layout.temporal_b,
            self.layout.head1_b,
            self.layout.head2_b,
        ] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Zeroes both head layers, so that `q̂ ≡ 0.5`.
    pub fn zero_head(&mut self) {
        for id in [
            self.layout.head1_w,
            self.layout.head1_b,
            self.layout.head2_w,
            self.layout.head2_b,
        ] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let c = &self.config;
        if input.t_max != c.t_max || input.p != c.p_static || input.q != c.q_temporal {
            return Err(Error::Shape {
                op: "embed_inputs",
                lhs: vec![c.t_max, c.p_static, c.q_temporal],
                rhs: vec![input.t_max, input.p, input.q],
            });
        }
        Ok(())
    }

    /// Row `t` of the result is `V_t·W_V + b_V + Z·W_Z + b_Z + PE(t)`;
    /// shape `[batch, t_max, d_model]`.
    pub fn embed_inputs(&self, g: &mut Graph, input: &ModelInput) -> Result<NodeId> {
        self.check_input(input)?;
        let (b, t, d) = (input.batch, input.t_max, self.config.d_model);
        let l = &self.layout;
        let z = g.constant(Tensor::new(vec![b, input.p], input.statics.clone())?)?;
        let zw = g.param(&self.params, l.static_w)?;
        let zb = g.param(&self.params, l.static_b)?;
        let wz = g.linear(z, zw, zb)?;
        let wz = g.reshape(wz, &[b, 1, d])?;
        let v = g.constant(Tensor::new(vec![b, t, input.q], input.temporal.clone())?)?;
        let vw = g.param(&self.params, l.temporal_w)?;
        let vb = g.param(&self.params, l.temporal_b)?;
        let wv = g.linear(v, vw, vb)?;
        let w = g.add(wv, wz)?;
        let pe = g.constant(Tensor::new(vec![t, d], self.positions.clone())?)?;
        g.add(w, pe)
    }

    fn affine_norm(&self, g: &mut Graph, x: NodeId, gain: ParamId, bias: ParamId) -> Result<NodeId> {
        let n = g.layer_norm(x, 2)?;
        let gn = g.param(&self.params, gain)?;
        let bn = g.param(&self.params, bias)?;
        let scaled = g.mul(n, gn)?;
        g.add(scaled, bn)
    }

    fn split_heads(&self, g: &mut Graph, x: NodeId, b: usize, t: usize, perm: &[usize]) -> Result<NodeId> {
        let (h, dh) = (self.config.n_heads, self.config.head_dim());
        let r = g.reshape(x, &[b, t, h, dh])?;
        g.permute(r, perm)
    }

    fn attention(
        &self,
        g: &mut Graph,
        x: NodeId,
        layer: &LayerParams,
        attn_out: &mut Option<&mut Vec<NodeId>>,
    ) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let p = self.config.dropout;
        let proj = |g: &mut Graph, w: ParamId, bias: ParamId| -> Result<NodeId> {
            let wn = g.param(&self.params, w)?;
            let bn = g.param(&self.params, bias)?;
            g.linear(x, wn, bn)
        };
        let q = proj(g, layer.wq, layer.bq)?;
        let k = proj(g, layer.wk, layer.bk)?;
        let v = proj(g, layer.wv, layer.bv)?;
        let q = self.split_heads(g, q, b, t, &[0, 2, 1, 3])?;
        let k_t = self.split_heads(g, k, b, t, &[0, 2, 3, 1])?;
        let v = self.split_heads(g, v, b, t, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, k_t)?;
        let weights = g.causal_softmax(scores, 1.0 / (self.config.head_dim() as f64).sqrt())?;
        if let Some(out) = attn_out.as_mut() {
            out.push(weights);
        }
        let weights = g.dropout(weights, p)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        let wo = g.param(&self.params, layer.wo)?;
        let bo = g.param(&self.params, layer.bo)?;
        g.linear(ctx, wo, bo)
    }

    /// Runs the encoder stack on an embedded sequence `[batch, t_max, d]`.
    ///
    /// Attention weights (after softmax, before dropout) of every layer are
    /// appended to `attn_out` when given, each shaped
    /// `[batch, n_heads, t_max, t_max]`.
    pub fn encode(&self, g: &mut Graph, embedded: NodeId, mut attn_out: Option<&mut Vec<NodeId>>) -> Result<NodeId> {
        let p = self.config.dropout;
        let mut x = g.dropout(embedded, p)?;
        for layer in &self.layout.layers {
            let a = self.attention(g, x, layer, &mut attn_out)?;
            let a = g.dropout(a, p)?;
            let r = g.add(x, a)?;
            x = self.affine_norm(g, r, layer.norm1_gain, layer.norm1_bias)?;
            let w1 = g.param(&self.params, layer.ff1_w)?;
            let b1 = g.param(&self.params, layer.ff1_b)?;
            let hdn = g.linear(x, w1, b1)?;
            let hdn = g.relu(hdn)?;
            let hdn = g.dropout(hdn, p)?;
            let w2 = g.param(&self.params, layer.ff2_w)?;
            let b2 = g.param(&self.params, layer.ff2_b)?;
            let f = g.linear(hdn, w2, b2)?;
            let f = g.dropout(f, p)?;
            let r = g.add(x, f)?;
            x = self.affine_norm(g, r, layer.norm2_gain, layer.norm2_bias)?;
        }
        Ok(x)
    }

    /// Two-layer head with final sigmoid: `[batch, t_max, d] → [batch, t_max]`.
    pub fn hazard_head(&self, g: &mut Graph, encoded: NodeId) -> Result<NodeId> {
        let shape = g.shape(encoded).to_vec();
        let l = &self.layout;
        let w1 = g.param(&self.params, l.head1_w)?;
        let b1 = g.param(&self.params, l.head1_b)?;
        let h = g.linear(encoded, w1, b1)?;
        let h = g.relu(h)?;
        let w2 = g.param(&self.params, l.head2_w)?;
        let b2 = g.param(&self.params, l.head2_b)?;
        let logits = g.linear(h, w2, b2)?;
        let q = g.sigmoid(logits)?;
        g.reshape(q, &shape[..2])
    }

    /// `q̂` for every patient and step, `[batch, t_max]`.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<NodeId> {
        self.forward_with_attention(g, input, None)
    }

    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        input: &ModelInput,
        attn_out: Option<&mut Vec<NodeId>>,
    ) -> Result<NodeId> {
        let w = self.embed_inputs(g, input)?;
        let enc = self.encode(g, w, attn_out)?;
        self.hazard_head(g, enc)
    }

    /// Forward pass for a model built without temporal inputs: any temporal
    /// features in `input` are dropped.
    pub fn static_variant_forward(&self, g: &mut Graph, input: &ModelInput) -> Result<NodeId> {
        if self.config.q_temporal != 0 {
            return Err(Error::Config("static variant requires q_temporal = 0".into()));
        }
        self.forward(g, &input.without_temporal())
    }
}
