//! Ablation-configurable transformer encoder layer and the feed-forward
//! identity-task model.
//!
//! The encoder keeps the standard post-norm residual structure; the ablation
//! switches control only whether softmax is applied to the attention logits
//! and whether each layer normalization site is present.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, TensorId};
use crate::params::ParamSet;
use crate::tensor::{Tensor, TensorError};

pub const LN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub use_softmax: bool,
    pub use_dk_scaling: bool,
}

impl AttentionConfig {
    /// Single-head attention; `d_k` equals `d_model`.
    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.d_model == 0 {
            return Err(TensorError::Invalid("d_model must be >= 1".into()));
        }
        if self.num_heads != 1 {
            return Err(TensorError::Invalid(format!(
                "only single-head attention is supported, got num_heads = {}",
                self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "ff_variant", content = "ff_hidden")]
pub enum FfVariant {
    SingleLinear,
    TwoLayerRelu(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayerConfig {
    pub attention: AttentionConfig,
    pub ln_after_sa: bool,
    pub ln_after_ff: bool,
    pub ff_variant: FfVariant,
    pub use_output_projection: bool,
}

impl EncoderLayerConfig {
    fn counting_base(use_softmax: bool) -> Self {
        EncoderLayerConfig {
            attention: AttentionConfig {
                d_model: 10,
                num_heads: 1,
                use_softmax,
                use_dk_scaling: true,
            },
            ln_after_sa: false,
            ln_after_ff: false,
            ff_variant: FfVariant::SingleLinear,
            use_output_projection: true,
        }
    }

    /// Standard encoder: softmax on, both normalizations on, 2x2048 ReLU FF.
    pub fn std_transformer_count() -> Self {
        EncoderLayerConfig {
            ln_after_sa: true,
            ln_after_ff: true,
            ff_variant: FfVariant::TwoLayerRelu(2048),
            ..Self::counting_base(true)
        }
    }

    pub fn no_layernorm_count() -> Self {
        Self::counting_base(false)
    }

    pub fn layernorm_sa_count() -> Self {
        EncoderLayerConfig { ln_after_sa: true, ..Self::counting_base(false) }
    }

    pub fn layernorm_ff_count() -> Self {
        EncoderLayerConfig { ln_after_ff: true, ..Self::counting_base(false) }
    }

    pub fn has_ln_site(&self) -> bool {
        self.ln_after_sa || self.ln_after_ff
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        self.attention.validate()?;
        if let FfVariant::TwoLayerRelu(h) = self.ff_variant {
            if h == 0 {
                return Err(TensorError::Invalid("ff hidden width must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Expected parameter names and shapes, in forward order. Exactly the
    /// parameters the config enables; nothing dead is serialized.
    pub fn param_spec(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.attention.d_model;
        let mut spec = vec![
            ("attn.w_q".into(), vec![d, d]),
            ("attn.b_q".into(), vec![d]),
            ("attn.w_k".into(), vec![d, d]),
            ("attn.b_k".into(), vec![d]),
            ("attn.w_v".into(), vec![d, d]),
            ("attn.b_v".into(), vec![d]),
        ];
        if self.use_output_projection {
            spec.push(("attn.w_o".into(), vec![d, d]));
            spec.push(("attn.b_o".into(), vec![d]));
        }
        if self.ln_after_sa {
            spec.push(("ln_sa.gamma".into(), vec![d]));
            spec.push(("ln_sa.beta".into(), vec![d]));
        }
        match self.ff_variant {
            FfVariant::SingleLinear => {
                spec.push(("ff.w".into(), vec![d, d]));
                spec.push(("ff.b".into(), vec![d]));
            }
            FfVariant::TwoLayerRelu(h) => {
                spec.push(("ff.w1".into(), vec![d, h]));
                spec.push(("ff.b1".into(), vec![h]));
                spec.push(("ff.w2".into(), vec![h, h]));
                spec.push(("ff.b2".into(), vec![h]));
                spec.push(("ff.w3".into(), vec![h, d]));
                spec.push(("ff.b3".into(), vec![d]));
            }
        }
        if self.ln_after_ff {
            spec.push(("ln_ff.gamma".into(), vec![d]));
            spec.push(("ln_ff.beta".into(), vec![d]));
        }
        spec
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamSet {
        init_from_spec(&self.param_spec(), rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FfIdentityConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_hidden_layers: usize,
    pub append_layer_norm: bool,
}

impl FfIdentityConfig {
    pub fn layernorm_identity() -> Self {
        FfIdentityConfig {
            input_dim: 5,
            hidden: 2048,
            num_hidden_layers: 2,
            append_layer_norm: true,
        }
    }

    pub fn no_layernorm_identity() -> Self {
        FfIdentityConfig { append_layer_norm: false, ..Self::layernorm_identity() }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.num_hidden_layers != 2 {
            return Err(TensorError::Invalid(format!(
                "identity model is fixed at 2 hidden layers, got {}",
                self.num_hidden_layers
            )));
        }
        if self.input_dim == 0 || self.hidden == 0 {
            return Err(TensorError::Invalid("identity model dims must be >= 1".into()));
        }
        Ok(())
    }

    pub fn param_spec(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.input_dim, self.hidden);
        let mut spec = vec![
            ("ff.w1".into(), vec![d, h]),
            ("ff.b1".into(), vec![h]),
            ("ff.w2".into(), vec![h, h]),
            ("ff.b2".into(), vec![h]),
            ("ff.w3".into(), vec![h, d]),
            ("ff.b3".into(), vec![d]),
        ];
        if self.append_layer_norm {
            spec.push(("ln_out.gamma".into(), vec![d]));
            spec.push(("ln_out.beta".into(), vec![d]));
        }
        spec
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamSet {
        init_from_spec(&self.param_spec(), rng)
    }
}

/// Weight matrices [fan_in, fan_out] and their biases draw from
/// uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)]; LN gamma starts at 1, beta at 0.
fn init_from_spec<R: Rng>(spec: &[(String, Vec<usize>)], rng: &mut R) -> ParamSet {
    let mut params = ParamSet::new();
    let mut last_fan_in = 1;
    for (name, shape) in spec {
        let tensor = if name.ends_with(".gamma") {
            Tensor::new(shape.clone(), vec![1.0; shape[0]]).unwrap()
        } else if name.ends_with(".beta") {
            Tensor::zeros(shape.clone())
        } else {
            if shape.len() == 2 {
                last_fan_in = shape[0];
            }
            Tensor::init_linear(rng, last_fan_in, shape.clone())
        };
        params.insert(name, tensor);
    }
    params
}

// ── Graph bindings ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum FfIds {
    Single { w: TensorId, b: TensorId },
    TwoLayer {
        w1: TensorId,
        b1: TensorId,
        w2: TensorId,
        b2: TensorId,
        w3: TensorId,
        b3: TensorId,
    },
}

/// Parameter leaves of one encoder layer inside a graph. `all` preserves
/// the `ParamSet` order for gradient harvesting.
#[derive(Debug, Clone)]
pub struct EncoderBinding {
    pub all: Vec<TensorId>,
    w_q: TensorId,
    b_q: TensorId,
    w_k: TensorId,
    b_k: TensorId,
    w_v: TensorId,
    b_v: TensorId,
    w_o: Option<(TensorId, TensorId)>,
    ln_sa: Option<(TensorId, TensorId)>,
    ff: FfIds,
    ln_ff: Option<(TensorId, TensorId)>,
}

fn take_pair(
    params: &ParamSet,
    graph: &mut Graph,
    all: &mut Vec<TensorId>,
    w: &str,
    b: &str,
) -> (TensorId, TensorId) {
    let wt = graph.param(params.get(w).unwrap_or_else(|| panic!("missing param {w}")).clone());
    let bt = graph.param(params.get(b).unwrap_or_else(|| panic!("missing param {b}")).clone());
    all.push(wt);
    all.push(bt);
    (wt, bt)
}

/// Inserts the layer's parameters into `graph`. The set must have been
/// produced by (or validated against) `config.param_spec()`.
pub fn bind_encoder(
    graph: &mut Graph,
    config: &EncoderLayerConfig,
    params: &ParamSet,
) -> EncoderBinding {
    let mut all = Vec::with_capacity(params.len());
    let (w_q, b_q) = take_pair(params, graph, &mut all, "attn.w_q", "attn.b_q");
    let (w_k, b_k) = take_pair(params, graph, &mut all, "attn.w_k", "attn.b_k");
    let (w_v, b_v) = take_pair(params, graph, &mut all, "attn.w_v", "attn.b_v");
    let w_o = config
        .use_output_projection
        .then(|| take_pair(params, graph, &mut all, "attn.w_o", "attn.b_o"));
    let ln_sa = config
        .ln_after_sa
        .then(|| take_pair(params, graph, &mut all, "ln_sa.gamma", "ln_sa.beta"));
    let ff = match config.ff_variant {
        FfVariant::SingleLinear => {
            let (w, b) = take_pair(params, graph, &mut all, "ff.w", "ff.b");
            FfIds::Single { w, b }
        }
        FfVariant::TwoLayerRelu(_) => {
            let (w1, b1) = take_pair(params, graph, &mut all, "ff.w1", "ff.b1");
            let (w2, b2) = take_pair(params, graph, &mut all, "ff.w2", "ff.b2");
            let (w3, b3) = take_pair(params, graph, &mut all, "ff.w3", "ff.b3");
            FfIds::TwoLayer { w1, b1, w2, b2, w3, b3 }
        }
    };
    let ln_ff = config
        .ln_after_ff
        .then(|| take_pair(params, graph, &mut all, "ln_ff.gamma", "ln_ff.beta"));
    EncoderBinding { all, w_q, b_q, w_k, b_k, w_v, b_v, w_o, ln_sa, ff, ln_ff }
}

fn linear(g: &mut Graph, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

// ── Forward passes ──────────────────────────────────────────────────

pub struct AttentionOutput {
    pub output: TensorId,
    /// Post-softmax weights, or the (scaled) raw logits when softmax is off.
    pub weights: TensorId,
}

/// Scaled dot-product attention over a `[len, d_model]` sequence.
/// Logits are divided by sqrt(d_k) iff `use_dk_scaling`; softmax over the
/// last axis is applied iff `use_softmax`.
pub fn attention_forward(
    g: &mut Graph,
    x: TensorId,
    binding: &EncoderBinding,
    config: &AttentionConfig,
) -> Result<AttentionOutput, TensorError> {
    let query = linear(g, x, binding.w_q, binding.b_q)?;
    let key = linear(g, x, binding.w_k, binding.b_k)?;
    let value = linear(g, x, binding.w_v, binding.b_v)?;
    let key_t = g.transpose(key)?;
    let mut logits = g.matmul(query, key_t)?;
    if config.use_dk_scaling {
        logits = g.scale(logits, 1.0 / (config.d_k() as f64).sqrt());
    }
    let weights = if config.use_softmax { g.softmax(logits, 1)? } else { logits };
    let mut output = g.matmul(weights, value)?;
    if let Some((w_o, b_o)) = binding.w_o {
        output = linear(g, output, w_o, b_o)?;
    }
    Ok(AttentionOutput { output, weights })
}

/// Attention sublayer with residual and optional post-norm: everything of
/// the encoder that mixes rows.
pub struct AttentionHalf {
    pub h: TensorId,
    pub weights: TensorId,
    pub pre_ln_sa: Option<TensorId>,
}

pub fn encoder_attention_half(
    g: &mut Graph,
    x: TensorId,
    binding: &EncoderBinding,
    config: &EncoderLayerConfig,
) -> Result<AttentionHalf, TensorError> {
    let attn = attention_forward(g, x, binding, &config.attention)?;
    let mut h = g.add(x, attn.output)?;
    let mut pre_ln_sa = None;
    if let Some((gamma, beta)) = binding.ln_sa {
        pre_ln_sa = Some(h);
        h = g.layer_norm(h, gamma, beta, LN_EPSILON)?;
    }
    Ok(AttentionHalf { h, weights: attn.weights, pre_ln_sa })
}

/// FF sublayer with residual and optional post-norm; purely row-wise, so it
/// may run on row-concatenated batches.
pub struct FfHalf {
    pub out: TensorId,
    pub ff_output: TensorId,
    pub pre_ln_ff: Option<TensorId>,
}

pub fn encoder_ff_half(
    g: &mut Graph,
    h: TensorId,
    binding: &EncoderBinding,
    config: &EncoderLayerConfig,
) -> Result<FfHalf, TensorError> {
    let ff_output = match binding.ff {
        FfIds::Single { w, b } => linear(g, h, w, b)?,
        FfIds::TwoLayer { w1, b1, w2, b2, w3, b3 } => {
            let a1 = linear(g, h, w1, b1)?;
            let a1 = g.relu(a1);
            let a2 = linear(g, a1, w2, b2)?;
            let a2 = g.relu(a2);
            linear(g, a2, w3, b3)?
        }
    };
    let mut out = g.add(h, ff_output)?;
    let mut pre_ln_ff = None;
    if let Some((gamma, beta)) = binding.ln_ff {
        pre_ln_ff = Some(out);
        out = g.layer_norm(out, gamma, beta, LN_EPSILON)?;
    }
    let _ = config;
    Ok(FfHalf { out, ff_output, pre_ln_ff })
}

/// Captured intermediate values needed by the diagnostics.
pub struct EncoderDiagnostics {
    pub attention_weights: TensorId,
    pub ff_output: TensorId,
    pub pre_ln_sa: Option<TensorId>,
    pub pre_ln_ff: Option<TensorId>,
}

/// Full post-norm encoder layer:
/// `h = x + Attn(x)`, optional LN; `out = h + FF(h)`, optional LN.
pub fn encoder_layer_forward(
    g: &mut Graph,
    x: TensorId,
    binding: &EncoderBinding,
    config: &EncoderLayerConfig,
) -> Result<(TensorId, EncoderDiagnostics), TensorError> {
    let attn_half = encoder_attention_half(g, x, binding, config)?;
    let ff_half = encoder_ff_half(g, attn_half.h, binding, config)?;
    Ok((
        ff_half.out,
        EncoderDiagnostics {
            attention_weights: attn_half.weights,
            ff_output: ff_half.ff_output,
            pre_ln_sa: attn_half.pre_ln_sa,
            pre_ln_ff: ff_half.pre_ln_ff,
        },
    ))
}

// ── Identity model ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct IdentityBinding {
    pub all: Vec<TensorId>,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
    w3: TensorId,
    b3: TensorId,
    ln_out: Option<(TensorId, TensorId)>,
}

pub fn bind_identity(
    graph: &mut Graph,
    config: &FfIdentityConfig,
    params: &ParamSet,
) -> IdentityBinding {
    let mut all = Vec::with_capacity(params.len());
    let (w1, b1) = take_pair(params, graph, &mut all, "ff.w1", "ff.b1");
    let (w2, b2) = take_pair(params, graph, &mut all, "ff.w2", "ff.b2");
    let (w3, b3) = take_pair(params, graph, &mut all, "ff.w3", "ff.b3");
    let ln_out = config
        .append_layer_norm
        .then(|| take_pair(params, graph, &mut all, "ln_out.gamma", "ln_out.beta"));
    IdentityBinding { all, w1, b1, w2, b2, w3, b3, ln_out }
}

/// Two ReLU hidden layers, linear output, optional row-wise LN on the output.
pub fn ff_identity_forward(
    g: &mut Graph,
    x: TensorId,
    binding: &IdentityBinding,
) -> Result<TensorId, TensorError> {
    let a1 = linear(g, x, binding.w1, binding.b1)?;
    let a1 = g.relu(a1);
    let a2 = linear(g, a1, binding.w2, binding.b2)?;
    let a2 = g.relu(a2);
    let mut out = linear(g, a2, binding.w3, binding.b3)?;
    if let Some((gamma, beta)) = binding.ln_out {
        out = g.layer_norm(out, gamma, beta, LN_EPSILON)?;
    }
    Ok(out)
}

// ── Hand-constructed counting model ─────────────────────────────────

/// Parameters realizing the parallel counting mechanism exactly, for the
/// `no_layernorm_count` config.
///
/// Queries pick out `same_color_weight * indicator(same color)` attention
/// rows (background rows are zeroed), values carry `1/(margin * weight)`,
/// and the linear FF rescales the residual stream so that each cell's
/// output is `count + margin` at its color dimension and exactly 0
/// elsewhere. Any `0 < margin < 0.5` makes rounded outputs exact counts
/// at every grid size.
pub fn gold_count_params(same_color_weight: f64, margin: f64) -> ParamSet {
    assert!(same_color_weight > 0.0);
    assert!(margin > 0.0 && margin < 0.5);
    let d = 10;
    let eye = |scale: f64| {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = scale;
        }
        m
    };
    let mut w_q = eye(same_color_weight * (d as f64).sqrt());
    w_q[0] = 0.0; // background color attends to nothing
    let mut params = ParamSet::new();
    let mat = |data: Vec<f64>| Tensor::new(vec![d, d], data).unwrap();
    params.insert("attn.w_q", mat(w_q));
    params.insert("attn.b_q", Tensor::zeros(vec![d]));
    params.insert("attn.w_k", mat(eye(1.0)));
    params.insert("attn.b_k", Tensor::zeros(vec![d]));
    params.insert("attn.w_v", mat(eye(1.0 / (margin * same_color_weight))));
    params.insert("attn.b_v", Tensor::zeros(vec![d]));
    params.insert("attn.w_o", mat(eye(1.0)));
    params.insert("attn.b_o", Tensor::zeros(vec![d]));
    params.insert("ff.w", mat(eye(margin - 1.0)));
    params.insert("ff.b", Tensor::zeros(vec![d]));
    params
}

pub const GOLD_SAME_COLOR_WEIGHT: f64 = 0.23;
pub const GOLD_MARGIN: f64 = 0.25;
