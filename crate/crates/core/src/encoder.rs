//! A post-norm transformer encoder that keeps every layer's output.
//!
//! Each layer is
//!
//! ```text
//! h   = LayerNorm(x + MultiHead(x)·W_O + b_O)
//! out = LayerNorm(h + ReLU(h·W_ff1 + b_ff1)·W_ff2 + b_ff2)
//! ```
//!
//! and the stack records `out` of every layer as one slice of the feature
//! maps `U ∈ R^{l×d×n}`.

use serde::{Deserialize, Serialize};

use crate::attention::{multihead_on_tape, AttentionConfig, AttentionParams};
use crate::autodiff::{GradientTape, Var};
use crate::error::{Error, Result};
use crate::rng::{truncated_normal, SeededRng};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub attention: AttentionConfig,
    pub vocab_size: usize,
    /// Number of encoder layers (`n`).
    pub layers: usize,
    /// Feed-forward width; 4·d by convention.
    pub d_ff: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let attention = AttentionConfig::default();
        let d_ff = 4 * attention.d_model;
        Self {
            attention,
            vocab_size: 64,
            layers: 2,
            d_ff,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.layers == 0 {
            return Err(Error::config("the encoder needs at least one layer"));
        }
        if self.vocab_size == 0 || self.d_ff == 0 {
            return Err(Error::config("vocab_size and d_ff must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub attention: AttentionParams,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_offset: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_offset: Tensor,
}

impl EncoderLayerParams {
    /// Truncated-normal weights, zero biases, unit gains.
    pub fn init(cfg: &EncoderConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.attention.d_model;
        let mut w = |rows, cols| truncated_normal(rng, &[rows, cols], INIT_STD);
        let attention = AttentionParams {
            w_q: w(d, d),
            b_q: Tensor::zeros(&[d]),
            w_k: w(d, d),
            b_k: Tensor::zeros(&[d]),
            w_v: w(d, d),
            b_v: Tensor::zeros(&[d]),
        };
        Self {
            attention,
            w_o: w(d, d),
            b_o: Tensor::zeros(&[d]),
            w_ff1: w(d, cfg.d_ff),
            b_ff1: Tensor::zeros(&[cfg.d_ff]),
            w_ff2: w(cfg.d_ff, d),
            b_ff2: Tensor::zeros(&[d]),
            ln1_gain: Tensor::ones(&[d]),
            ln1_offset: Tensor::zeros(&[d]),
            ln2_gain: Tensor::ones(&[d]),
            ln2_offset: Tensor::zeros(&[d]),
        }
    }

    pub(crate) fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = self.attention.named(&format!("{prefix}.attn"));
        out.extend([
            (format!("{prefix}.w_o"), &self.w_o),
            (format!("{prefix}.b_o"), &self.b_o),
            (format!("{prefix}.w_ff1"), &self.w_ff1),
            (format!("{prefix}.b_ff1"), &self.b_ff1),
            (format!("{prefix}.w_ff2"), &self.w_ff2),
            (format!("{prefix}.b_ff2"), &self.b_ff2),
            (format!("{prefix}.ln1_gain"), &self.ln1_gain),
            (format!("{prefix}.ln1_offset"), &self.ln1_offset),
            (format!("{prefix}.ln2_gain"), &self.ln2_gain),
            (format!("{prefix}.ln2_offset"), &self.ln2_offset),
        ]);
        out
    }

    pub(crate) fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = self.attention.named_mut(&format!("{prefix}.attn"));
        out.extend([
            (format!("{prefix}.w_o"), &mut self.w_o),
            (format!("{prefix}.b_o"), &mut self.b_o),
            (format!("{prefix}.w_ff1"), &mut self.w_ff1),
            (format!("{prefix}.b_ff1"), &mut self.b_ff1),
            (format!("{prefix}.w_ff2"), &mut self.w_ff2),
            (format!("{prefix}.b_ff2"), &mut self.b_ff2),
            (format!("{prefix}.ln1_gain"), &mut self.ln1_gain),
            (format!("{prefix}.ln1_offset"), &mut self.ln1_offset),
            (format!("{prefix}.ln2_gain"), &mut self.ln2_gain),
            (format!("{prefix}.ln2_offset"), &mut self.ln2_offset),
        ]);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `V × d`.
    pub token_embedding: Tensor,
    /// `l_max × d`.
    pub position_embedding: Tensor,
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.attention.d_model;
        let token_embedding = truncated_normal(rng, &[cfg.vocab_size, d], INIT_STD);
        let position_embedding = truncated_normal(rng, &[cfg.attention.max_len, d], INIT_STD);
        let layers = (0..cfg.layers).map(|_| EncoderLayerParams::init(cfg, rng)).collect();
        Self {
            token_embedding,
            position_embedding,
            layers,
        }
    }

    pub(crate) fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.token".to_string(), &self.token_embedding),
            ("embed.position".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named(&format!("layer{i}")));
        }
        out
    }

    pub(crate) fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("embed.token".to_string(), &mut self.token_embedding),
            ("embed.position".to_string(), &mut self.position_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.named_mut(&format!("layer{i}")));
        }
        out
    }
}

/// Per-layer outputs stacked along a trailing layer axis.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStackOutput {
    /// `l × d × n`.
    pub u: Tensor,
}

impl EncoderStackOutput {
    /// Stacks equally shaped `l × d` layer outputs.
    pub fn from_layers(layers: &[Tensor]) -> Result<Self> {
        Ok(Self { u: stack_layers(layers)? })
    }

    pub fn num_layers(&self) -> usize {
        self.u.shape()[2]
    }

    /// Output of layer `k` (zero-based).
    pub fn layer(&self, k: usize) -> Result<Tensor> {
        layer_slice(&self.u, k)
    }
}

/// `[l × d]; n` → `l × d × n`.
pub fn stack_layers(layers: &[Tensor]) -> Result<Tensor> {
    let first = layers
        .first()
        .ok_or_else(|| Error::config("cannot stack zero layers"))?;
    let (l, d) = first.dims2()?;
    let n = layers.len();
    let mut data = vec![0.0; l * d * n];
    for (k, layer) in layers.iter().enumerate() {
        if layer.shape() != first.shape() {
            return Err(Error::dim("stack_layers", first.shape(), layer.shape()));
        }
        for (e, &x) in layer.data().iter().enumerate() {
            data[e * n + k] = x;
        }
    }
    Tensor::new(&[l, d, n], data)
}

/// Slice `U[:, :, k]` of an `l × d × n` tensor.
pub fn layer_slice(u: &Tensor, k: usize) -> Result<Tensor> {
    let [l, d, n] = u.shape() else {
        return Err(Error::dim("layer_slice", u.shape(), &[]));
    };
    if k >= *n {
        return Err(Error::dim("layer_slice", u.shape(), &[k]));
    }
    let data = u.data().iter().skip(k).step_by(*n).copied().collect();
    Tensor::new(&[*l, *d], data)
}

/// Token plus position embeddings.
pub fn embed(tokens: &[usize], token_table: &Tensor, position_table: &Tensor) -> Result<Tensor> {
    let mut tape = GradientTape::new();
    let x = embed_on_tape(&mut tape, tokens, token_table, position_table)?;
    Ok(tape.value(x).clone())
}

pub fn embed_on_tape(
    tape: &mut GradientTape,
    tokens: &[usize],
    token_table: &Tensor,
    position_table: &Tensor,
) -> Result<Var> {
    let (max_len, _) = position_table.dims2()?;
    if tokens.is_empty() {
        return Err(Error::Input {
            position: 0,
            message: "empty token sequence".into(),
        });
    }
    if tokens.len() > max_len {
        return Err(Error::Input {
            position: max_len,
            message: format!("sequence of {} tokens exceeds max_len {max_len}", tokens.len()),
        });
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let table = tape.param("embed.token", token_table);
    let pos_table = tape.param("embed.position", position_table);
    let tok = tape.gather_rows(table, tokens)?;
    let pos = tape.gather_rows(pos_table, &positions)?;
    tape.add(tok, pos)
}

/// Layer normalization of each row with a gain and offset.
pub fn layer_norm(x: &Tensor, gain: &Tensor, offset: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = GradientTape::new();
    let (xv, g, o) = (tape.constant(x.clone()), tape.constant(gain.clone()), tape.constant(offset.clone()));
    let y = tape.layer_norm(xv, g, o, eps)?;
    Ok(tape.value(y).clone())
}

pub fn layer_on_tape(
    tape: &mut GradientTape,
    x: Var,
    params: &EncoderLayerParams,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let param = |tape: &mut GradientTape, name: &str, t: &Tensor| tape.param(&format!("{prefix}.{name}"), t);
    let attn = multihead_on_tape(tape, x, &params.attention, &format!("{prefix}.attn"), &cfg.attention)?;

    let w_o = param(tape, "w_o", &params.w_o);
    let b_o = param(tape, "b_o", &params.b_o);
    let g1 = param(tape, "ln1_gain", &params.ln1_gain);
    let o1 = param(tape, "ln1_offset", &params.ln1_offset);
    let projected = tape.matmul(attn.output, w_o)?;
    let projected = tape.add_row_bias(projected, b_o)?;
    let residual = tape.add(x, projected)?;
    let h = tape.layer_norm(residual, g1, o1, LAYER_NORM_EPS)?;

    let w1 = param(tape, "w_ff1", &params.w_ff1);
    let b1 = param(tape, "b_ff1", &params.b_ff1);
    let w2 = param(tape, "w_ff2", &params.w_ff2);
    let b2 = param(tape, "b_ff2", &params.b_ff2);
    let g2 = param(tape, "ln2_gain", &params.ln2_gain);
    let o2 = param(tape, "ln2_offset", &params.ln2_offset);
    let hidden = tape.matmul(h, w1)?;
    let hidden = tape.add_row_bias(hidden, b1)?;
    let hidden = tape.relu(hidden);
    let ff = tape.matmul(hidden, w2)?;
    let ff = tape.add_row_bias(ff, b2)?;
    let residual = tape.add(h, ff)?;
    tape.layer_norm(residual, g2, o2, LAYER_NORM_EPS)
}

/// Runs one encoder layer on plain tensors.
pub fn encoder_layer_forward(x: &Tensor, params: &EncoderLayerParams, cfg: &EncoderConfig) -> Result<Tensor> {
    let mut tape = GradientTape::new();
    let xv = tape.constant(x.clone());
    let y = layer_on_tape(&mut tape, xv, params, "layer", cfg)?;
    Ok(tape.value(y).clone())
}

/// Embeds `tokens` and runs every layer, returning one node per layer output.
pub fn stack_on_tape(
    tape: &mut GradientTape,
    tokens: &[usize],
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    if params.layers.len() != cfg.layers {
        return Err(Error::config(format!(
            "configuration expects {} layers, parameters hold {}",
            cfg.layers,
            params.layers.len()
        )));
    }
    let mut x = embed_on_tape(tape, tokens, &params.token_embedding, &params.position_embedding)?;
    let mut outputs = Vec::with_capacity(cfg.layers);
    for (i, layer) in params.layers.iter().enumerate() {
        x = layer_on_tape(tape, x, layer, &format!("layer{i}"), cfg)?;
        outputs.push(x);
    }
    Ok(outputs)
}

pub fn encoder_stack_forward(tokens: &[usize], params: &EncoderParams, cfg: &EncoderConfig) -> Result<EncoderStackOutput> {
    let mut tape = GradientTape::new();
    let outputs = stack_on_tape(&mut tape, tokens, params, cfg)?;
    let layers: Vec<Tensor> = outputs.iter().map(|&v| tape.value(v).clone()).collect();
    EncoderStackOutput::from_layers(&layers)
}
