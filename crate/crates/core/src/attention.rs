//! Scaled dot-product and multihead self-attention with optional Gaussian
//! blurring along the sequence axis.
//!
//! Two placements of the blur are supported:
//!
//! * [`BlurMode::OnOutputs`] convolves each head's attention output,
//!   `Õʰ = (Aʰ·Vʰ) ∗ g`.
//! * [`BlurMode::OnValues`] convolves each head's values before they are
//!   weighted, `Õʰ = Aʰ·(Vʰ ∗ g)`.
//!
//! In both cases the attention weights `Aʰ` are untouched, and the heads are
//! concatenated column-wise in head order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientTape, Var};
use crate::error::{Error, Result};
use crate::tensor::{check_window, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurMode {
    #[default]
    None,
    OnOutputs,
    OnValues,
}

impl FromStr for BlurMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "on_outputs" => Ok(Self::OnOutputs),
            "on_values" => Ok(Self::OnValues),
            other => Err(Error::config(format!(
                "unknown blur mode {other:?} (expected none, on_outputs or on_values)"
            ))),
        }
    }
}

impl fmt::Display for BlurMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::OnOutputs => "on_outputs",
            Self::OnValues => "on_values",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Longest sequence the model accepts (`l`).
    pub max_len: usize,
    /// Model width (`d`).
    pub d_model: usize,
    /// Number of heads (`h`); each head works in `d / h` columns.
    pub heads: usize,
    pub blur_mode: BlurMode,
    /// Blur window (`k`), odd.
    pub window: usize,
    /// Gaussian standard deviation (`σ`).
    pub sigma: f64,
    /// Divide the taps by their sum. Off by default: the kernel's centre tap
    /// is exactly 1.
    pub normalize_kernel: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            max_len: 16,
            d_model: 16,
            heads: 2,
            blur_mode: BlurMode::None,
            window: 3,
            sigma: 0.1,
            normalize_kernel: false,
        }
    }
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(Error::config("max_len, d_model and heads must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.window == 0 {
            return Err(Error::config("window must be at least 1"));
        }
        check_window(self.window, self.max_len)
    }

    /// The blur kernel this configuration applies, if any.
    pub fn kernel(&self) -> Result<Option<BlurKernel>> {
        if self.blur_mode == BlurMode::None {
            return Ok(None);
        }
        let kernel = gaussian_kernel(self.window, self.sigma)?;
        Ok(Some(if self.normalize_kernel {
            kernel.normalized()
        } else {
            kernel
        }))
    }
}

/// Taps of a one-dimensional Gaussian window.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    taps: Tensor,
}

impl BlurKernel {
    pub fn taps(&self) -> &Tensor {
        &self.taps
    }

    pub fn window(&self) -> usize {
        self.taps.numel()
    }

    /// Taps rescaled to sum to one.
    pub fn normalized(&self) -> Self {
        let total = self.taps.sum();
        Self {
            taps: self.taps.scale(1.0 / total),
        }
    }
}

/// `g[x] = exp(−(x − ⌊k/2⌋)² / 2σ²)` for `x = 0..k`, left unnormalized so the
/// centre tap is exactly 1.
pub fn gaussian_kernel(window: usize, sigma: f64) -> Result<BlurKernel> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::config(format!("window must be odd and positive, got {window}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    let centre = (window / 2) as f64;
    let taps = (0..window)
        .map(|x| {
            let offset = x as f64 - centre;
            (-(offset * offset) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    Ok(BlurKernel {
        taps: Tensor::vector(taps),
    })
}

/// `A = softmax(Q·Kᵀ / √d')`, `O = A·V`, where `d'` is the column count of
/// the inputs.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, dq) = q.dims2()?;
    let (lk, dk) = k.dims2()?;
    let (lv, _) = v.dims2()?;
    if dq != dk || lk != lv {
        return Err(Error::dim("scaled_dot_attention", q.shape(), k.shape()));
    }
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (dq as f64).sqrt());
    let weights = scores.softmax_rows()?;
    let out = weights.matmul(v)?;
    Ok((weights, out))
}

/// Blurs one head's output along the sequence axis, column by column.
pub fn blur_on_outputs(head_out: &Tensor, kernel: &BlurKernel) -> Result<Tensor> {
    head_out.conv1d_same(&kernel.taps)
}

/// Blurs one head's values first, then weights them: `A · (V ∗ g)`.
pub fn blur_on_values(values: &Tensor, weights: &Tensor, kernel: &BlurKernel) -> Result<Tensor> {
    weights.matmul(&values.conv1d_same(&kernel.taps)?)
}

/// Query, key and value projections (`d × d` weights, length-`d` biases).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
}

impl AttentionParams {
    /// Zero biases, given weights.
    pub fn from_weights(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let (d, _) = w_q.dims2()?;
        for w in [&w_q, &w_k, &w_v] {
            if w.shape() != [d, d] {
                return Err(Error::dim("attention projection", &[d, d], w.shape()));
            }
        }
        Ok(Self {
            w_q,
            b_q: Tensor::zeros(&[d]),
            w_k,
            b_k: Tensor::zeros(&[d]),
            w_v,
            b_v: Tensor::zeros(&[d]),
        })
    }

    pub(crate) fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.w_q"), &self.w_q),
            (format!("{prefix}.b_q"), &self.b_q),
            (format!("{prefix}.w_k"), &self.w_k),
            (format!("{prefix}.b_k"), &self.b_k),
            (format!("{prefix}.w_v"), &self.w_v),
            (format!("{prefix}.b_v"), &self.b_v),
        ]
    }

    pub(crate) fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.w_q"), &mut self.w_q),
            (format!("{prefix}.b_q"), &mut self.b_q),
            (format!("{prefix}.w_k"), &mut self.w_k),
            (format!("{prefix}.b_k"), &mut self.b_k),
            (format!("{prefix}.w_v"), &mut self.w_v),
            (format!("{prefix}.b_v"), &mut self.b_v),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// Concatenated head outputs, `l × d`.
    pub output: Tensor,
    /// Attention weights per head, each `l × l`.
    pub weights: Vec<Tensor>,
    /// Per-head outputs after any blur, each `l × d/h`.
    pub head_outputs: Vec<Tensor>,
}

/// Tape nodes produced by [`multihead_on_tape`].
#[derive(Clone, Debug)]
pub struct MultiheadVars {
    pub output: Var,
    pub weights: Vec<Var>,
    pub head_outputs: Vec<Var>,
}

/// Multihead self-attention recorded on `tape`. `params` are registered
/// under `prefix`.
pub fn multihead_on_tape(
    tape: &mut GradientTape,
    x: Var,
    params: &AttentionParams,
    prefix: &str,
    cfg: &AttentionConfig,
) -> Result<MultiheadVars> {
    cfg.validate()?;
    let (_, d) = tape.value(x).dims2()?;
    if d != cfg.d_model {
        return Err(Error::dim("multihead input", tape.value(x).shape(), &[cfg.d_model]));
    }
    let kernel = cfg.kernel()?;

    let project = |tape: &mut GradientTape, w: &Tensor, b: &Tensor, name: &str| -> Result<Var> {
        let w = tape.param(&format!("{prefix}.w_{name}"), w);
        let b = tape.param(&format!("{prefix}.b_{name}"), b);
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    };
    let q = project(tape, &params.w_q, &params.b_q, "q")?;
    let k = project(tape, &params.w_k, &params.b_k, "k")?;
    let v = project(tape, &params.w_v, &params.b_v, "v")?;

    let width = cfg.head_dim();
    let inv_sqrt = 1.0 / (width as f64).sqrt();
    let mut weights = Vec::with_capacity(cfg.heads);
    let mut head_outputs = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let (start, end) = (head * width, (head + 1) * width);
        let qh = tape.slice_cols(q, start, end)?;
        let kh = tape.slice_cols(k, start, end)?;
        let vh = tape.slice_cols(v, start, end)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, inv_sqrt);
        let a = tape.softmax_rows(scores)?;
        let out = match (&kernel, cfg.blur_mode) {
            (Some(g), BlurMode::OnOutputs) => {
                let o = tape.matmul(a, vh)?;
                tape.conv1d_same(o, g.taps())?
            }
            (Some(g), BlurMode::OnValues) => {
                let blurred = tape.conv1d_same(vh, g.taps())?;
                tape.matmul(a, blurred)?
            }
            _ => tape.matmul(a, vh)?,
        };
        weights.push(a);
        head_outputs.push(out);
    }
    let output = tape.concat_cols(&head_outputs)?;
    Ok(MultiheadVars {
        output,
        weights,
        head_outputs,
    })
}

/// Multihead self-attention on plain tensors.
pub fn multihead_attention(x: &Tensor, params: &AttentionParams, cfg: &AttentionConfig) -> Result<AttentionOutput> {
    let mut tape = GradientTape::new();
    let xv = tape.constant(x.clone());
    let vars = multihead_on_tape(&mut tape, xv, params, "attn", cfg)?;
    Ok(AttentionOutput {
        output: tape.value(vars.output).clone(),
        weights: vars.weights.iter().map(|&v| tape.value(v).clone()).collect(),
        head_outputs: vars.head_outputs.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}
