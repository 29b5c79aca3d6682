//! Squeeze-and-excitation across encoder layers, and the layer pooling
//! strategies that turn the per-layer feature maps into one `l × d` matrix.
//!
//! With `U ∈ R^{l×d×n}` holding one slice per layer:
//!
//! ```text
//! z_k = mean(U[:, :, k])                      squeeze
//! s   = sigmoid(ReLU(z·W1)·W2)                excitation, s ∈ (0, 1)^n
//! ũ_k = s_k · U[:, :, k]                      rescale
//! ũ_avg = Σ_k ũ_k / Σ_k s_k                   weighted average
//! ```
//!
//! When excitation is enabled the selection strategies (`last`,
//! `sum_last_four`, ...) read the rescaled maps `ũ`; without it they read `U`
//! and `weighted_average` degenerates to the plain layer mean.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientTape, Var};
use crate::encoder::{layer_slice, stack_layers};
use crate::error::{Error, Result};
use crate::rng::{truncated_normal, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingStrategy {
    First,
    Second,
    SecondToLast,
    Last,
    SumLastFour,
    SumAll,
    #[default]
    WeightedAverage,
}

impl PoolingStrategy {
    pub const ALL: [PoolingStrategy; 7] = [
        Self::First,
        Self::Second,
        Self::SecondToLast,
        Self::Last,
        Self::SumLastFour,
        Self::SumAll,
        Self::WeightedAverage,
    ];

    /// Zero-based layer indices a selection strategy reads, or `None` for
    /// the weighted average.
    pub fn layers(self, n: usize) -> Result<Option<Vec<usize>>> {
        let need = |min: usize| {
            if n < min {
                Err(Error::config(format!("pooling strategy {self} needs at least {min} layers, model has {n}")))
            } else {
                Ok(())
            }
        };
        Ok(Some(match self {
            Self::First => {
                need(1)?;
                vec![0]
            }
            Self::Second => {
                need(2)?;
                vec![1]
            }
            Self::SecondToLast => {
                need(2)?;
                vec![n - 2]
            }
            Self::Last => {
                need(1)?;
                vec![n - 1]
            }
            Self::SumLastFour => {
                need(4)?;
                (n - 4..n).collect()
            }
            Self::SumAll => {
                need(1)?;
                (0..n).collect()
            }
            Self::WeightedAverage => {
                need(1)?;
                return Ok(None);
            }
        }))
    }
}

impl FromStr for PoolingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown pooling strategy {s:?}")))
    }
}

impl fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::First => "first",
            Self::Second => "second",
            Self::SecondToLast => "second_to_last",
            Self::Last => "last",
            Self::SumLastFour => "sum_last_four",
            Self::SumAll => "sum_all",
            Self::WeightedAverage => "weighted_average",
        })
    }
}

/// Excitation weights. `b1`/`b2` are only present when biases are enabled.
#[derive(Clone, Debug, PartialEq)]
pub struct SeParams {
    /// `n × n/r`.
    pub w1: Tensor,
    /// `n/r × n`.
    pub w2: Tensor,
    pub b1: Option<Tensor>,
    pub b2: Option<Tensor>,
}

impl SeParams {
    pub fn new(w1: Tensor, w2: Tensor) -> Result<Self> {
        let (n, bottleneck) = w1.dims2()?;
        if w2.shape() != [bottleneck, n] {
            return Err(Error::dim("excitation weights", w1.shape(), w2.shape()));
        }
        Ok(Self {
            w1,
            w2,
            b1: None,
            b2: None,
        })
    }

    pub fn init(layers: usize, ratio: usize, with_bias: bool, rng: &mut SeededRng) -> Result<Self> {
        let bottleneck = bottleneck_width(layers, ratio)?;
        let w1 = truncated_normal(rng, &[layers, bottleneck], crate::encoder::INIT_STD);
        let w2 = truncated_normal(rng, &[bottleneck, layers], crate::encoder::INIT_STD);
        let mut p = Self::new(w1, w2)?;
        if with_bias {
            p.b1 = Some(Tensor::zeros(&[bottleneck]));
            p.b2 = Some(Tensor::zeros(&[layers]));
        }
        Ok(p)
    }

    pub fn zeros(layers: usize, ratio: usize) -> Result<Self> {
        let bottleneck = bottleneck_width(layers, ratio)?;
        Self::new(Tensor::zeros(&[layers, bottleneck]), Tensor::zeros(&[bottleneck, layers]))
    }

    pub fn num_layers(&self) -> usize {
        self.w1.shape()[0]
    }

    pub(crate) fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("se.w1".to_string(), &self.w1), ("se.w2".to_string(), &self.w2)];
        if let Some(b) = &self.b1 {
            out.push(("se.b1".to_string(), b));
        }
        if let Some(b) = &self.b2 {
            out.push(("se.b2".to_string(), b));
        }
        out
    }

    pub(crate) fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("se.w1".to_string(), &mut self.w1), ("se.w2".to_string(), &mut self.w2)];
        if let Some(b) = &mut self.b1 {
            out.push(("se.b1".to_string(), b));
        }
        if let Some(b) = &mut self.b2 {
            out.push(("se.b2".to_string(), b));
        }
        out
    }
}

/// `n / r`, requiring exact divisibility.
pub fn bottleneck_width(layers: usize, ratio: usize) -> Result<usize> {
    if ratio == 0 || layers % ratio != 0 || layers / ratio == 0 {
        return Err(Error::config(format!(
            "layer count {layers} is not divisible by bottleneck ratio {ratio}"
        )));
    }
    Ok(layers / ratio)
}

/// Everything the excitation path computes for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionState {
    pub z: Tensor,
    pub s: Tensor,
    pub u_tilde: Tensor,
    pub pooled: Tensor,
}

fn num_layers(u: &Tensor) -> Result<usize> {
    match u.shape() {
        [_, _, n] => Ok(*n),
        other => Err(Error::dim("feature maps must be l × d × n", other, &[])),
    }
}

fn check_weights(u: &Tensor, s: &Tensor) -> Result<usize> {
    let n = num_layers(u)?;
    if s.numel() != n {
        return Err(Error::dim("layer weights", u.shape(), s.shape()));
    }
    Ok(n)
}

/// Global average of every layer slice, `z ∈ R^n`.
pub fn squeeze(u: &Tensor) -> Result<Tensor> {
    let n = num_layers(u)?;
    let mut sums = vec![0.0; n];
    for cell in u.data().chunks(n) {
        for (s, &x) in sums.iter_mut().zip(cell) {
            *s += x;
        }
    }
    let count = (u.numel() / n) as f64;
    Ok(Tensor::vector(sums.into_iter().map(|s| s / count).collect()))
}

/// `s = sigmoid(ReLU(z·W1 [+ b1])·W2 [+ b2])`.
pub fn excite(z: &Tensor, params: &SeParams) -> Result<Tensor> {
    let n = params.num_layers();
    if z.numel() != n {
        return Err(Error::dim("excite", z.shape(), params.w1.shape()));
    }
    let mut hidden = z.reshape(&[1, n])?.matmul(&params.w1)?;
    if let Some(b) = &params.b1 {
        hidden = hidden.add(&b.reshape(hidden.shape())?)?;
    }
    let mut gate = hidden.relu().matmul(&params.w2)?;
    if let Some(b) = &params.b2 {
        gate = gate.add(&b.reshape(gate.shape())?)?;
    }
    gate.sigmoid().reshape(&[n])
}

/// `ũ[:, :, k] = s[k] · U[:, :, k]`.
pub fn rescale(u: &Tensor, s: &Tensor) -> Result<Tensor> {
    let n = check_weights(u, s)?;
    let mut data = u.data().to_vec();
    for cell in data.chunks_mut(n) {
        for (x, &w) in cell.iter_mut().zip(s.data()) {
            *x *= w;
        }
    }
    Tensor::new(u.shape(), data)
}

/// `Σ_k s[k]·U[:, :, k] / Σ_k s[k]`.
pub fn weighted_average(u: &Tensor, s: &Tensor) -> Result<Tensor> {
    let n = check_weights(u, s)?;
    let total = s.sum();
    if !(total > 0.0) {
        return Err(Error::config(format!("layer weights must have a positive sum, got {total}")));
    }
    let (l, d) = (u.shape()[0], u.shape()[1]);
    let data = u
        .data()
        .chunks(n)
        .map(|cell| cell.iter().zip(s.data()).map(|(x, w)| x * w).sum::<f64>() / total)
        .collect();
    Tensor::new(&[l, d], data)
}

/// Reduces feature maps to one `l × d` matrix.
///
/// Selection strategies sum the slices they name. The weighted average is
/// `weighted_average(maps, weights)`, so `maps` should be the raw `U` there;
/// without `weights` every layer counts equally.
pub fn pool(maps: &Tensor, strategy: PoolingStrategy, weights: Option<&Tensor>) -> Result<Tensor> {
    let n = num_layers(maps)?;
    match strategy.layers(n)? {
        Some(indices) => {
            let mut acc = layer_slice(maps, indices[0])?;
            for &k in &indices[1..] {
                acc = acc.add(&layer_slice(maps, k)?)?;
            }
            Ok(acc)
        }
        None => match weights {
            Some(s) => weighted_average(maps, s),
            None => weighted_average(maps, &Tensor::ones(&[n])),
        },
    }
}

/// Squeeze, excite, rescale and weighted average in one pass.
pub fn fusion_state(u: &Tensor, params: &SeParams) -> Result<FusionState> {
    let z = squeeze(u)?;
    let s = excite(&z, params)?;
    let u_tilde = rescale(u, &s)?;
    let pooled = weighted_average(u, &s)?;
    Ok(FusionState { z, s, u_tilde, pooled })
}

/// One row per layer (1-based), in layer order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeight {
    pub layer: usize,
    pub weight: f64,
}

pub fn layer_weight_report(s: &Tensor) -> Vec<LayerWeight> {
    s.data()
        .iter()
        .enumerate()
        .map(|(k, &weight)| LayerWeight { layer: k + 1, weight })
        .collect()
}

/// `layer,weight` CSV with 17 significant digits.
pub fn write_layer_weight_csv<W: Write + ?Sized>(w: &mut W, report: &[LayerWeight]) -> Result<()> {
    writeln!(w, "layer,weight")?;
    for row in report {
        writeln!(w, "{},{}", row.layer, format_sig17(row.weight))?;
    }
    Ok(())
}

/// Plain decimal with 17 significant digits, enough to round-trip an `f64`.
pub fn format_sig17(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (16 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Nodes produced by [`fuse_on_tape`].
#[derive(Clone, Debug)]
pub struct FusionVars {
    pub pooled: Var,
    /// `1 × n` excitation weights, when excitation is enabled.
    pub excitation: Option<Var>,
}

/// Layer fusion recorded on a tape. `layers` are the per-layer `l × d`
/// outputs in order.
pub fn fuse_on_tape(
    tape: &mut GradientTape,
    layers: &[Var],
    se: Option<&SeParams>,
    strategy: PoolingStrategy,
) -> Result<FusionVars> {
    let n = layers.len();
    let selection = strategy.layers(n)?;
    let Some(params) = se else {
        let pooled = match selection {
            Some(indices) => sum_nodes(tape, indices.iter().map(|&k| layers[k]))?,
            None => {
                let total = sum_nodes(tape, layers.iter().copied())?;
                tape.scale(total, 1.0 / n as f64)
            }
        };
        return Ok(FusionVars {
            pooled,
            excitation: None,
        });
    };
    if params.num_layers() != n {
        return Err(Error::config(format!(
            "excitation weights expect {} layers, encoder produced {n}",
            params.num_layers()
        )));
    }

    let descriptors: Vec<Var> = layers.iter().map(|&u| tape.mean_all(u)).collect();
    let z = tape.stack_scalars(&descriptors)?;
    let w1 = tape.param("se.w1", &params.w1);
    let w2 = tape.param("se.w2", &params.w2);
    let mut hidden = tape.matmul(z, w1)?;
    if let Some(b) = &params.b1 {
        let b = tape.param("se.b1", b);
        hidden = tape.add_row_bias(hidden, b)?;
    }
    let hidden = tape.relu(hidden);
    let mut gate = tape.matmul(hidden, w2)?;
    if let Some(b) = &params.b2 {
        let b = tape.param("se.b2", b);
        gate = tape.add_row_bias(gate, b)?;
    }
    let s = tape.sigmoid(gate);

    let mut weights = Vec::with_capacity(n);
    let mut rescaled = Vec::with_capacity(n);
    for (k, &u) in layers.iter().enumerate() {
        let sk = tape.element(s, k)?;
        weights.push(sk);
        rescaled.push(tape.mul_scalar(u, sk)?);
    }
    let pooled = match selection {
        Some(indices) => sum_nodes(tape, indices.iter().map(|&k| rescaled[k]))?,
        None => {
            let numerator = sum_nodes(tape, rescaled.iter().copied())?;
            let stacked = tape.stack_scalars(&weights)?;
            let denominator = tape.sum_all(stacked);
            tape.div_scalar(numerator, denominator)?
        }
    };
    Ok(FusionVars {
        pooled,
        excitation: Some(s),
    })
}

fn sum_nodes(tape: &mut GradientTape, mut nodes: impl Iterator<Item = Var>) -> Result<Var> {
    let mut acc = nodes.next().ok_or_else(|| Error::config("nothing to pool"))?;
    for v in nodes {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Stacks plain layer outputs and pools them exactly as [`fuse_on_tape`]
/// would.
pub fn fuse(layers: &[Tensor], se: Option<&SeParams>, strategy: PoolingStrategy) -> Result<Tensor> {
    let u = stack_layers(layers)?;
    match se {
        Some(params) => {
            let s = excite(&squeeze(&u)?, params)?;
            if strategy == PoolingStrategy::WeightedAverage {
                weighted_average(&u, &s)
            } else {
                pool(&rescale(&u, &s)?, strategy, None)
            }
        }
        None => pool(&u, strategy, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform};

    fn maps(slices: &[Tensor]) -> Tensor {
        stack_layers(slices).unwrap()
    }

    #[test]
    fn squeeze_examples() {
        assert_eq!(squeeze(&Tensor::ones(&[3, 2, 4])).unwrap().data(), &[1.0; 4]);
        assert_eq!(squeeze(&Tensor::zeros(&[3, 2, 2])).unwrap().data(), &[0.0; 2]);
        let u = maps(&[Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()]);
        assert_eq!(squeeze(&u).unwrap().data(), &[2.5]);
    }

    #[test]
    fn excite_examples() {
        let zero = SeParams::zeros(4, 2).unwrap();
        assert_eq!(excite(&Tensor::vector(vec![3.0, -1.0, 2.0, 0.5]), &zero).unwrap().data(), &[0.5; 4]);

        let w1 = Tensor::from_rows(&[[1.0], [0.0]]).unwrap();
        let w2 = Tensor::from_rows(&[[3f64.ln(), 0.0]]).unwrap();
        let p = SeParams::new(w1, w2).unwrap();
        let s = excite(&Tensor::vector(vec![1.0, 0.0]), &p).unwrap();
        assert!((s.data()[0] - 0.75).abs() < 1e-15);
        assert_eq!(s.data()[1], 0.5);

        let w1 = Tensor::from_rows(&[[0.3], [0.9]]).unwrap();
        let w2 = Tensor::from_rows(&[[4.0, -7.0]]).unwrap();
        let p = SeParams::new(w1, w2).unwrap();
        assert_eq!(excite(&Tensor::vector(vec![-5.0, -5.0]), &p).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn excite_shape_mismatch() {
        let p = SeParams::zeros(4, 2).unwrap();
        assert!(matches!(excite(&Tensor::vector(vec![1.0; 3]), &p), Err(Error::Dimension { .. })));
        assert!(matches!(SeParams::zeros(4, 3), Err(Error::Config(_))));
    }

    #[test]
    fn rescale_examples() {
        let mut rng = seeded(0);
        let slices: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[3, 2], -1.0, 1.0)).collect();
        let u = maps(&slices);
        assert_eq!(rescale(&u, &Tensor::ones(&[2])).unwrap(), u);
        let r = rescale(&u, &Tensor::vector(vec![0.2, 0.8])).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(r.at(&[i, j, 0]), 0.2 * slices[0].at(&[i, j]));
                assert_eq!(r.at(&[i, j, 1]), 0.8 * slices[1].at(&[i, j]));
            }
        }
        let single = maps(&[Tensor::full(&[2, 2], 3.0)]);
        assert_eq!(rescale(&single, &Tensor::vector(vec![0.5])).unwrap().data(), &[1.5; 4]);
    }

    #[test]
    fn weighted_average_examples() {
        let u = maps(&[Tensor::ones(&[2, 3]), Tensor::full(&[2, 3], 3.0)]);
        let avg = weighted_average(&u, &Tensor::vector(vec![0.25, 0.75])).unwrap();
        assert!(avg.data().iter().all(|&x| (x - 2.5).abs() < 1e-15));
        for c in [0.1, 0.5, 0.9] {
            let avg = weighted_average(&u, &Tensor::vector(vec![c, c])).unwrap();
            assert!(avg.data().iter().all(|&x| (x - 2.0).abs() < 1e-15));
        }
        let tiny = 1e-9;
        let avg = weighted_average(&u, &Tensor::vector(vec![1.0, tiny])).unwrap();
        assert!(avg.data().iter().all(|&x| (x - 1.0).abs() <= 2.0 * tiny * 3.0));
    }

    #[test]
    fn pooling_strategies() {
        let u = maps(&[Tensor::ones(&[2, 2]), Tensor::full(&[2, 2], 3.0)]);
        assert_eq!(pool(&u, PoolingStrategy::Last, None).unwrap(), Tensor::full(&[2, 2], 3.0));
        assert_eq!(pool(&u, PoolingStrategy::First, None).unwrap(), Tensor::ones(&[2, 2]));
        assert_eq!(pool(&u, PoolingStrategy::SumAll, None).unwrap(), Tensor::full(&[2, 2], 4.0));
        let err = pool(&u, PoolingStrategy::SumLastFour, None).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("sum_last_four")), "{err}");
    }

    #[test]
    fn sum_last_four_of_twelve() {
        let mut rng = seeded(5);
        let slices: Vec<Tensor> = (0..12).map(|_| uniform(&mut rng, &[3, 2], -1.0, 1.0)).collect();
        let pooled = pool(&maps(&slices), PoolingStrategy::SumLastFour, None).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let manual: f64 = slices[8..12].iter().map(|s| s.at(&[i, j])).sum();
                assert!((pooled.at(&[i, j]) - manual).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for p in PoolingStrategy::ALL {
            assert_eq!(p.to_string().parse::<PoolingStrategy>().unwrap(), p);
        }
        assert!("middle".parse::<PoolingStrategy>().is_err());
    }

    #[test]
    fn report_rows() {
        let r = layer_weight_report(&Tensor::vector(vec![0.5, 0.5]));
        assert_eq!(r, vec![LayerWeight { layer: 1, weight: 0.5 }, LayerWeight { layer: 2, weight: 0.5 }]);
        let r = layer_weight_report(&Tensor::vector(vec![0.1, 0.2, 0.7]));
        assert!(r.windows(2).all(|w| w[0].weight < w[1].weight && w[0].layer < w[1].layer));
        let mut out = Vec::new();
        write_layer_weight_csv(&mut out, &r).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next(), Some("layer,weight"));
        assert_eq!(text.lines().nth(1), Some("1,0.10000000000000001"));
    }

    #[test]
    fn sig17_round_trips() {
        for x in [0.5, 0.1, 1.0 / 3.0, 123.456, 7e-5] {
            let s = format_sig17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
            let digits = s.trim_start_matches(['0', '.']).replace('.', "");
            assert_eq!(digits.len(), 17, "{s}");
        }
    }
}
