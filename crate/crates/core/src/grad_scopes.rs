//! Ready-made gradient checks over the model's building blocks, each at toy
//! size with its own fixed random parameters and a random linear read-out
//! (or the classification loss, for [`Scope::Full`]).

use std::fmt;
use std::str::FromStr;

use crate::attention::{multihead_on_tape, AttentionConfig, AttentionParams, BlurMode};
use crate::autodiff::{GradientTape, Gradients, ParamSet, Var};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
use crate::rng::{seeded, uniform, SeededRng};
use crate::se_fusion::{fuse_on_tape, PoolingStrategy, SeParams};
use crate::tensor::Tensor;
use crate::train::{Model, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Multihead attention with each blur placement.
    Blur,
    /// Excitation gate and weighted-average fusion, with biases.
    Se,
    /// Unblurred multihead attention.
    Attention,
    /// The whole classifier: two layers, six tokens, width 16, two heads,
    /// output blur (k = 3, σ = 0.1) and the excitation gate.
    Full,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Self::Blur, Self::Se, Self::Attention, Self::Full];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Blur => "blur",
            Self::Se => "se",
            Self::Attention => "attention",
            Self::Full => "full",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown gradient-check scope {s:?}")))
    }
}

const SEQ_LEN: usize = 6;
const WIDTH: usize = 16;

fn small_attention(blur_mode: BlurMode) -> AttentionConfig {
    AttentionConfig {
        max_len: SEQ_LEN,
        d_model: WIDTH,
        heads: 2,
        blur_mode,
        window: 3,
        sigma: 0.1,
        normalize_kernel: false,
    }
}

fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -0.5, 0.5)
}

fn attention_params(rng: &mut SeededRng, prefix: &str, into: &mut ParamSet) {
    for name in ["w_q", "w_k", "w_v"] {
        into.insert(format!("{prefix}.{name}"), random(rng, &[WIDTH, WIDTH]));
    }
    for name in ["b_q", "b_k", "b_v"] {
        into.insert(format!("{prefix}.{name}"), random(rng, &[WIDTH]));
    }
}

fn attention_from(params: &ParamSet, prefix: &str) -> AttentionParams {
    let get = |n: &str| params.get(&format!("{prefix}.{n}")).expect("registered above").clone();
    AttentionParams {
        w_q: get("w_q"),
        b_q: get("b_q"),
        w_k: get("w_k"),
        b_k: get("b_k"),
        w_v: get("w_v"),
        b_v: get("b_v"),
    }
}

/// `Σ r ⊙ y` for a fixed random `r`.
fn read_out(tape: &mut GradientTape, y: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone());
    let prod = tape.mul(y, r)?;
    Ok(tape.sum_all(prod))
}

type Objective = Box<dyn Fn(&ParamSet) -> Result<(f64, Gradients)>>;

fn attention_objective(modes: &'static [BlurMode], rng: &mut SeededRng) -> (ParamSet, Objective) {
    let mut params = ParamSet::new();
    params.insert("x", random(rng, &[SEQ_LEN, WIDTH]));
    for i in 0..modes.len() {
        attention_params(rng, &format!("attn{i}"), &mut params);
    }
    let readouts: Vec<Tensor> = modes.iter().map(|_| random(rng, &[SEQ_LEN, WIDTH])).collect();
    let f = move |p: &ParamSet| -> Result<(f64, Gradients)> {
        let mut tape = GradientTape::new();
        let x = tape.param("x", p.get("x").expect("registered above"));
        let mut total = None;
        for (i, (&mode, r)) in modes.iter().zip(&readouts).enumerate() {
            let prefix = format!("attn{i}");
            let out = multihead_on_tape(&mut tape, x, &attention_from(p, &prefix), &prefix, &small_attention(mode))?;
            let term = read_out(&mut tape, out.output, r)?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
        let total = total.expect("at least one mode");
        Ok((tape.value(total).data()[0], tape.backward(total)?))
    };
    (params, Box::new(f))
}

fn se_objective(rng: &mut SeededRng) -> (ParamSet, Objective) {
    const LAYERS: usize = 4;
    let mut params = ParamSet::new();
    for k in 0..LAYERS {
        params.insert(format!("u{k}"), random(rng, &[SEQ_LEN, WIDTH]));
    }
    params.insert("se.w1", random(rng, &[LAYERS, LAYERS / 2]));
    params.insert("se.w2", random(rng, &[LAYERS / 2, LAYERS]));
    params.insert("se.b1", random(rng, &[LAYERS / 2]));
    params.insert("se.b2", random(rng, &[LAYERS]));
    let r = random(rng, &[SEQ_LEN, WIDTH]);
    let f = move |p: &ParamSet| -> Result<(f64, Gradients)> {
        let get = |n: &str| p.get(n).expect("registered above").clone();
        let mut se = SeParams::new(get("se.w1"), get("se.w2"))?;
        se.b1 = Some(get("se.b1"));
        se.b2 = Some(get("se.b2"));
        let mut tape = GradientTape::new();
        let layers: Vec<Var> = (0..LAYERS)
            .map(|k| tape.param(&format!("u{k}"), &get(&format!("u{k}"))))
            .collect();
        let fused = fuse_on_tape(&mut tape, &layers, Some(&se), PoolingStrategy::WeightedAverage)?;
        let total = read_out(&mut tape, fused.pooled, &r)?;
        Ok((tape.value(total).data()[0], tape.backward(total)?))
    };
    (params, Box::new(f))
}

/// The classifier configuration checked by [`Scope::Full`].
pub fn full_scope_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.attention = small_attention(BlurMode::OnOutputs);
    cfg.encoder.vocab_size = 8;
    cfg.encoder.layers = 2;
    cfg.encoder.d_ff = 4 * WIDTH;
    cfg.se = true;
    cfg.se_ratio = 2;
    cfg.pooling = PoolingStrategy::WeightedAverage;
    cfg
}

fn full_objective(rng: &mut SeededRng) -> Result<(ParamSet, Objective)> {
    let cfg = full_scope_config();
    let mut model = Model::init(&cfg, 0)?;
    // Initial weights are tiny; spread them so every path carries signal.
    let mut params = model.params();
    for (_, t) in params.iter_mut() {
        *t = t.add(&random(rng, t.shape()))?;
    }
    model.load_params(&params)?;
    let example = Example {
        tokens: vec![0, 3, 5, 1, 6, 2],
        label: 1,
        tag: None,
    };
    let f = move |p: &ParamSet| -> Result<(f64, Gradients)> {
        let mut m = model.clone();
        m.load_params(p)?;
        m.loss_and_gradients(&example)
    };
    Ok((params, Box::new(f)))
}

/// Runs the check for `scope`. With `inject_error`, the analytic gradient
/// of the first parameter is perturbed by 1 before comparison, which the
/// check must catch.
pub fn check_scope(scope: Scope, seed: u64, inject_error: bool) -> Result<GradCheckReport> {
    let mut rng = seeded(seed);
    let (params, objective) = match scope {
        Scope::Blur => attention_objective(&[BlurMode::OnOutputs, BlurMode::OnValues], &mut rng),
        Scope::Attention => attention_objective(&[BlurMode::None], &mut rng),
        Scope::Se => se_objective(&mut rng),
        Scope::Full => full_objective(&mut rng)?,
    };
    let (_, mut grads) = objective(&params)?;
    if inject_error {
        let first = params.names().next().expect("scopes have parameters").to_string();
        let g = grads.get_mut(&first).expect("every parameter has a gradient");
        *g = g.add(&Tensor::scalar(1.0))?;
    }
    grad_check(&params, &grads, DEFAULT_STEP, |p| objective(p).map(|r| r.0))
}
