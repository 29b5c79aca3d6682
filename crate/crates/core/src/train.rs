//! Classifier, training loop, evaluation and the blur-σ sweep.
//!
//! A [`Model`] is the encoder, an optional excitation gate, a layer pooling
//! strategy, a sequence reduction (first position or mean) and a linear head.
//! Training minimizes cross-entropy with Adam. Every number it produces is a
//! function of the seed, the configuration and the data.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientTape, Gradients, ParamSet, Var};
use crate::checkpoint::{self, Manifest};
use crate::data::{score_examples, Example, HeuristicTable};
use crate::encoder::{stack_on_tape, EncoderConfig, EncoderParams, INIT_STD};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, truncated_normal};
use crate::se_fusion::{fuse_on_tape, LayerWeight, PoolingStrategy, SeParams};
use crate::tensor::Tensor;

/// Sequence-to-vector reduction ahead of the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// The first position, where the `[CLS]` token sits.
    #[default]
    Cls,
    Mean,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cls => "cls",
            Self::Mean => "mean",
        })
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Self::Cls),
            "mean" => Ok(Self::Mean),
            other => Err(Error::config(format!("unknown reduction {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Excitation gate on the layer outputs.
    pub se: bool,
    /// Excitation bottleneck ratio `r`; the hidden width is `n / r`.
    pub se_ratio: usize,
    pub se_bias: bool,
    pub pooling: PoolingStrategy,
    pub reduction: Reduction,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            se: true,
            se_ratio: 2,
            se_bias: false,
            pooling: PoolingStrategy::WeightedAverage,
            reduction: Reduction::Cls,
            classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.classes < 2 {
            return Err(Error::config("a classifier needs at least two classes"));
        }
        if self.se {
            crate::se_fusion::bottleneck_width(self.encoder.layers, self.se_ratio)?;
        }
        self.pooling.layers(self.encoder.layers)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 16,
            learning_rate: 1e-3,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning_rate must be a non-negative number, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        Ok(())
    }
}

/// The linear classifier on the reduced sequence vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `d × classes`.
    pub w: Tensor,
    /// `classes`.
    pub b: Tensor,
}

/// Logits `reduce(pooled) · W + b` for a plain `l × d` pooled representation.
pub fn classify(pooled: &Tensor, head: &Head, reduction: Reduction) -> Result<Tensor> {
    let mut tape = GradientTape::new();
    let x = tape.constant(pooled.clone());
    let logits = head_on_tape(&mut tape, x, head, reduction)?;
    Ok(tape.value(logits).clone())
}

fn head_on_tape(tape: &mut GradientTape, pooled: Var, head: &Head, reduction: Reduction) -> Result<Var> {
    let v = match reduction {
        Reduction::Cls => tape.select_row(pooled, 0)?,
        Reduction::Mean => tape.mean_rows(pooled)?,
    };
    let w = tape.param("head.w", &head.w);
    let b = tape.param("head.b", &head.b);
    let logits = tape.matmul(v, w)?;
    tape.add_row_bias(logits, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub se: Option<SeParams>,
    pub head: Head,
}

/// Nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `1 × classes`.
    pub logits: Var,
    /// `1 × n` excitation weights, when the gate is enabled.
    pub excitation: Option<Var>,
}

impl Model {
    /// Draws every weight from the seed. Embedding, encoder, gate and head
    /// use one stream, in that order.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let encoder = EncoderParams::init(&config.encoder, &mut rng);
        let se = if config.se {
            Some(SeParams::init(config.encoder.layers, config.se_ratio, config.se_bias, &mut rng)?)
        } else {
            None
        };
        let head = Head {
            w: truncated_normal(&mut rng, &[config.encoder.attention.d_model, config.classes], INIT_STD),
            b: Tensor::zeros(&[config.classes]),
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            se,
            head,
        })
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named();
        if let Some(se) = &self.se {
            out.extend(se.named());
        }
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_mut();
        if let Some(se) = &mut self.se {
            out.extend(se.named_mut());
        }
        out.push(("head.w".into(), &mut self.head.w));
        out.push(("head.b".into(), &mut self.head.b));
        out
    }

    /// Copies of every parameter, in a fixed order.
    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, t) in self.named() {
            p.insert(name, t.clone());
        }
        p
    }

    pub fn manifest(&self) -> Manifest {
        checkpoint::manifest(&self.params())
    }

    /// Overwrites every parameter. Names and shapes must match exactly; the
    /// error lists every disagreement.
    pub fn load_params(&mut self, params: &ParamSet) -> Result<()> {
        let report = checkpoint::shape_report(&self.manifest(), &checkpoint::manifest(params));
        if !report.is_empty() {
            return Err(Error::Checkpoint(report));
        }
        for (name, t) in self.named_mut() {
            *t = params.get(&name).expect("checked by shape_report").clone();
        }
        Ok(())
    }

    pub fn forward_on_tape(&self, tape: &mut GradientTape, tokens: &[usize]) -> Result<ForwardVars> {
        let layers = stack_on_tape(tape, tokens, &self.encoder, &self.config.encoder)?;
        let fused = fuse_on_tape(tape, &layers, self.se.as_ref(), self.config.pooling)?;
        let logits = head_on_tape(tape, fused.pooled, &self.head, self.config.reduction)?;
        Ok(ForwardVars {
            logits,
            excitation: fused.excitation,
        })
    }

    /// `classes` logits.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = GradientTape::new();
        let out = self.forward_on_tape(&mut tape, tokens)?;
        tape.value(out.logits).reshape(&[self.config.classes])
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<usize> {
        Ok(argmax(self.logits(tokens)?.data()))
    }

    /// Cross-entropy of one example and its gradient for every parameter.
    pub fn loss_and_gradients(&self, example: &Example) -> Result<(f64, Gradients)> {
        let mut tape = GradientTape::new();
        let out = self.forward_on_tape(&mut tape, &example.tokens)?;
        let loss = tape.cross_entropy(out.logits, example.label)?;
        Ok((tape.value(loss).data()[0], tape.backward(loss)?))
    }

    pub fn loss(&self, example: &Example) -> Result<f64> {
        let mut tape = GradientTape::new();
        let out = self.forward_on_tape(&mut tape, &example.tokens)?;
        let loss = tape.cross_entropy(out.logits, example.label)?;
        Ok(tape.value(loss).data()[0])
    }
}

/// First index of the largest value.
fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    /// One update of every model parameter. Missing gradients count as zero.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in model.named_mut() {
            let Some(g) = grads.get(&name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
            if !self.m.contains(&name) {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let m = self.m.get_mut(&name).expect("inserted above").data_mut();
            let v = self.v.get_mut(&name).expect("inserted above").data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Trains `model` in place and returns the mean batch loss of every step.
///
/// Each epoch visits the data in a fresh seeded permutation. A non-finite
/// loss aborts with [`Error::Divergence`] carrying the 1-based step.
pub fn train(model: &mut Model, data: &[Example], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("no training data"));
    }
    let mut rng = seeded(derive_seed(cfg.seed, 1));
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut total = Gradients::new();
            let mut loss = 0.0;
            for &i in batch {
                let (l, g) = model.loss_and_gradients(&data[i])?;
                loss += l;
                total.accumulate(&g)?;
            }
            let scale = 1.0 / batch.len() as f64;
            total.scale(scale);
            loss *= scale;
            losses.push(loss);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: losses.len(),
                    loss,
                });
            }
            adam.step(model, &total)?;
        }
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<usize>,
    /// Present when any example carries a heuristic tag.
    pub heuristic_table: Option<HeuristicTable>,
    /// Excitation weight of each layer, averaged over the split.
    pub layer_weights: Option<Vec<LayerWeight>>,
}

pub fn evaluate(model: &Model, split: &[Example]) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let n = model.config.encoder.layers;
    let mut predictions = Vec::with_capacity(split.len());
    let mut weight_sums = vec![0.0; n];
    for e in split {
        let mut tape = GradientTape::new();
        let out = model.forward_on_tape(&mut tape, &e.tokens)?;
        predictions.push(argmax(tape.value(out.logits).data()));
        if let Some(s) = out.excitation {
            for (acc, &x) in weight_sums.iter_mut().zip(tape.value(s).data()) {
                *acc += x;
            }
        }
    }
    let correct = predictions.iter().zip(split).filter(|(p, e)| **p == e.label).count();
    let heuristic_table = if split.iter().any(|e| e.tag.is_some()) {
        Some(score_examples(&predictions, split)?)
    } else {
        None
    };
    let layer_weights = model.se.as_ref().map(|_| {
        weight_sums
            .iter()
            .enumerate()
            .map(|(k, &s)| LayerWeight {
                layer: k + 1,
                weight: s / split.len() as f64,
            })
            .collect()
    });
    Ok(Evaluation {
        accuracy: correct as f64 / split.len() as f64,
        correct,
        total: split.len(),
        predictions,
        heuristic_table,
        layer_weights,
    })
}

/// Everything a training run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config: TrainConfig,
    pub per_step_loss: Vec<f64>,
    pub split_accuracies: BTreeMap<String, f64>,
    pub heuristic_table: Option<HeuristicTable>,
    pub layer_weights: Option<Vec<LayerWeight>>,
}

/// Initializes from `cfg.seed`, trains on `train_split`, then evaluates on
/// `train` and every named split. The heuristic table and layer weights come
/// from the last named split.
pub fn run(cfg: &TrainConfig, train_split: &[Example], eval_splits: &[(&str, &[Example])]) -> Result<(Model, Metrics)> {
    let mut model = Model::init(&cfg.model, cfg.seed)?;
    let per_step_loss = train(&mut model, train_split, cfg)?;
    let mut split_accuracies = BTreeMap::new();
    split_accuracies.insert("train".to_string(), evaluate(&model, train_split)?.accuracy);
    let mut heuristic_table = None;
    let mut layer_weights = None;
    for (name, split) in eval_splits {
        let e = evaluate(&model, split)?;
        split_accuracies.insert(name.to_string(), e.accuracy);
        heuristic_table = e.heuristic_table;
        layer_weights = e.layer_weights;
    }
    Ok((
        model,
        Metrics {
            config: cfg.clone(),
            per_step_loss,
            split_accuracies,
            heuristic_table,
            layer_weights,
        },
    ))
}

/// Blur standard deviations searched for the local-pattern task.
pub const PAPER_SIGMA_GRID: [f64; 4] = [1e-2, 1e-1, 3e-1, 5e-1];

/// One grid point of a sweep.
#[derive(Clone, Debug)]
pub struct SweepCell<T> {
    pub index: usize,
    pub sigma: f64,
    /// `seed + index`.
    pub seed: u64,
    /// Dev accuracy and the run's payload, or the error that stopped it.
    pub outcome: std::result::Result<(f64, T), String>,
}

impl<T> SweepCell<T> {
    pub fn dev_accuracy(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|o| o.0)
    }
}

/// Runs `cell(index, sigma, seed)` for every grid point on up to `threads`
/// threads. A failing cell is recorded and the rest still run; results are
/// in grid order regardless of scheduling.
pub fn sigma_sweep_with<T, F>(grid: &[f64], seed: u64, threads: usize, cell: F) -> Result<Vec<SweepCell<T>>>
where
    T: Send,
    F: Fn(usize, f64, u64) -> Result<(f64, T)> + Sync,
{
    if grid.is_empty() {
        return Err(Error::config("empty sigma grid"));
    }
    let run = |index: usize| {
        let sigma = grid[index];
        let cell_seed = derive_seed(seed, index as u64);
        SweepCell {
            index,
            sigma,
            seed: cell_seed,
            outcome: cell(index, sigma, cell_seed).map_err(|e| e.to_string()),
        }
    };
    let threads = threads.clamp(1, grid.len());
    if threads == 1 {
        return Ok((0..grid.len()).map(run).collect());
    }
    let mut cells: Vec<SweepCell<T>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let run = &run;
                scope.spawn(move || (t..grid.len()).step_by(threads).map(run).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    cells.sort_by_key(|c| c.index);
    Ok(cells)
}

/// Index of the best dev accuracy; ties go to the smaller sigma.
pub fn best_cell<T>(cells: &[SweepCell<T>]) -> Option<usize> {
    cells
        .iter()
        .filter_map(|c| c.dev_accuracy().map(|a| (c.index, c.sigma, a)))
        .fold(None, |best: Option<(usize, f64, f64)>, (i, s, a)| match best {
            Some((_, bs, ba)) if ba > a || (ba == a && bs <= s) => best,
            _ => Some((i, s, a)),
        })
        .map(|b| b.0)
}

/// Trains one model per sigma (with `cfg`'s other settings) and scores it on
/// `dev`.
pub fn sigma_sweep(
    cfg: &TrainConfig,
    grid: &[f64],
    train_split: &[Example],
    dev: &[Example],
    threads: usize,
) -> Result<Vec<SweepCell<(Model, Metrics)>>> {
    sigma_sweep_with(grid, cfg.seed, threads, |_, sigma, seed| {
        let mut cell_cfg = cfg.clone();
        cell_cfg.seed = seed;
        cell_cfg.model.encoder.attention.sigma = sigma;
        let (model, metrics) = run(&cell_cfg, train_split, &[("dev", dev)])?;
        Ok((metrics.split_accuracies["dev"], (model, metrics)))
    })
}
