use proptest::prelude::*;
use sesame_core::data::Example;
use sesame_core::encoder::{encoder_layer_forward, EncoderLayerParams, LAYER_NORM_EPS};
use sesame_core::rng::{seeded, uniform};
use sesame_core::train::{run, Reduction};
use sesame_core::{evaluate, multihead_attention, train, BlurMode, EncoderConfig, Model, ModelConfig, Tensor, TrainConfig};

fn random(seed: u64, shape: &[usize]) -> Tensor {
    uniform(&mut seeded(seed), shape, -0.5, 0.5)
}

fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let (rows, _) = x.dims2().unwrap();
    x.add(&Tensor::new(x.shape(), b.data().repeat(rows)).unwrap()).unwrap()
}

/// Per row: `(x − mean) / sqrt(var + eps) · gain + offset`, biased variance.
fn reference_layer_norm(x: &Tensor, gain: &Tensor, offset: &Tensor) -> Tensor {
    let (_, d) = x.dims2().unwrap();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        out.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * inv * gain.data()[j] + offset.data()[j]));
    }
    Tensor::new(x.shape(), out).unwrap()
}

fn small_encoder(blur_mode: BlurMode) -> EncoderConfig {
    let mut cfg = EncoderConfig::default();
    cfg.vocab_size = 10;
    cfg.layers = 2;
    cfg.attention.max_len = 8;
    cfg.attention.d_model = 8;
    cfg.attention.heads = 2;
    cfg.attention.blur_mode = blur_mode;
    cfg.attention.window = 3;
    cfg.d_ff = 32;
    cfg
}

#[test]
fn layer_matches_its_definition_step_by_step() {
    for mode in [BlurMode::None, BlurMode::OnOutputs, BlurMode::OnValues] {
        let cfg = small_encoder(mode);
        let mut p = EncoderLayerParams::init(&cfg, &mut seeded(3));
        // Non-trivial biases, gains and offsets.
        p.b_o = random(4, &[8]);
        p.b_ff1 = random(5, &[32]);
        p.b_ff2 = random(6, &[8]);
        p.ln1_gain = random(7, &[8]);
        p.ln1_offset = random(8, &[8]);
        p.ln2_gain = random(9, &[8]);
        p.ln2_offset = random(10, &[8]);
        let x = random(11, &[5, 8]);

        let attn = multihead_attention(&x, &p.attention, &cfg.attention).unwrap().output;
        let h = reference_layer_norm(&x.add(&add_bias(&attn.matmul(&p.w_o).unwrap(), &p.b_o)).unwrap(), &p.ln1_gain, &p.ln1_offset);
        let hidden = add_bias(&h.matmul(&p.w_ff1).unwrap(), &p.b_ff1).relu();
        let ff = add_bias(&hidden.matmul(&p.w_ff2).unwrap(), &p.b_ff2);
        let expected = reference_layer_norm(&h.add(&ff).unwrap(), &p.ln2_gain, &p.ln2_offset);

        let got = encoder_layer_forward(&x, &p, &cfg).unwrap();
        assert!(got.max_abs_diff(&expected).unwrap() < 1e-12, "{mode}");
    }
}

fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder = small_encoder(BlurMode::OnOutputs);
    cfg.encoder.layers = 4;
    cfg
}

fn example(tokens: &[usize], label: usize) -> Example {
    Example {
        tokens: tokens.to_vec(),
        label,
        tag: None,
    }
}

fn train_config(model: ModelConfig, seed: u64, epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        model,
        batch_size: 1,
        learning_rate: lr,
        epochs,
        seed,
    }
}

#[test]
fn memorizes_a_single_example() {
    let data = [example(&[0, 3, 5, 1, 7], 1)];
    let cfg = train_config(tiny_model_config(), 0, 600, 1e-3);
    let mut model = Model::init(&cfg.model, cfg.seed).unwrap();
    let losses = train(&mut model, &data, &cfg).unwrap();
    assert!(*losses.last().unwrap() <= 0.01, "final loss {}", losses.last().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn single_example_loss_never_rises_after_the_transient(seed in 0u64..1000, label in 0usize..2) {
        let data = [example(&[0, 2, 9, 4], label)];
        let cfg = train_config(tiny_model_config(), seed, 60, 1e-3);
        let mut model = Model::init(&cfg.model, cfg.seed).unwrap();
        let losses = train(&mut model, &data, &cfg).unwrap();
        for (step, pair) in losses.windows(2).enumerate().skip(10) {
            prop_assert!(pair[1] <= pair[0], "step {}: {} -> {}", step + 2, pair[0], pair[1]);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_and_loss_unchanged(seed in any::<u64>()) {
        let data = [example(&[0, 2, 9, 4], 0), example(&[0, 5, 1, 3, 3], 1)];
        let cfg = train_config(tiny_model_config(), seed, 2, 0.0);
        let mut model = Model::init(&cfg.model, cfg.seed).unwrap();
        let before = model.params();
        let losses = train(&mut model, &data, &cfg).unwrap();
        prop_assert_eq!(model.params(), before);
        let first = model.loss(&data[0]).unwrap();
        let second = model.loss(&data[1]).unwrap();
        for l in losses {
            prop_assert!(l == first || l == second);
        }
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data: Vec<Example> = (0..8).map(|i| example(&[0, i % 10, (3 * i) % 10, 1], i % 2)).collect();
    let mut model_cfg = tiny_model_config();
    model_cfg.reduction = Reduction::Mean;
    let mut cfg = train_config(model_cfg, 5, 2, 1e-2);
    cfg.batch_size = 3;
    let (m1, a) = run(&cfg, &data, &[("dev", &data)]).unwrap();
    let (m2, b) = run(&cfg, &data, &[("dev", &data)]).unwrap();
    assert_eq!(a, b);
    let bits = |m: &Model| -> Vec<u64> { m.params().iter().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect() };
    assert_eq!(bits(&m1), bits(&m2));
    cfg.seed = 6;
    let (_, c) = run(&cfg, &data, &[("dev", &data)]).unwrap();
    assert_ne!(a.per_step_loss, c.per_step_loss);
}

#[test]
fn constant_predictor_scores_half_on_a_balanced_split() {
    // A zeroed head with a bias favouring class 0 always predicts 0.
    let mut model = Model::init(&tiny_model_config(), 0).unwrap();
    model.head.w = Tensor::zeros(model.head.w.shape());
    model.head.b = Tensor::vector(vec![1.0, 0.0]);
    let split: Vec<Example> = (0..10).map(|i| example(&[0, i % 10, 2], i % 2)).collect();
    let e = evaluate(&model, &split).unwrap();
    assert_eq!(e.accuracy, 0.5);
    assert_eq!(e.predictions, vec![0; 10]);

    // Relabelling the split with those predictions makes them perfect.
    let oracle: Vec<Example> = split.iter().map(|x| example(&x.tokens, 0)).collect();
    assert_eq!(evaluate(&model, &oracle).unwrap().accuracy, 1.0);
}

#[test]
fn layer_weights_are_gate_values() {
    let model = Model::init(&tiny_model_config(), 1).unwrap();
    let split = [example(&[0, 1, 2], 0), example(&[0, 4, 4, 4, 1], 1)];
    let weights = evaluate(&model, &split).unwrap().layer_weights.unwrap();
    assert_eq!(weights.len(), 4);
    for (k, w) in weights.iter().enumerate() {
        assert_eq!(w.layer, k + 1);
        assert!(w.weight > 0.0 && w.weight < 1.0);
    }
}
