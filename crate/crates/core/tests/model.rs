use painattn_core::autograd::{grad_check, GradCheckOptions, Layer, Mode};
use painattn_core::layers::{softmax, Conv1d, LayerNorm, Linear};
use painattn_core::model::*;
use painattn_core::tensor::Reduce;
use painattn_core::train::TaskSpec;
use painattn_core::{Error, Rng, Tensor};
use rand::{Rng as _, SeedableRng};

const SEEDS: [u64; 3] = [1, 2, 3];

fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed ^ 0xABCD);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn check(layer: &mut dyn Layer, x: &Tensor, seed: u64, probes: Option<usize>) {
    let opts = GradCheckOptions {
        seed,
        max_probes_per_tensor: probes,
        ..GradCheckOptions::default()
    };
    let report = grad_check(layer, x, &opts).unwrap();
    assert!(
        report.passed(1e-4),
        "{} seed {seed}: max rel error {:e} at {} ({} probes, {} kink probes, kink error {:e}, unresolved {})",
        report.layer,
        report.max_rel_error,
        report.worst,
        report.probes,
        report.kink_probes,
        report.kink_max_rel_error,
        report.unresolved
    );
    // Kink probes are re-checked at the finer step. Every pooled window is a
    // potential switch, so in full branches they are common but never the majority.
    assert!(report.kink_probes * 3 <= report.probes, "{report:?}");
}

fn zero_linear(l: &mut Linear) {
    l.weight.value.fill(0.0);
    l.bias.value.fill(0.0);
}

fn zero_conv(c: &mut Conv1d) {
    c.weight.value.fill(0.0);
    c.bias.value.fill(0.0);
}

/// Kernel-1 convolution copying input channel `i` to every output channel `h*C + i`.
fn replicate(c: &mut Conv1d, tokens: usize, heads: usize) {
    zero_conv(c);
    for h in 0..heads {
        for i in 0..tokens {
            c.weight.value.data_mut()[(h * tokens + i) * tokens + i] = 1.0;
        }
    }
}

// ---------------------------------------------------------------- shape contract

#[test]
fn reference_branch_lengths() {
    let cfg = MscnConfig::reference();
    assert_eq!(cfg.large.lengths(INPUT_LEN).unwrap(), [57, 27, 27, 27, 25]);
    assert_eq!(cfg.small.lengths(INPUT_LEN).unwrap(), [470, 58, 58, 58, 50]);
    assert_eq!(cfg.output_shape(INPUT_LEN).unwrap(), (128, 75));
}

#[test]
fn reference_shapes_for_every_task() {
    let x = random(&[8, 1, INPUT_LEN], 1);
    for task in TaskSpec::all() {
        let cfg = ModelConfig::reference(task.num_classes);
        let trace = cfg.validate().unwrap();
        assert_eq!(trace.mscn, (128, 75));
        assert_eq!(trace.se, (30, 75));
        let mut model = PainAttnNet::new(cfg, 5).unwrap();
        let mut r = rng(0);
        let m = model.mscn.forward(&x, &mut r).unwrap();
        assert_eq!(m.shape(), &[8, 128, 75]);
        let s = model.se.forward(&m, &mut r).unwrap();
        assert_eq!(s.shape(), &[8, 30, 75]);
        let logits = model.forward(&x, &mut r).unwrap();
        assert_eq!(logits.shape(), &[8, task.num_classes], "task {}", task.name);
    }
}

#[test]
fn length_other_than_75_fails_at_build_time() {
    let mut cfg = ModelConfig::reference(2);
    cfg.mscn.small.conv1.stride = 5;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(matches!(PainAttnNet::new(cfg, 0), Err(Error::Config(_))));

    let mut cfg = ModelConfig::reference(2);
    cfg.input_len = 2304;
    assert!(matches!(PainAttnNet::new(cfg, 0), Err(Error::Config(_))));

    let mut cfg = ModelConfig::reference(2);
    cfg.se.in_channels = 64;
    assert!(matches!(PainAttnNet::new(cfg, 0), Err(Error::Config(_))));

    let mut cfg = ModelConfig::reference(2);
    cfg.se.reduction = 7;
    assert!(matches!(PainAttnNet::new(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn mini_config_keeps_lengths() {
    let trace = ModelConfig::mini(5).validate().unwrap();
    assert_eq!(trace.mscn, (16, 75));
    assert_eq!(trace.se, (4, 75));
    assert_eq!(trace.logits, 5);
}

// ---------------------------------------------------------------- multiscale CNN

#[test]
fn mscn_is_deterministic_and_sees_the_first_sample() {
    let cfg = ModelConfig::mini(2);
    let mut a = PainAttnNet::new(cfg.clone(), 3).unwrap();
    let mut b = PainAttnNet::new(cfg, 3).unwrap();
    let zero = Tensor::zeros(&[2, 1, INPUT_LEN]);
    let ya = a.mscn.forward(&zero, &mut rng(1)).unwrap();
    let yb = b.mscn.forward(&zero, &mut rng(1)).unwrap();
    assert_eq!(ya, yb);

    a.set_mode(Mode::Eval);
    let x = random(&[1, 1, INPUT_LEN], 4);
    let mut x2 = x.clone();
    x2.data_mut()[0] += 1.0;
    let y1 = a.mscn.forward(&x, &mut rng(0)).unwrap();
    let y2 = a.mscn.forward(&x2, &mut rng(0)).unwrap();
    assert_ne!(y1, y2);
}

#[test]
fn mscn_gradients() {
    for seed in SEEDS {
        let mut mscn = Mscn::new(&ModelConfig::mini(2).mscn, &mut rng(seed)).unwrap();
        check(&mut mscn, &random(&[2, 1, INPUT_LEN], seed), seed, Some(12));
    }
}

// ---------------------------------------------------------------- SE block

fn se_cfg() -> SeResNetConfig {
    SeResNetConfig {
        in_channels: 6,
        mid_channels: 4,
        reduction: 2,
    }
}

#[test]
fn squeeze_and_scale_examples() {
    let v = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    assert_eq!(squeeze(&v).unwrap().data(), &[2.0]);
    let v = Tensor::new(vec![1, 1, 2], vec![2.0, 4.0]).unwrap();
    let m = scale_channels(&v, &Tensor::new(vec![1, 1], vec![0.5]).unwrap()).unwrap();
    assert_eq!(m.data(), &[1.0, 2.0]);
}

#[test]
fn zero_excitation_halves_every_channel() {
    let mut se = SeResBlock::new(&se_cfg(), &mut rng(1)).unwrap();
    let (w1, w2) = se.excitation_mut();
    zero_linear(w1);
    zero_linear(w2);
    se.forward(&random(&[3, 6, 10], 2), &mut rng(0)).unwrap();
    let alpha = se.last_excitation().unwrap();
    assert_eq!(alpha.shape(), &[3, 4]);
    assert!(alpha.data().iter().all(|&a| a == 0.5));
}

#[test]
fn excitation_stays_inside_unit_interval() {
    for seed in SEEDS {
        let mut se = SeResBlock::new(&se_cfg(), &mut rng(seed)).unwrap();
        se.forward(&random(&[4, 6, 12], seed).scale(50.0), &mut rng(0)).unwrap();
        assert!(se.last_excitation().unwrap().data().iter().all(|&a| a > 0.0 && a < 1.0));
    }
}

#[test]
fn se_output_shape_and_projection() {
    let mut se = SeResBlock::new(&se_cfg(), &mut rng(1)).unwrap();
    assert_eq!(se.forward(&random(&[2, 6, 7], 1), &mut rng(0)).unwrap().shape(), &[2, 4, 7]);
    let same = SeResNetConfig {
        in_channels: 4,
        mid_channels: 4,
        reduction: 4,
    };
    assert!(!same.downsample());
    let mut se = SeResBlock::new(&same, &mut rng(1)).unwrap();
    assert_eq!(se.forward(&random(&[2, 4, 7], 1), &mut rng(0)).unwrap().shape(), &[2, 4, 7]);
    let bad = SeResNetConfig {
        in_channels: 4,
        mid_channels: 3,
        reduction: 5,
    };
    assert!(matches!(bad.bottleneck(), Err(Error::Config(_))));
}

#[test]
fn se_gradients() {
    for seed in SEEDS {
        let mut se = SeResBlock::new(&se_cfg(), &mut rng(seed)).unwrap();
        check(&mut se, &random(&[2, 6, 9], seed), seed, None);
    }
}

// ---------------------------------------------------------------- attention

/// Plain single-head attention over rows of `q`, `k`, `v` (each `C x L`).
fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * l];
    for i in 0..c {
        let e: Vec<f64> = (0..c)
            .map(|j| (0..l).map(|t| q[i * l + t] * k[j * l + t]).sum::<f64>() / (l as f64).sqrt())
            .collect();
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = e.iter().map(|x| (x - m).exp()).sum();
        for j in 0..c {
            let a = (e[j] - m).exp() / z;
            for t in 0..l {
                out[i * l + t] += a * v[j * l + t];
            }
        }
    }
    out
}

fn identity_output(mha: &mut MultiHeadAttention, l: usize) {
    zero_linear(&mut mha.output);
    for t in 0..l {
        mha.output.weight.value.data_mut()[t * l + t] = 1.0;
    }
}

#[test]
fn single_head_with_identity_projection_is_plain_attention() {
    let (c, l) = (4, 6);
    for seed in SEEDS {
        let mut mha = MultiHeadAttention::new(c, l, 1, 3, &mut rng(seed)).unwrap();
        identity_output(&mut mha, l);
        let x = random(&[2, c, l], seed);
        let (q, k, v) = mha.project(&x).unwrap();
        let y = mha.forward(&x, &mut rng(0)).unwrap();
        for b in 0..2 {
            let s = b * c * l..(b + 1) * c * l;
            let oracle = attention_oracle(&q.data()[s.clone()], &k.data()[s.clone()], &v.data()[s.clone()], c, l);
            for (a, o) in y.data()[s].iter().zip(&oracle) {
                assert!((a - o).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_queries_give_uniform_attention() {
    let (c, l) = (5, 4);
    let mut mha = MultiHeadAttention::new(c, l, 1, 2, &mut rng(3)).unwrap();
    zero_conv(&mut mha.query);
    identity_output(&mut mha, l);
    let x = random(&[1, c, l], 3);
    let (_, _, v) = mha.project(&x).unwrap();
    let y = mha.forward(&x, &mut rng(0)).unwrap();
    assert!(mha.last_attention().unwrap().data().iter().all(|&a| (a - 0.2).abs() < 1e-15));
    let mean = v.reduce(Reduce::Mean, 1).unwrap();
    for i in 0..c {
        for t in 0..l {
            assert!((y.data()[i * l + t] - mean.data()[t]).abs() < 1e-12);
        }
    }
}

#[test]
fn two_token_energy_example() {
    let mut mha = MultiHeadAttention::new(2, 2, 1, 1, &mut rng(0)).unwrap();
    for conv in [&mut mha.query, &mut mha.key, &mut mha.value] {
        replicate(conv, 2, 1);
    }
    identity_output(&mut mha, 2);
    // q0 . k0 / sqrt(2) = 1 / sqrt(2) = 0.7071, q0 . k1 = 0
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    mha.forward(&x, &mut rng(0)).unwrap();
    let a = mha.last_attention().unwrap();
    assert!((a.data()[0] - 0.6698).abs() < 1e-4 && (a.data()[1] - 0.3302).abs() < 1e-4);
    let e = std::f64::consts::FRAC_1_SQRT_2.exp();
    assert!((a.data()[0] - e / (e + 1.0)).abs() < 1e-15);
}

#[test]
fn attention_rows_sum_to_one() {
    for seed in SEEDS {
        let mut mha = MultiHeadAttention::new(6, 8, 5, 3, &mut rng(seed)).unwrap();
        mha.forward(&random(&[3, 6, 8], seed).scale(4.0), &mut rng(0)).unwrap();
        let a = mha.last_attention().unwrap();
        assert_eq!(a.shape(), &[3, 5, 6, 6]);
        for row in a.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}

#[test]
fn attention_is_token_permutation_equivariant_without_tcn() {
    let (c, l, h) = (5, 6, 3);
    let mut mha = MultiHeadAttention::new(c, l, h, 1, &mut rng(8)).unwrap();
    for conv in [&mut mha.query, &mut mha.key, &mut mha.value] {
        replicate(conv, c, h);
    }
    let x = random(&[1, c, l], 8);
    let perm = [3, 0, 4, 1, 2];
    let mut xp = Tensor::zeros(&[1, c, l]);
    for (dst, &src) in perm.iter().enumerate() {
        xp.data_mut()[dst * l..(dst + 1) * l].copy_from_slice(&x.data()[src * l..(src + 1) * l]);
    }
    let y = mha.forward(&x, &mut rng(0)).unwrap();
    let yp = mha.forward(&xp, &mut rng(0)).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        for t in 0..l {
            assert!((yp.data()[dst * l + t] - y.data()[src * l + t]).abs() < 1e-12);
        }
    }
}

#[test]
fn query_key_value_paths_are_causal() {
    let (c, l) = (6, 75);
    let mut r = rng(21);
    let mut mha = MultiHeadAttention::new(c, l, 5, 7, &mut r).unwrap();
    let x = random(&[2, c, l], 21);
    let (q0, k0, v0) = mha.project(&x).unwrap();
    for _ in 0..100 {
        let t = r.random_range(0..l);
        let mut xp = x.clone();
        for row in xp.data_mut().chunks_mut(l) {
            row[t] += r.random_range(-3.0..3.0);
        }
        let (q, k, v) = mha.project(&xp).unwrap();
        for (before, after) in [(&q0, &q), (&k0, &k), (&v0, &v)] {
            for (ra, rb) in before.data().chunks(l).zip(after.data().chunks(l)) {
                assert_eq!(ra[..t], rb[..t], "future perturbation at {t} leaked");
            }
        }
    }
}

#[test]
fn attention_gradients() {
    for seed in SEEDS {
        let mut mha = MultiHeadAttention::new(4, 6, 3, 3, &mut rng(seed)).unwrap();
        check(&mut mha, &random(&[2, 4, 6], seed), seed, None);
    }
}

// ---------------------------------------------------------------- encoder

fn enc_cfg(width: usize, blocks: usize) -> EncoderConfig {
    EncoderConfig {
        heads: 2,
        width,
        tcn_kernel: 3,
        ffn_hidden: 7,
        dropout: 0.1,
        blocks,
    }
}

#[test]
fn encoder_identity_path_is_double_layernorm() {
    let (c, l) = (4, 6);
    let mut block = EncoderBlock::new(c, &enc_cfg(l, 1), &mut rng(2)).unwrap();
    zero_conv(&mut block.attention.value);
    block.attention.output.bias.value.fill(0.0);
    zero_linear(&mut block.ffn_in);
    zero_linear(&mut block.ffn_out);
    let x = random(&[2, c, l], 2);
    let y = block.forward(&x, &mut rng(0)).unwrap();
    let mut ln = LayerNorm::new(l).unwrap();
    let once = ln.forward(&x, &mut rng(0)).unwrap();
    let twice = ln.forward(&once, &mut rng(0)).unwrap();
    for (a, b) in y.data().iter().zip(twice.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encoder_preserves_shape() {
    for blocks in 1..=3 {
        let mut cfg = ModelConfig::mini(2);
        cfg.encoder.blocks = blocks;
        let mut model = PainAttnNet::new(cfg, 1).unwrap();
        let f = model.features(&random(&[2, 1, INPUT_LEN], 1), &mut rng(0)).unwrap();
        assert_eq!(f.shape(), &[2, 4, 75]);
        assert_eq!(model.encoder.len(), blocks);
    }
}

#[test]
fn encoder_gradients() {
    for seed in SEEDS {
        let mut block = EncoderBlock::new(4, &enc_cfg(6, 1), &mut rng(seed)).unwrap();
        check(&mut block, &random(&[2, 4, 6], seed), seed, None);
    }
}

// ---------------------------------------------------------------- classifier

#[test]
fn zero_head_gives_uniform_probabilities() {
    let mut head = ClassifierHead::new(12, 5, 5, &mut rng(1)).unwrap();
    zero_linear(&mut head.fc1);
    zero_linear(&mut head.fc2);
    let p = softmax(&head.forward(&random(&[3, 4, 3], 1), &mut rng(0)).unwrap());
    assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn probabilities_follow_logits() {
    let mut model = PainAttnNet::new(ModelConfig::mini(5), 4).unwrap();
    model.set_mode(Mode::Eval);
    let x = random(&[4, 1, INPUT_LEN], 4);
    let logits = model.forward(&x, &mut rng(0)).unwrap();
    let p = model.predict_proba(&x, &mut rng(0)).unwrap();
    for row in p.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(
        p.reduce(Reduce::Argmax, 1).unwrap(),
        logits.reduce(Reduce::Argmax, 1).unwrap()
    );
}

#[test]
fn head_gradients() {
    for seed in SEEDS {
        let mut head = ClassifierHead::new(12, 5, 3, &mut rng(seed)).unwrap();
        check(&mut head, &random(&[2, 4, 3], seed), seed, None);
    }
}

// ---------------------------------------------------------------- full model

#[test]
fn parameter_names_are_hierarchical() {
    let mut model = PainAttnNet::new(ModelConfig::mini(2), 0).unwrap();
    let mut names = Vec::new();
    model.visit_params(&mut |n, _| names.push(n.to_string()));
    for expected in [
        "mscn.large.conv1.weight",
        "mscn.small.bn3.gamma",
        "se.fc1.weight",
        "encoder0.mha.query.weight",
        "encoder0.norm2.bias",
        "head.fc2.bias",
    ] {
        assert!(names.iter().any(|n| n == expected), "{expected} missing from {names:?}");
    }
    let unique: std::collections::BTreeSet<_> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
}

#[test]
fn mini_model_gradients() {
    for seed in SEEDS {
        let mut model = PainAttnNet::new(ModelConfig::mini(3), seed).unwrap();
        check(&mut model, &random(&[3, 1, INPUT_LEN], seed), seed, Some(6));
    }
}
