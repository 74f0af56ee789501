use painattn_core::autograd::Layer;
use painattn_core::layers::{softmax, Linear};
use painattn_core::model::{ModelConfig, PainAttnNet};
use painattn_core::synth::{generate_cohort, generate_subject, ProtocolConfig, WindowRecord};
use painattn_core::train::*;
use painattn_core::{Error, Rng, Tensor};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn one_subject() -> Vec<WindowRecord> {
    generate_subject(&ProtocolConfig::default(), 1, 1, 0.05, 1.0).unwrap()
}

fn params(model: &mut dyn Layer) -> Vec<Tensor> {
    let mut out = Vec::new();
    model.visit_params(&mut |_, p| out.push(p.value.clone()));
    out
}

// ---------------------------------------------------------------- tasks

#[test]
fn task_label_maps() {
    let five = TaskSpec::by_name("5way").unwrap();
    assert_eq!(five.num_classes, 5);
    assert!((0..5u8).all(|l| five.class_of(l) == Some(l as usize)));
    let any = TaskSpec::by_name("pain-any").unwrap();
    assert_eq!(any.label_map, [Some(0), Some(1), Some(1), Some(1), Some(1)]);
    for i in 1..=4usize {
        let t = TaskSpec::by_name(&format!("t0t{i}")).unwrap();
        assert_eq!(t.num_classes, 2);
        for l in 0..5usize {
            let expected = match l {
                0 => Some(0),
                _ if l == i => Some(1),
                _ => None,
            };
            assert_eq!(t.class_of(l as u8), expected);
        }
    }
    assert!(TaskSpec::by_name("t0t5").is_none());
    assert_eq!(TaskSpec::all().len(), 6);
}

#[test]
fn task_dataset_sizes() {
    let recs = one_subject();
    let d = build_task_dataset(&recs, TaskSpec::baseline_vs(4)).unwrap();
    assert_eq!((d.len(), d.class_counts()), (40, vec![20, 20]));
    assert!(d.subjects.iter().all(|&s| s == 1));
    let d = build_task_dataset(&recs, TaskSpec::FIVE_WAY).unwrap();
    assert_eq!((d.len(), d.class_counts()), (100, vec![20; 5]));
    let d = build_task_dataset(&recs, TaskSpec::PAIN_ANY).unwrap();
    assert_eq!((d.len(), d.class_counts()), (100, vec![20, 80]));
    assert_eq!(d.batch(&[0, 3]).shape(), &[2, 1, 2816]);
}

#[test]
fn empty_class_and_bad_level_are_rejected() {
    let only_baseline: Vec<_> = one_subject().into_iter().filter(|r| r.level == 0).collect();
    assert!(matches!(
        build_task_dataset(&only_baseline, TaskSpec::baseline_vs(2)),
        Err(Error::Config(_))
    ));
    let mut recs = one_subject();
    recs[3].level = 7;
    assert!(matches!(build_task_dataset(&recs, TaskSpec::FIVE_WAY), Err(Error::Domain(_))));
}

// ---------------------------------------------------------------- loss

#[test]
fn cross_entropy_examples() {
    let (loss, _) = cross_entropy(&Tensor::matrix(&[[1.0, 0.0], [0.0, 1.0]]), &[0, 1], None).unwrap();
    assert_eq!(loss, 0.0);
    let (loss, grad) = cross_entropy(&Tensor::matrix(&[[0.5, 0.5]]), &[1], None).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(grad.data(), &[0.5, -0.5]);
    assert!(matches!(
        cross_entropy(&Tensor::matrix(&[[0.5, 0.5]]), &[2], None),
        Err(Error::Domain(_))
    ));
    // a zero probability is floored rather than producing infinity
    let (loss, _) = cross_entropy(&Tensor::matrix(&[[1.0, 0.0]]), &[1], None).unwrap();
    assert!((loss + 1e-12f64.ln()).abs() < 1e-9);
}

fn loss_of_logits(logits: &Tensor, labels: &[usize], w: Option<&[f64]>) -> f64 {
    cross_entropy(&softmax(logits), labels, w).unwrap().0
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut r = Rng::seed_from_u64(3);
    for weighted in [false, true] {
        let (n, k) = (6, 4);
        let logits = Tensor::from_fn(&[n, k], |_| r.random_range(-3.0..3.0));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let weights = inverse_frequency_weights(&labels, k);
        let w = weighted.then_some(weights.as_slice());
        let (_, grad) = cross_entropy(&softmax(&logits), &labels, w).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let numeric = (loss_of_logits(&plus, &labels, w) - loss_of_logits(&minus, &labels, w)) / (2.0 * h);
            assert!((grad.data()[i] - numeric).abs() < 1e-6, "weighted={weighted} [{i}]");
        }
    }
}

#[test]
fn class_weights_balance_an_imbalanced_set() {
    let labels = [0, 1, 1, 1, 1];
    let w = inverse_frequency_weights(&labels, 2);
    assert_eq!(w, vec![2.5, 0.625]);
    // each class then carries half of the total weight
    assert_eq!(w[0] * 1.0, w[1] * 4.0);
    assert_eq!(inverse_frequency_weights(&[0, 1, 0, 1], 2), vec![1.0, 1.0]);
}

proptest! {
    #[test]
    fn cross_entropy_is_non_negative(seed in any::<u64>(), n in 1usize..8, k in 2usize..6) {
        let mut r = Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[n, k], |_| r.random_range(-20.0..20.0));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let (loss, grad) = cross_entropy(&softmax(&logits), &labels, None).unwrap();
        prop_assert!(loss >= 0.0);
        // gradient rows of softmax cross-entropy sum to zero
        for row in grad.data().chunks(k) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}

// ---------------------------------------------------------------- Adam

fn linear_with_grad(g: f64) -> Linear {
    let mut lin = Linear::with_params(Tensor::matrix(&[[0.3, -0.2]]), Tensor::vector(&[0.1])).unwrap();
    lin.visit_params(&mut |_, p| p.grad.fill(g));
    lin
}

#[test]
fn zero_gradient_leaves_parameters() {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut lin = linear_with_grad(0.0);
    let before = params(&mut lin);
    let mut adam = Adam::new();
    for _ in 0..5 {
        adam.update(&mut lin, &cfg).unwrap();
    }
    assert_eq!(params(&mut lin), before);
}

#[test]
fn weight_decay_alone_shrinks_parameters() {
    let mut lin = linear_with_grad(0.0);
    let mut adam = Adam::new();
    adam.update(&mut lin, &TrainConfig::default()).unwrap();
    // first bias-corrected step is lr * g / (|g| + eps) with g = wd * w
    let w = lin.weight.value.data();
    for (now, start) in w.iter().zip([0.3f64, -0.2]) {
        let g = 1e-3 * start;
        let expected = start - 1e-3 * g / (g.abs() + 1e-8);
        assert!((now - expected).abs() < 1e-15, "{now} vs {expected}");
    }
}

#[test]
fn constant_gradient_gives_unit_steps() {
    // with a constant gradient both bias-corrected moments equal g and g^2 exactly,
    // so every step is lr * g / (|g| + eps)
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    for g in [0.7, -2.0, 1e-3] {
        let mut lin = linear_with_grad(g);
        let mut adam = Adam::new();
        let mut prev = lin.weight.value.data()[0];
        for step in 0..200 {
            adam.update(&mut lin, &cfg).unwrap();
            let now = lin.weight.value.data()[0];
            let expected = cfg.lr * g / (g.abs() + cfg.eps);
            assert!(((prev - now) - expected).abs() < 1e-12, "g {g} step {step}");
            prev = now;
        }
        assert!(((0.3 - prev) / 200.0).abs() - cfg.lr < 1e-8);
    }
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut r = Rng::seed_from_u64(11);
        let mut lin = Linear::new(4, 3, &mut Rng::seed_from_u64(1)).unwrap();
        let mut adam = Adam::new();
        for _ in 0..10 {
            lin.visit_params(&mut |_, p| {
                for g in p.grad.data_mut() {
                    *g = r.random_range(-1.0..1.0);
                }
            });
            adam.update(&mut lin, &TrainConfig::default()).unwrap();
        }
        params(&mut lin)
    };
    assert_eq!(run(), run());
}

// ---------------------------------------------------------------- epoch loop

fn small_set() -> TaskDataset {
    let recs = generate_cohort(&ProtocolConfig::default(), 2, 2, 0.05, 1.0).unwrap();
    let d = build_task_dataset(&recs, TaskSpec::baseline_vs(4)).unwrap();
    let rows: Vec<usize> = (0..d.len()).step_by(4).collect();
    d.subset(&rows)
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let data = small_set();
    let mut model = PainAttnNet::new(ModelConfig::mini(2), 1).unwrap();
    let before = params(&mut model);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = train_epochs(&mut model, &data, &cfg).unwrap();
    assert!(out.loss_curve.is_empty());
    assert_eq!(out.steps, 0);
    assert_eq!(params(&mut model), before);
}

#[test]
fn same_seed_same_curve_and_partial_batches_count() {
    let data = small_set();
    assert_eq!(data.len(), 20);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 7,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = PainAttnNet::new(ModelConfig::mini(2), 1).unwrap();
        let out = train_epochs(&mut model, &data, &cfg).unwrap();
        (out, params(&mut model))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    // 20 windows in batches of 7: 7 + 7 + 6
    assert_eq!(a.steps, 9);
    assert_eq!(a.loss_curve.len(), 3);
}

#[test]
fn non_finite_input_aborts_with_position() {
    let mut data = small_set();
    data.samples[5] = f32::NAN;
    let mut model = PainAttnNet::new(ModelConfig::mini(2), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    match train_epochs(&mut model, &data, &cfg) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("epoch 0") && msg.contains("batch"), "{msg}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let data = small_set();
    let mut model = PainAttnNet::new(ModelConfig::mini(5), 1).unwrap();
    assert!(matches!(
        train_epochs(&mut model, &data, &TrainConfig::default()),
        Err(Error::Config(_))
    ));
}

// ---------------------------------------------------------------- cross-validation

fn five_subjects() -> TaskDataset {
    let recs = generate_cohort(&ProtocolConfig::default(), 4, 5, 0.05, 1.0).unwrap();
    build_task_dataset(&recs, TaskSpec::baseline_vs(4)).unwrap()
}

#[test]
fn fold_plans_partition_subjects() {
    let data = five_subjects();
    let plans = fold_plans(&data).unwrap();
    assert_eq!(plans.len(), 5);
    let tests: Vec<u16> = plans.iter().map(|p| p.test_subject).collect();
    assert_eq!(tests, vec![1, 2, 3, 4, 5]);
    for p in &plans {
        p.check_no_leakage().unwrap();
        assert_eq!(p.train_subjects.len(), 4);
        assert!(!p.train_subjects.contains(&p.test_subject));
    }
    let single = data.subset(&data.rows_where(|s| s == 2));
    assert!(matches!(fold_plans(&single), Err(Error::Domain(_))));
}

#[test]
fn leaking_plan_is_an_invariant_violation() {
    let data = five_subjects();
    let plan = FoldPlan {
        test_subject: 3,
        train_subjects: vec![1, 2, 3],
    };
    assert!(matches!(plan.check_no_leakage(), Err(Error::Invariant(_))));
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    assert!(matches!(
        run_fold(&data, &plan, &ModelConfig::mini(2), &cfg),
        Err(Error::Invariant(_))
    ));
}

#[test]
fn pooled_predictions_cover_every_window() {
    let data = five_subjects();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 32,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = loocv(&data, &ModelConfig::mini(2), &cfg).unwrap();
    assert_eq!(out.folds.len(), 5);
    assert_eq!(out.report.matrix.total(), data.len() as u64);
    for f in &out.folds {
        assert_eq!(f.truth.len(), 40);
        assert_eq!(f.loss_curve.len(), 1);
    }
    // pooling is order independent
    let mut reversed = out.folds.clone();
    reversed.reverse();
    assert_eq!(pool_folds(reversed, 2).unwrap(), out);
}

#[test]
fn fold_seeds_depend_on_subject() {
    assert_ne!(fold_seed(7, 1), fold_seed(7, 2));
    assert_eq!(fold_seed(7, 1), fold_seed(7, 1));
}

#[test]
fn baseline_on_clean_data() {
    let data = five_subjects();
    let b = MeanThresholdBaseline::fit(&data).unwrap();
    assert_eq!(b.class_means.len(), 2);
    assert!(b.class_means[1] > b.class_means[0]);
    assert_eq!(baseline_loocv(&data).unwrap().acc, 1.0);
}
