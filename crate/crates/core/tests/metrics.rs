use painattn_core::metrics::*;
use painattn_core::Rng;
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

/// Brute-force scores computed straight from the label lists.
struct Oracle {
    acc: f64,
    mf1: f64,
    kappa: f64,
}

fn oracle(k: usize, truth: &[usize], pred: &[usize]) -> Oracle {
    let n = truth.len() as f64;
    let agree = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64;
    let acc = agree / n;
    let mut f1_sum = 0.0;
    let mut pe = 0.0;
    for c in 0..k {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                _ => {}
            }
        }
        // F1 = 2TP / (2TP + FP + FN); zero when the class is never true or never predicted
        if tp + fp > 0.0 && tp + fn_ > 0.0 && tp > 0.0 {
            f1_sum += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
        pe += ((tp + fn_) / n) * ((tp + fp) / n);
    }
    let kappa = if pe >= 1.0 {
        if acc >= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (acc - pe) / (1.0 - pe)
    };
    Oracle {
        acc,
        mf1: f1_sum / k as f64,
        kappa,
    }
}

/// Predictions that are correct with probability `skill`, otherwise drawn from a skewed prior.
fn fixture(rng: &mut Rng, k: usize, n: usize) -> (Vec<usize>, Vec<usize>) {
    let skill: f64 = rng.random_range(0.0..1.0);
    let skew: usize = rng.random_range(0..k);
    let truth: Vec<usize> = (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                skew
            } else {
                rng.random_range(0..k)
            }
        })
        .collect();
    let pred = truth
        .iter()
        .map(|&t| {
            if rng.random_bool(skill) {
                t
            } else if rng.random_bool(0.5) {
                skew
            } else {
                rng.random_range(0..k)
            }
        })
        .collect();
    (truth, pred)
}

#[test]
fn thousand_random_fixtures_match_the_oracle() {
    let mut rng = Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let k = if case % 2 == 0 { 2 } else { 5 };
        let (truth, pred) = fixture(&mut rng, k, 200);
        let cm = ConfusionMatrix::from_labels(k, &truth, &pred).unwrap();
        let o = oracle(k, &truth, &pred);
        assert!((accuracy(&cm).unwrap() - o.acc).abs() < 1e-12, "case {case}");
        assert!((macro_f1(&cm).unwrap() - o.mf1).abs() < 1e-12, "case {case}");
        assert!((cohen_kappa(&cm).unwrap() - o.kappa).abs() < 1e-12, "case {case}");
    }
}

#[test]
fn degenerate_fixtures_match_the_oracle() {
    let cases: [(usize, Vec<usize>, Vec<usize>); 4] = [
        (2, vec![0; 10], vec![0; 10]),
        (2, vec![0; 10], vec![1; 10]),
        (5, vec![3; 7], vec![3, 3, 1, 3, 3, 3, 3]),
        (5, (0..10).map(|i| i % 5).collect(), vec![2; 10]),
    ];
    for (k, truth, pred) in cases {
        let cm = ConfusionMatrix::from_labels(k, &truth, &pred).unwrap();
        let o = oracle(k, &truth, &pred);
        assert_eq!(accuracy(&cm).unwrap(), o.acc);
        assert!((macro_f1(&cm).unwrap() - o.mf1).abs() < 1e-12);
        assert!((cohen_kappa(&cm).unwrap() - o.kappa).abs() < 1e-12);
    }
}

#[test]
fn merging_equals_pooling_the_labels() {
    let mut rng = Rng::seed_from_u64(5);
    let (t1, p1) = fixture(&mut rng, 5, 80);
    let (t2, p2) = fixture(&mut rng, 5, 50);
    let mut a = ConfusionMatrix::from_labels(5, &t1, &p1).unwrap();
    a.merge(&ConfusionMatrix::from_labels(5, &t2, &p2).unwrap()).unwrap();
    let all_t: Vec<_> = t1.iter().chain(&t2).copied().collect();
    let all_p: Vec<_> = p1.iter().chain(&p2).copied().collect();
    assert_eq!(a, ConfusionMatrix::from_labels(5, &all_t, &all_p).unwrap());
    assert!(a.merge(&ConfusionMatrix::new(2).unwrap()).is_err());
}

#[test]
fn report_snapshot() {
    let cm = ConfusionMatrix::from_counts(2, vec![8, 2, 1, 9]).unwrap();
    let text = MetricsReport::from_matrix(cm).unwrap().to_string();
    let expected = "\
classes=2
samples=20
acc=0.850000
mf1=0.849624
kappa=0.700000
class0.precision=0.888889 class0.recall=0.800000 class0.f1=0.842105
class1.precision=0.818182 class1.recall=0.900000 class1.f1=0.857143
confusion0=8,2
confusion1=1,9
";
    assert_eq!(text, expected);
}

proptest! {
    #[test]
    fn metrics_ignore_sample_order(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = Rng::seed_from_u64(seed);
        let (truth, pred) = fixture(&mut rng, k, 60);
        let mut idx: Vec<usize> = (0..truth.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        let t2: Vec<_> = idx.iter().map(|&i| truth[i]).collect();
        let p2: Vec<_> = idx.iter().map(|&i| pred[i]).collect();
        let a = ConfusionMatrix::from_labels(k, &truth, &pred).unwrap();
        let b = ConfusionMatrix::from_labels(k, &t2, &p2).unwrap();
        prop_assert_eq!(&a, &b);
    }

    #[test]
    fn metrics_ignore_class_names(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = Rng::seed_from_u64(seed);
        let (truth, pred) = fixture(&mut rng, k, 60);
        let mut perm: Vec<usize> = (0..k).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let a = ConfusionMatrix::from_labels(k, &truth, &pred).unwrap();
        let b = ConfusionMatrix::from_labels(
            k,
            &truth.iter().map(|&t| perm[t]).collect::<Vec<_>>(),
            &pred.iter().map(|&p| perm[p]).collect::<Vec<_>>(),
        )
        .unwrap();
        prop_assert_eq!(accuracy(&a).unwrap(), accuracy(&b).unwrap());
        prop_assert!((macro_f1(&a).unwrap() - macro_f1(&b).unwrap()).abs() < 1e-12);
        prop_assert!((cohen_kappa(&a).unwrap() - cohen_kappa(&b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn scores_stay_in_range(seed in any::<u64>(), k in 2usize..6, n in 1usize..100) {
        let mut rng = Rng::seed_from_u64(seed);
        let (truth, pred) = fixture(&mut rng, k, n);
        let cm = ConfusionMatrix::from_labels(k, &truth, &pred).unwrap();
        let acc = accuracy(&cm).unwrap();
        let mf1 = macro_f1(&cm).unwrap();
        let kappa = cohen_kappa(&cm).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!((0.0..=1.0).contains(&mf1));
        prop_assert!((-1.0..=1.0).contains(&kappa));
        prop_assert_eq!(cm.total(), n as u64);
        if cm.is_diagonal() {
            prop_assert_eq!(acc, 1.0);
            prop_assert_eq!(kappa, 1.0);
        }
    }
}
