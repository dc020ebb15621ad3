use proptest::prelude::*;
use radiomae::datamodel::LabeledTarget;
use radiomae::evalstat::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Reference values computed with scipy 1.15 (stats.shapiro, ttest_ind,
// mannwhitneyu, t.ppf) and frozen here.

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1e-300)
}

#[test]
fn shapiro_wilk_matches_reference() {
    let cases: &[(&[f64], f64, f64)] = &[
        (&[0.1, 0.5, 2.0], 0.899501661129568, 0.383917196063138),
        (&[1.2, 0.4, 3.3, 2.2, 1.9], 0.9923530746525187, 0.9872507341987439),
        (&[0.00123, 0.298746, -0.274138, -0.890592, -0.454671, -0.991647, 0.060144, 1.340215], 0.9320911509872256, 0.5353012542540798),
        (&[0.575333, 0.300534, 0.541136, 0.312146, 0.89977, 1.073701, 1.88425, 0.222071, 3.144673, 0.735857, 0.348373], 0.7581595531420812, 0.0026566164141658697),
        (&[-1.267446, 0.271264, 0.156751, -0.186931, -2.51676, -0.538693, -0.048501, 0.113309, -1.530136, -0.477753, -0.978519, -0.808837, 1.060899, -0.807535, -0.032522, 0.88439, -0.5836, -0.111702, 0.110464, 0.063782], 0.9509054812802007, 0.38104402255390885),
        (&[3.795412, 1.748099, 2.243039, 0.144947, 0.302554, 0.238774, 1.148245, 1.223253, 0.127217, 0.383855, 1.067887, 0.068701, 0.098201, 0.871409, 1.874, 2.696352, 0.706095, 1.306072, 0.763546, 0.937058, 0.144847, 2.494997, 0.884279, 0.875212, 0.026353, 1.085041, 1.061857, 1.064204, 0.568831, 1.363631, 1.573667, 0.650021, 0.35114, 1.699883, 0.672579, 0.750772, 0.111447, 0.24509, 2.047488, 0.727852, 0.024791, 1.326697, 0.491553, 2.951864, 0.842607, 0.976582, 0.433996, 0.019379, 5.383633, 0.469286], 0.813706113625039, 1.8412608132011535e-06),
    ];
    for (x, w, p) in cases {
        let (gw, gp) = shapiro_wilk(x).unwrap();
        assert!((gw - w).abs() < 1e-5, "n={} W {gw} vs {w}", x.len());
        assert!(close(gp, *p, 1e-3), "n={} p {gp} vs {p}", x.len());
    }
    assert!(shapiro_wilk(&[1.0, 1.0, 1.0]).is_err());
    assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
}

#[test]
fn t_test_matches_reference() {
    let a = [-0.33987, 1.052126, -0.0054, 0.583382, -1.290893, 0.34668, -1.688204];
    let b = [-1.535329, 0.195523, -0.399928, 0.664053, 2.744757, -0.331723, -0.123944, 0.705404, 0.993013];
    let (t, p) = t_test(&a, &b).unwrap();
    assert!(close(t, -0.9241007681108656, 1e-10));
    assert!(close(p, 0.37108798050777103, 1e-8));
}

#[test]
fn mann_whitney_matches_reference() {
    let r = mann_whitney(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
    assert_eq!(r.u, 0.0);
    assert!(r.exact);
    assert!(close(r.p_value, 1.0 / 3.0, 1e-12));

    let r = mann_whitney(&[0.3, 1.1, 2.5, 4.0, 0.9], &[2.2, 5.1, 3.3, 6.0, 4.4, 7.7]).unwrap();
    assert_eq!(r.u, 3.0);
    assert!(close(r.p_value, 0.030303030303030304, 1e-12));

    let a: Vec<f64> = (0..10).map(f64::from).collect();
    let b: Vec<f64> = (10..20).map(f64::from).collect();
    let r = mann_whitney(&a, &b).unwrap();
    assert!(close(r.p_value, 1.082508822446903e-05, 1e-10));
    assert!(r.p_value < 1e-3);

    let r = mann_whitney(&[1., 2., 2., 3., 5., 5., 5., 8.], &[2., 4., 5., 6., 6., 9., 10.]).unwrap();
    assert!(!r.exact);
    assert_eq!(r.u, 14.5);
    assert!(close(r.p_value, 0.1272539397501806, 1e-10));

    let x = [-0.176406, -0.20593, 0.702463, 0.519908, -1.033676, -0.079181, 0.035287, -1.054485, 0.259839, -0.857956, 0.972067, 0.192746, 0.089306, -0.591028, -0.11861, -1.997746, -1.131407, 0.36284, -2.128567, 0.846609];
    let y = [-0.946096, 1.556739, -0.045497, 1.578991, 0.930951, -0.736835, 2.049149, 2.241707, 0.734195, 0.526084, 0.640133, -0.175152, 1.898587, 0.257108, 0.74881, 0.006704, 0.173927, -0.477725, 2.057069, 0.645912];
    let r = mann_whitney(&x, &y).unwrap();
    assert_eq!(r.u, 98.0);
    assert!(close(r.p_value, 0.006040329507995924, 1e-10));
}

fn brute_u(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

#[test]
fn u_statistic_matches_rank_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let a: Vec<f64> = (0..rng.gen_range(1..15)).map(|_| rng.gen_range(0..8) as f64).collect();
        let b: Vec<f64> = (0..rng.gen_range(1..15)).map(|_| rng.gen_range(0..8) as f64).collect();
        assert_eq!(mann_whitney(&a, &b).unwrap().u, brute_u(&a, &b));
    }
}

#[test]
fn exact_p_matches_permutation_enumeration() {
    // all C(8,4) splits of 8 distinct values
    let vals: Vec<f64> = (0..8).map(f64::from).collect();
    let a = [0.0, 2.0, 3.0, 6.0];
    let b = [1.0, 4.0, 5.0, 7.0];
    let u_obs = brute_u(&a, &b);
    let mut us = Vec::new();
    for mask in 0u32..256 {
        if mask.count_ones() != 4 {
            continue;
        }
        let (x, y): (Vec<f64>, Vec<f64>) = (0..8).map(|i| (mask >> i & 1 == 1, vals[i])).fold((vec![], vec![]), |(mut x, mut y), (m, v)| {
            if m { x.push(v) } else { y.push(v) }
            (x, y)
        });
        us.push(brute_u(&x, &y));
    }
    let n = us.len() as f64;
    let lo = us.iter().filter(|&&u| u <= u_obs).count() as f64 / n;
    let hi = us.iter().filter(|&&u| u >= u_obs).count() as f64 / n;
    let want = (2.0 * lo.min(hi)).min(1.0);
    assert!((mann_whitney(&a, &b).unwrap().p_value - want).abs() < 1e-12);
}

#[test]
fn identical_groups_are_not_significant() {
    let g = [0.2, 0.3, 0.4, 0.5, 0.6];
    let r = mann_whitney(&g, &g).unwrap();
    assert!(r.p_value > 0.99);
    assert_eq!(stars(r.p_value), "ns");
}

#[test]
fn disjoint_groups_of_twenty() {
    let a: Vec<f64> = (0..20).map(|i| i as f64 * 0.01).collect();
    let b: Vec<f64> = (0..20).map(|i| 1.0 + i as f64 * 0.01).collect();
    assert!(mann_whitney(&a, &b).unwrap().p_value < 1e-6);
}

#[test]
fn star_thresholds() {
    assert_eq!(stars(0.2), "ns");
    assert_eq!(stars(0.04), "*");
    assert_eq!(stars(0.009), "**");
    assert_eq!(stars(0.0009), "***");
    assert_eq!(stars(0.00009), "****");
}

#[test]
fn fold_ci_examples() {
    let (m, lo, hi) = fold_ci(&[0.7; 5], 0.95).unwrap();
    assert_eq!((m, lo, hi), (0.7, 0.7, 0.7));
    let (m, lo, hi) = fold_ci(&[0.0, 1.0], 0.95).unwrap();
    assert_eq!(m, 0.5);
    assert!(close(hi - m, 0.5 * 12.706204736432095, 1e-9));
    assert!(close(m - lo, 0.5 * 12.706204736432095, 1e-9));
    let (_, lo, hi) = fold_ci(&[0.81, 0.84, 0.79, 0.88, 0.83], 0.95).unwrap();
    assert!(close(lo, 0.7878931251800768, 1e-9));
    assert!(close(hi, 0.8721068748199229, 1e-9));
    assert!(fold_ci(&[1.0], 0.95).is_err());
    let r = MetricReport::from_values("auroc", vec![0.81, 0.84, 0.79, 0.88, 0.83], 0.95).unwrap();
    assert!(r.ci_lower <= r.mean && r.mean <= r.ci_upper && r.n == 5);
}

#[test]
fn compare_models_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let a: Vec<f64> = (0..30).map(|_| rng.sample(normal)).collect();
    let b: Vec<f64> = a.iter().map(|v| v + 1e-3).collect();
    let r = compare_models(&a, &b, 0.05).unwrap();
    assert_eq!(r.test_name, TestName::TTest);
    assert!(r.p_value > 0.5);

    let exp = rand_distr::Exp::new(1.0f64).unwrap();
    let skewed: Vec<f64> = (0..40).map(|_| rng.sample(exp).powi(3)).collect();
    let r = compare_models(&skewed, &a, 0.05).unwrap();
    assert_eq!(r.test_name, TestName::MannWhitney);

    let lo: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let hi: Vec<f64> = (0..10).map(|i| 100.0 + i as f64 * 7.0).collect();
    assert!(compare_models(&lo, &hi, 0.05).unwrap().p_value < 1e-3);

    let r = compare_models(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], 0.05).unwrap();
    assert_eq!(r.test_name, TestName::MannWhitney);
    assert!(!r.warnings.is_empty());
    assert!(compare_models(&[1.0, 2.0], &[1.0, 2.0, 3.0], 0.05).is_err());
}

fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    brute_u(&pos, &neg) / (pos.len() * neg.len()) as f64
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.5; 6], &[false, true, false, true, true, false]).unwrap(), 0.5);
    assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
}

proptest! {
    #[test]
    fn auroc_equals_pair_counting(seed in any::<u64>(), n in 2usize..200, levels in 2u32..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = auroc(&scores, &labels).unwrap();
        prop_assert!((a - brute_auroc(&scores, &labels)).abs() < 1e-12);
        let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(a, auroc(&t, &labels).unwrap());
    }

    #[test]
    fn auroc_negation_complements(seed in any::<u64>(), n in 2usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|i| i as f64 + rng.gen::<f64>() * 0.5).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auroc(&scores, &labels).unwrap() + auroc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compare_models_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() + 0.2).collect();
        let ab = compare_models(&a, &b, 0.05).unwrap();
        let ba = compare_models(&b, &a, 0.05).unwrap();
        prop_assert_eq!(ab.test_name, ba.test_name);
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
    }
}

#[test]
fn classification_examples() {
    // confusion [[8,2],[4,6]]
    let mut pred = vec![0; 8];
    pred.extend([1, 1]);
    pred.extend([0; 4]);
    pred.extend([1; 6]);
    let mut truth = vec![0; 10];
    truth.extend([1; 10]);
    let m = classification_metrics(&pred, &truth, 2).unwrap();
    assert!((m.balanced_accuracy - 0.7).abs() < 1e-12);
    assert_eq!(m.confusion, vec![vec![8, 2], vec![4, 6]]);
    assert!((m.precision - 0.75).abs() < 1e-12);
    assert!((m.recall - 0.6).abs() < 1e-12);

    let perfect = classification_metrics(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
    assert_eq!((perfect.balanced_accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0));

    // hand-counted 3-class case
    let truth = [0, 0, 0, 1, 1, 2, 2, 2, 2];
    let pred = [0, 1, 0, 1, 2, 2, 2, 0, 2];
    let m = classification_metrics(&pred, &truth, 3).unwrap();
    let recall = [2.0 / 3.0, 0.5, 0.75];
    let precision = [2.0 / 3.0, 0.5, 0.75];
    let f1: Vec<f64> = (0..3).map(|c| 2.0 * precision[c] * recall[c] / (precision[c] + recall[c])).collect();
    assert!((m.balanced_accuracy - recall.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert!((m.f1 - f1.iter().sum::<f64>() / 3.0).abs() < 1e-12);

    let absent = classification_metrics(&[0, 1, 1], &[0, 1, 1], 3).unwrap();
    assert_eq!(absent.warnings.len(), 1);
    assert_eq!(absent.balanced_accuracy, 1.0);
}

#[test]
fn regression_examples() {
    assert_eq!(regression_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), RegressionMetrics { mae: 0.0, rmse: 0.0 });
    let r = regression_metrics(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
    assert_eq!((r.mae, r.rmse), (1.0, 1.0));
    let r = regression_metrics(&[0.0, 2.0], &[0.0, 0.0]).unwrap();
    assert_eq!(r.mae, 1.0);
    assert!((r.rmse - 2f64.sqrt()).abs() < 1e-15);
    assert!(regression_metrics(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn grouped_confusion_partitions() {
    let pred = [0, 1, 2, 1, 0, 2];
    let labels: Vec<LabeledTarget> = vec![
        LabeledTarget::class(0),
        LabeledTarget::class(1),
        LabeledTarget::class(1),
        LabeledTarget::masked(),
        LabeledTarget::class(0),
        LabeledTarget::class(2),
    ];
    let one = grouped_confusion(&pred, &labels, &[Some("a"); 6], 3).unwrap();
    let m = &one["a"];
    assert_eq!(m.iter().flatten().sum::<u64>(), 5);
    assert_eq!((0..3).map(|c| m[c][c]).sum::<u64>(), 4);

    let groups = [Some("a"), Some("b"), None, Some("a"), Some("b"), None];
    let split = grouped_confusion(&pred, &labels, &groups, 3).unwrap();
    assert!(split.contains_key("other"));
    let mut sum = vec![vec![0u64; 3]; 3];
    for g in split.values() {
        for i in 0..3 {
            for j in 0..3 {
                sum[i][j] += g[i][j];
            }
        }
    }
    assert_eq!(&sum, m);
}

#[test]
fn ovr_auroc_skips_missing_classes() {
    let probs = vec![vec![0.8, 0.1, 0.1], vec![0.2, 0.7, 0.1], vec![0.6, 0.3, 0.1]];
    let (a, w) = auroc_ovr(&probs, &[0, 1, 0], 3).unwrap();
    assert_eq!(a, 1.0);
    assert_eq!(w.len(), 1);
}
