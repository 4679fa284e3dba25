mod common;

use common::{binary, rng};
use proptest::prelude::*;
use rand::Rng;
use swinca_core::metrics::{
    aggregate, bf_score, bf_tolerance, boundary, confusion, evaluate_image, region_metrics, ConfusionCounts, ImageEval,
};
use swinca_core::{Shape, Tensor};

/// Direct per-pixel tally: (tp, fp, fn, tn) with lesion = 1.
fn tally(pred: &[f32], target: &[f32]) -> [u64; 4] {
    let mut t = [0u64; 4];
    for i in 0..pred.len() {
        let (p, y) = (pred[i] > 0.5, target[i] > 0.5);
        let slot = match (p, y) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        t[slot] += 1;
    }
    t
}

/// DSC, accuracy, IoU for the region whose pixels are `class`.
fn brute_region(pred: &[f32], target: &[f32], class: bool) -> (f64, f64, f64) {
    let (mut inter, mut union, mut sizes, mut agree) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..pred.len() {
        let p = (pred[i] > 0.5) == class;
        let y = (target[i] > 0.5) == class;
        inter += (p && y) as u64;
        union += (p || y) as u64;
        sizes += p as u64 + y as u64;
        agree += (p == y) as u64;
    }
    let dsc = if sizes == 0 { 1.0 } else { 2.0 * inter as f64 / sizes as f64 };
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    (dsc, agree as f64 / pred.len() as f64, iou)
}

fn random_pair(r: &mut rand_chacha::ChaCha8Rng) -> (Vec<f32>, Vec<f32>) {
    // Vary the lesion density so empty and full masks show up too.
    let p = [0.0, 0.05, 0.3, 0.5, 0.8, 1.0][r.random_range(0..6)];
    let q = [0.0, 0.1, 0.4, 0.6, 1.0][r.random_range(0..5)];
    (binary(64, p, r), binary(64, q, r))
}

#[test]
fn region_metrics_match_brute_force_on_random_masks() {
    let mut r = rng(2024);
    for case in 0..200 {
        let (pred, target) = random_pair(&mut r);
        let cc = confusion(&pred, &target).unwrap();
        let [tp, fp, fn_, tn] = tally(&pred, &target);
        assert_eq!((cc.tp, cc.fp, cc.fn_, cc.tn), (tp, fp, fn_, tn), "case {case}");
        assert_eq!(cc.total(), 64);

        for (counts, class) in [(cc, true), (cc.inverted(), false)] {
            let m = region_metrics(&counts).unwrap();
            let (dsc, acc, iou) = brute_region(&pred, &target, class);
            assert!((m.dsc - dsc).abs() <= 1e-12, "case {case}: dsc {} vs {dsc}", m.dsc);
            assert!((m.accuracy - acc).abs() <= 1e-12);
            assert!((m.iou - iou).abs() <= 1e-12);
            assert!((m.iou - m.dsc / (2.0 - m.dsc)).abs() <= 1e-12, "case {case}: IoU identity");
            assert!(m.iou <= m.dsc + 1e-15);
        }
    }
}

#[test]
fn aggregates_match_brute_force_on_random_corpora() {
    let mut r = rng(77);
    for corpus in 0..20 {
        let n = r.random_range(1..=10);
        let pairs: Vec<_> = (0..n).map(|_| random_pair(&mut r)).collect();
        let evals: Vec<ImageEval> = pairs
            .iter()
            .map(|(p, t)| {
                let shape = Shape::new(1, 1, 8, 8);
                evaluate_image(&Tensor::from_vec(shape, p.clone()).unwrap(), &Tensor::from_vec(shape, t.clone()).unwrap())
                    .unwrap()
            })
            .collect();
        let report = aggregate(&evals).unwrap();

        let all_pred: Vec<f32> = pairs.iter().flat_map(|(p, _)| p.clone()).collect();
        let all_target: Vec<f32> = pairs.iter().flat_map(|(_, t)| t.clone()).collect();
        let total = all_pred.len() as f64;
        let correct = all_pred.iter().zip(&all_target).filter(|(p, t)| p == t).count() as f64;
        assert!((report.global_acc - correct / total).abs() <= 1e-12, "corpus {corpus}");

        let [tp, fp, fn_, tn] = tally(&all_pred, &all_target);
        assert_eq!(report.confusion, ConfusionCounts { tp, fp, fn_, tn });

        let (dsc_l, acc_l, iou_l) = brute_region(&all_pred, &all_target, true);
        let (dsc_b, acc_b, iou_b) = brute_region(&all_pred, &all_target, false);
        let rows = &report.regions;
        assert_eq!((rows[0].region.as_str(), rows[1].region.as_str()), ("lesion", "background"));
        for (row, (dsc, acc, iou)) in rows.iter().zip([(dsc_l, acc_l, iou_l), (dsc_b, acc_b, iou_b)]) {
            assert!((row.dsc - dsc).abs() <= 1e-12);
            assert!((row.accuracy - acc).abs() <= 1e-12);
            assert!((row.iou - iou).abs() <= 1e-12);
        }
        assert!((report.mean_iou - (iou_l + iou_b) / 2.0).abs() <= 1e-12);

        let lesion_share = all_target.iter().filter(|&&t| t == 1.0).count() as f64 / total;
        let weighted = lesion_share * iou_l + (1.0 - lesion_share) * iou_b;
        assert!((report.weighted_iou - weighted).abs() <= 1e-12);

        let recall = |class: bool| {
            let truth = all_target.iter().filter(|&&t| (t == 1.0) == class).count();
            let hit = all_pred.iter().zip(&all_target).filter(|(p, t)| (**t == 1.0) == class && p == t).count();
            let predicted = all_pred.iter().filter(|&&p| (p == 1.0) == class).count();
            match truth {
                0 if predicted == 0 => 1.0,
                0 => 0.0,
                _ => hit as f64 / truth as f64,
            }
        };
        assert!((report.mean_acc - (recall(true) + recall(false)) / 2.0).abs() <= 1e-12);

        let bf = |f: fn(&ImageEval) -> f64| evals.iter().map(f).sum::<f64>() / n as f64;
        let (bf_l, bf_b) = (bf(|e| e.bf_lesion), bf(|e| e.bf_background));
        assert!((report.mean_bf - (bf_l + bf_b) / 2.0).abs() <= 1e-12);
        for v in [report.global_acc, report.mean_acc, report.mean_iou, report.weighted_iou, report.mean_bf] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

fn eval_of(pred: &[f32], target: &[f32], side: usize) -> ImageEval {
    let shape = Shape::new(1, 1, side, side);
    evaluate_image(&Tensor::from_vec(shape, pred.to_vec()).unwrap(), &Tensor::from_vec(shape, target.to_vec()).unwrap())
        .unwrap()
}

#[test]
fn hand_built_two_image_corpus() {
    // Image A: 2x2 lesion in the top-left, prediction adds one false positive.
    #[rustfmt::skip]
    let target_a = [
        1., 1., 0., 0.,
        1., 1., 0., 0.,
        0., 0., 0., 0.,
        0., 0., 0., 0.,
    ];
    #[rustfmt::skip]
    let pred_a = [
        1., 1., 1., 0.,
        1., 1., 0., 0.,
        0., 0., 0., 0.,
        0., 0., 0., 0.,
    ];
    // Image B: no lesion; prediction misses nothing but marks two pixels.
    let target_b = [0.0; 16];
    let mut pred_b = [0.0; 16];
    pred_b[15] = 1.0;
    pred_b[14] = 1.0;

    let report = aggregate(&[eval_of(&pred_a, &target_a, 4), eval_of(&pred_b, &target_b, 4)]).unwrap();
    // Summed: tp 4, fp 3, fn 0, tn 25.
    assert_eq!(report.confusion, ConfusionCounts { tp: 4, fp: 3, fn_: 0, tn: 25 });
    let l = report.lesion();
    assert!((l.dsc - 8.0 / 11.0).abs() < 1e-12);
    assert!((l.iou - 4.0 / 7.0).abs() < 1e-12);
    assert!((l.accuracy - 29.0 / 32.0).abs() < 1e-12);
    let b = &report.regions[1];
    assert!((b.dsc - 50.0 / 53.0).abs() < 1e-12);
    assert!((b.iou - 25.0 / 28.0).abs() < 1e-12);
    assert!((report.global_acc - 29.0 / 32.0).abs() < 1e-12);
    // Recalls: lesion 4/4, background 25/28.
    assert!((report.mean_acc - (1.0 + 25.0 / 28.0) / 2.0).abs() < 1e-12);
    assert!((report.weighted_iou - (4.0 / 32.0 * 4.0 / 7.0 + 28.0 / 32.0 * 25.0 / 28.0)).abs() < 1e-12);
}

#[test]
fn single_region_global_accuracy_equals_region_accuracy() {
    let target = [0.0f32; 16];
    let mut pred = [0.0f32; 16];
    pred[3] = 1.0;
    let report = aggregate(&[eval_of(&pred, &target, 4)]).unwrap();
    assert_eq!(report.global_acc, report.regions[1].accuracy);
    assert_eq!(report.global_acc, report.lesion().accuracy);
    assert!((report.global_acc - 15.0 / 16.0).abs() < 1e-12);
}

#[test]
fn equal_pixel_shares_give_equal_weighted_and_mean_iou() {
    let mut r = rng(5);
    for _ in 0..20 {
        // Half the target pixels are lesion, placed at random.
        let mut target = vec![0.0f32; 64];
        let mut idx: Vec<usize> = (0..64).collect();
        for i in (1..64).rev() {
            idx.swap(i, r.random_range(0..=i));
        }
        for &i in &idx[..32] {
            target[i] = 1.0;
        }
        let pred = binary(64, 0.5, &mut r);
        let report = aggregate(&[eval_of(&pred, &target, 8)]).unwrap();
        assert!((report.weighted_iou - report.mean_iou).abs() < 1e-12);
    }
}

#[test]
fn global_accuracy_ignores_image_order() {
    let mut r = rng(9);
    let evals: Vec<ImageEval> = (0..6)
        .map(|_| {
            let (p, t) = random_pair(&mut r);
            eval_of(&p, &t, 8)
        })
        .collect();
    let fwd = aggregate(&evals).unwrap();
    let rev: Vec<ImageEval> = evals.iter().rev().cloned().collect();
    assert_eq!(fwd.global_acc, aggregate(&rev).unwrap().global_acc);
}

/// Nearest-boundary search over every pixel pair.
fn brute_bf(pb: &[bool], tb: &[bool], w: usize, tol: f64) -> f64 {
    let pts = |b: &[bool]| -> Vec<(f64, f64)> {
        b.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| ((i / w) as f64, (i % w) as f64)).collect()
    };
    let (p, t) = (pts(pb), pts(tb));
    if p.is_empty() && t.is_empty() {
        return 1.0;
    }
    if p.is_empty() || t.is_empty() {
        return 0.0;
    }
    let near = |a: &(f64, f64), set: &[(f64, f64)]| set.iter().any(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= tol);
    let prec = p.iter().filter(|a| near(a, &t)).count() as f64 / p.len() as f64;
    let rec = t.iter().filter(|a| near(a, &p)).count() as f64 / t.len() as f64;
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

fn square(side: usize, y0: usize, x0: usize, len: usize) -> Vec<f32> {
    let mut m = vec![0.0; side * side];
    for y in y0..y0 + len {
        for x in x0..x0 + len {
            m[y * side + x] = 1.0;
        }
    }
    m
}

#[test]
fn bf_score_examples() {
    let side = 32;
    let a = square(side, 8, 8, 10);
    let ba = boundary(&a, side, side);
    assert_eq!(bf_score(&ba, &ba, side, side, 1.0), 1.0);

    let shifted = square(side, 8, 9, 10);
    let bs = boundary(&shifted, side, side);
    assert_eq!(bf_score(&bs, &ba, side, side, 1.5), 1.0);
    assert_eq!(bf_score(&bs, &ba, side, side, 2.0), 1.0);

    let far = square(side, 24, 24, 4);
    let bf = boundary(&far, side, side);
    assert_eq!(bf_score(&bf, &ba, side, side, 1.0), 0.0);

    let empty = vec![false; side * side];
    assert_eq!(bf_score(&empty, &empty, side, side, 1.0), 1.0);
    assert_eq!(bf_score(&empty, &ba, side, side, 1.0), 0.0);
    assert_eq!(bf_tolerance(256, 256), 3.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bf_score_matches_brute_force(seed in any::<u64>(), tol in prop::sample::select(vec![1.0f64, 1.5, 2.0, 3.0])) {
        let mut r = rng(seed);
        let (side, p) = (12, r.random_range(0.1..0.7));
        let a = binary(side * side, p, &mut r);
        let b = binary(side * side, p, &mut r);
        let (ba, bb) = (boundary(&a, side, side), boundary(&b, side, side));
        let got = bf_score(&ba, &bb, side, side, tol);
        prop_assert!((got - brute_bf(&ba, &bb, side, tol)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn iou_dsc_identity_for_any_counts(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
        prop_assume!(tp + fp + fn_ + tn > 0);
        let m = region_metrics(&ConfusionCounts { tp, fp, fn_, tn }).unwrap();
        prop_assert!((m.iou - m.dsc / (2.0 - m.dsc)).abs() <= 1e-12);
        prop_assert!(m.iou <= m.dsc + 1e-15);
        for v in [m.dsc, m.iou, m.accuracy, m.recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
