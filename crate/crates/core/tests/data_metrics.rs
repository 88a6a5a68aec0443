use clarity_core::autodiff::Tape;
use clarity_core::conditioning::{SceneCondition, NUM_CLASSES};
use clarity_core::metrics::{argmax, derive_edges, metrics, ConfusionMatrix};
use clarity_core::synth::synth_generate;
use clarity_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight from set definitions: per class, count pixels in truth, in
/// prediction, in both.
fn brute_force(truth: &[usize], pred: &[usize], classes: usize, skip_bg: bool) -> (f64, f64, Vec<Option<f64>>) {
    let mut ious = Vec::new();
    let (mut iou_sum, mut iou_n, mut acc_sum, mut acc_n) = (0.0, 0, 0.0, 0);
    for c in 0..classes {
        let in_t = truth.iter().filter(|&&t| t == c).count();
        let in_p = pred.iter().filter(|&&p| p == c).count();
        let both = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p == c).count();
        let union = in_t + in_p - both;
        let iou = (union > 0).then(|| both as f64 / union as f64);
        ious.push(iou);
        if skip_bg && c == 0 {
            continue;
        }
        if let Some(v) = iou {
            iou_sum += v;
            iou_n += 1;
        }
        if in_t > 0 {
            acc_sum += both as f64 / in_t as f64;
            acc_n += 1;
        }
    }
    (iou_sum / iou_n as f64, acc_sum / acc_n as f64, ious)
}

#[test]
fn metrics_match_brute_force_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..100 {
        let classes = 2 + trial % 8;
        let truth: Vec<usize> = (0..256).map(|_| rng.gen_range(0..classes)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.gen_bool(0.6) { t } else { rng.gen_range(0..classes) })
            .collect();
        let mut cm = ConfusionMatrix::new(classes);
        cm.add(&truth, &pred).unwrap();
        for skip_bg in [false, true] {
            let m = metrics(&cm, skip_bg).unwrap();
            let (miou, macc, ious) = brute_force(&truth, &pred, classes, skip_bg);
            assert!((m.miou - miou).abs() < 1e-12);
            assert!((m.macc - macc).abs() < 1e-12);
            for (a, b) in m.iou.iter().zip(&ious) {
                assert_eq!(a.is_some(), b.is_some());
                if let (Some(a), Some(b)) = (a, b) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn merged_matrices_equal_joint(
        a in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        b in prop::collection::vec((0usize..4, 0usize..4), 1..60),
    ) {
        let split = |v: &[(usize, usize)]| -> (Vec<usize>, Vec<usize>) { v.iter().cloned().unzip() };
        let (ta, pa) = split(&a);
        let (tb, pb) = split(&b);
        let mut left = ConfusionMatrix::new(4);
        left.add(&ta, &pa).unwrap();
        let mut right = ConfusionMatrix::new(4);
        right.add(&tb, &pb).unwrap();
        left.merge(&right).unwrap();
        let mut joint = ConfusionMatrix::new(4);
        joint.add(&[ta, tb].concat(), &[pa, pb].concat()).unwrap();
        prop_assert_eq!(left, joint);
    }

    #[test]
    fn miou_in_unit_interval(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..100)) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let mut cm = ConfusionMatrix::new(5);
        cm.add(&t, &p).unwrap();
        let m = metrics(&cm, false).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.miou) && (0.0..=1.0).contains(&m.macc));
    }
}

#[test]
fn perfect_prediction_scores_one() {
    let truth: Vec<usize> = (0..64).map(|i| i % 3).collect();
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    cm.add(&truth, &truth).unwrap();
    let m = metrics(&cm, false).unwrap();
    assert_eq!((m.miou, m.macc), (1.0, 1.0));
    assert!(m.iou[5].is_none());
}

#[test]
fn argmax_and_edges() {
    let logits = Tensor::<f64>::new(vec![3, 1, 3], vec![0.0, 2.0, 1.0, 1.0, 2.0, 0.0, 0.5, 0.0, 1.0]).unwrap();
    assert_eq!(argmax(&logits).unwrap(), vec![1, 0, 0]);
    let labels = vec![0, 0, 1, 0, 0, 1, 0, 0, 1];
    let edges = derive_edges(&labels, 3, 3).unwrap();
    assert_eq!(edges.iter().filter(|&&e| e).count(), 6);
    assert!(derive_edges(&[0; 9], 3, 3).unwrap().iter().all(|&e| !e));
}

fn bce(z: f64, y: bool) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[test]
fn focal_without_focusing_is_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..20 {
        let n = rng.gen_range(1..40);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let mut tape = Tape::<f64>::new();
        let zv = tape.leaf(Tensor::new(vec![1, 1, n], z.clone()).unwrap()).unwrap();
        let l = tape.focal(zv, &y, 0.0).unwrap();
        let want = z.iter().zip(&y).map(|(&z, &y)| bce(z, y)).sum::<f64>() / n as f64;
        assert!((tape.value(l).data()[0] - want).abs() < 1e-7);
    }
}

proptest! {
    #[test]
    fn focal_shrinks_with_gamma(z in -5.0f64..5.0, y in any::<bool>(), g in 0.1f64..4.0) {
        let run = |gamma: f64| {
            let mut tape = Tape::<f64>::new();
            let zv = tape.leaf(Tensor::new(vec![1], vec![z]).unwrap()).unwrap();
            let l = tape.focal(zv, &[y], gamma).unwrap();
            tape.value(l).data()[0]
        };
        prop_assert!(run(g) <= run(0.0) + 1e-15);
        prop_assert!(run(g) >= 0.0);
    }

    #[test]
    fn cross_entropy_non_negative(logits in prop::collection::vec(-8.0f64..8.0, 12), labels in prop::collection::vec(0usize..3, 4)) {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::new(vec![3, 2, 2], logits).unwrap()).unwrap();
        let l = tape.weighted_ce(z, &labels, &[1.0, 2.0, 0.5]).unwrap();
        prop_assert!(tape.value(l).data()[0] >= 0.0);
    }
}

fn luminance(rgb: &Tensor<f32>) -> Vec<f64> {
    let plane = rgb.numel() / 3;
    let d = rgb.data();
    (0..plane)
        .map(|i| 0.299 * d[i] as f64 + 0.587 * d[plane + i] as f64 + 0.114 * d[2 * plane + i] as f64)
        .collect()
}

#[test]
fn synthetic_condition_contracts() {
    for seed in 0..100u64 {
        let lit = synth_generate(seed, SceneCondition::WellLit, 32).unwrap();
        for cond in SceneCondition::ALL {
            let s = synth_generate(seed, cond, 32).unwrap();
            assert_eq!(s.thermal, lit.thermal);
            assert_eq!(s.labels, lit.labels);
            assert!(s.rgb.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let lum = luminance(&s.rgb);
            match cond {
                SceneCondition::TotalDarkness => {
                    let mean = lum.iter().sum::<f64>() / lum.len() as f64;
                    assert!(mean < 0.15, "seed {seed}: {mean}");
                }
                SceneCondition::Glare => {
                    let sat = lum.iter().filter(|&&v| v >= 0.999).count() as f64 / lum.len() as f64;
                    assert!(sat >= 0.10, "seed {seed}: {sat}");
                }
                _ => {}
            }
        }
        // guardrails are thin horizontal bands
        for x in 0..32 {
            let mut run = 0;
            for y in 0..32 {
                run = if lit.labels[y * 32 + x] == 6 { run + 1 } else { 0 };
                assert!(run <= 2, "seed {seed} column {x}");
            }
        }
    }
}

#[test]
fn synthetic_scenes_differ_across_seeds() {
    let a = synth_generate(1, SceneCondition::Overcast, 64).unwrap();
    let b = synth_generate(2, SceneCondition::Overcast, 64).unwrap();
    assert_ne!(a.labels, b.labels);
    assert_eq!(a.labels.len(), 64 * 64);
}
