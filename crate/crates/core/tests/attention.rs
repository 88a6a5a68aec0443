use clarity_core::attention::{compute_unbalanced_map, sgupt_attention, Gating, AttentionOutput};
use clarity_core::autodiff::{Tape, Var};
use clarity_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

struct Toy {
    x: Tensor<f64>,
    wq: Tensor<f64>,
    wk: Tensor<f64>,
    wv: Tensor<f64>,
}

impl Toy {
    fn random(seed: u64, n: usize, c: usize, d: usize) -> Self {
        Self {
            x: random(seed, &[n, c]),
            wq: random(seed + 1, &[c, d]),
            wk: random(seed + 2, &[c, d]),
            wv: random(seed + 3, &[c, c]),
        }
    }

    /// Runs attention; `lambda` is only used for the soft mode.
    fn run(&self, tape: &mut Tape<f64>, m: &[f64], mode: &str, lambda: f64) -> AttentionOutput {
        let x = tape.leaf(self.x.clone()).unwrap();
        let wq = tape.constant(self.wq.clone()).unwrap();
        let wk = tape.constant(self.wk.clone()).unwrap();
        let wv = tape.constant(self.wv.clone()).unwrap();
        let gating = match mode {
            "none" => Gating::NoPrior,
            "hard" => Gating::HardCut(0.1),
            _ => Gating::SoftTanh(tape.leaf(Tensor::scalar(lambda)).unwrap()),
        };
        sgupt_attention(tape, x, m, gating, wq, wk, wv).unwrap()
    }

    fn output(&self, m: &[f64], mode: &str, lambda: f64) -> (Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let out = self.run(&mut tape, m, mode, lambda);
        (tape.value(out.out).clone(), tape.value(out.weights).clone())
    }
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(random(seed, &shape).map(|v| v.abs() + 0.1)).unwrap();
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

#[test]
fn soft_with_zero_lambda_is_no_prior_bitwise() {
    let toy = Toy::random(1, 9, 4, 3);
    let m: Vec<f64> = (0..9).map(|i| 0.1 * i as f64 + 0.05).collect();
    let (none, _) = toy.output(&m, "none", 0.0);
    let (soft, _) = toy.output(&m, "soft", 0.0);
    assert_eq!(none.data(), soft.data());
}

#[test]
fn soft_with_zero_map_is_no_prior_bitwise() {
    let toy = Toy::random(2, 6, 3, 2);
    let m = vec![0.0; 6];
    let (none, _) = toy.output(&m, "none", 0.0);
    let (soft, _) = toy.output(&m, "soft", 1.7);
    assert_eq!(none.data(), soft.data());
}

#[test]
fn map_shape_mismatch_rejected() {
    let toy = Toy::random(3, 4, 2, 2);
    let mut tape = Tape::new();
    let x = tape.constant(toy.x.clone()).unwrap();
    let wq = tape.constant(toy.wq.clone()).unwrap();
    let wk = tape.constant(toy.wk.clone()).unwrap();
    let wv = tape.constant(toy.wv.clone()).unwrap();
    assert!(sgupt_attention(&mut tape, x, &[0.1; 3], Gating::NoPrior, wq, wk, wv).is_err());
}

/// Hand-rolled attention: scores, mask, softmax, weighted values.
fn oracle(toy: &Toy, keep: &[bool]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mm = |a: &Tensor<f64>, b: &Tensor<f64>| -> Vec<Vec<f64>> {
        let (n, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        (0..n)
            .map(|i| (0..p).map(|j| (0..k).map(|t| a.get(&[i, t]) * b.get(&[t, j])).sum()).collect())
            .collect()
    };
    let q = mm(&toy.x, &toy.wq);
    let k = mm(&toy.x, &toy.wk);
    let v = mm(&toy.x, &toy.wv);
    let n = q.len();
    let d = q[0].len() as f64;
    let mut weights = vec![vec![0.0; n]; n];
    for i in 0..n {
        let s: Vec<f64> = (0..n).map(|j| (0..q[i].len()).map(|t| q[i][t] * k[j][t]).sum::<f64>() / d.sqrt()).collect();
        let max = (0..n).filter(|&j| keep[j]).map(|j| s[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).filter(|&j| keep[j]).map(|j| (s[j] - max).exp()).sum();
        for j in 0..n {
            weights[i][j] = if keep[j] { (s[j] - max).exp() / z } else { 0.0 };
        }
    }
    let out = (0..n)
        .map(|i| (0..v[0].len()).map(|c| (0..n).map(|j| weights[i][j] * v[j][c]).sum()).collect())
        .collect();
    (weights, out)
}

#[test]
fn hard_cut_blocks_gradient_on_four_pixel_toy() {
    let toy = Toy::random(4, 4, 3, 2);
    // pixel 3 has trust 1 - 0.95 = 0.05, below the 0.1 threshold
    let m = [0.2, 0.5, 0.3, 0.95];
    let (w_oracle, out_oracle) = oracle(&toy, &[true, true, true, false]);

    let mut tape = Tape::new();
    let hard = toy.run(&mut tape, &m, "hard", 0.0);
    let w = tape.value(hard.weights).clone();
    let o = tape.value(hard.out).clone();
    for i in 0..4 {
        assert_eq!(w.get(&[i, 3]), 0.0);
        for j in 0..4 {
            assert!((w.get(&[i, j]) - w_oracle[i][j]).abs() < 1e-12);
        }
        for c in 0..3 {
            assert!((o.get(&[i, c]) - out_oracle[i][c]).abs() < 1e-12);
        }
    }
    let loss = weighted_sum(&mut tape, hard.out, 9);
    tape.backward(loss).unwrap();
    let g = tape.grad(hard.values).unwrap();
    assert!(g.data()[9..12].iter().all(|&v| v == 0.0), "{:?}", g.data());
    assert!(g.data()[..9].iter().any(|&v| v != 0.0));

    let mut tape = Tape::new();
    let soft = toy.run(&mut tape, &m, "soft", 1.0);
    let loss = weighted_sum(&mut tape, soft.out, 9);
    tape.backward(loss).unwrap();
    let g = tape.grad(soft.values).unwrap();
    assert!(g.data()[9..12].iter().all(|&v| v.abs() > 0.0), "{:?}", g.data());
}

#[test]
fn rows_normalised_in_every_mode() {
    let toy = Toy::random(5, 8, 4, 3);
    let m: Vec<f64> = (0..8).map(|i| [0.1, 0.95, 0.4, 1.2, 0.0, 0.6, 0.99, 0.3][i]).collect();
    for mode in ["none", "hard", "soft"] {
        let (_, w) = toy.output(&m, mode, 0.8);
        for i in 0..8 {
            let s: f64 = (0..8).map(|j| w.get(&[i, j])).sum();
            assert!((s - 1.0).abs() < 1e-6, "{mode}");
        }
    }
}

proptest! {
    #[test]
    fn raising_the_map_lowers_attention_on_that_key(
        seed in 0u64..1000,
        key in 0usize..6,
        base in prop::collection::vec(0.0f64..1.25, 6),
        bump in 0.01f64..1.0,
        lambda in 0.1f64..3.0,
    ) {
        let toy = Toy::random(seed, 6, 3, 2);
        let mut raised = base.clone();
        raised[key] += bump;
        let (_, before) = toy.output(&base, "soft", lambda);
        let (_, after) = toy.output(&raised, "soft", lambda);
        for i in 0..6 {
            prop_assert!(after.get(&[i, key]) < before.get(&[i, key]));
        }
    }
}

/// Brute-force interior value for a 0/1 checkerboard luminance.
#[test]
fn checkerboard_map_interior() {
    let n = 6;
    let rgb = Tensor::from_fn(&[3, n, n], |i| {
        let p = i % (n * n);
        ((p / n + p % n) % 2) as f64
    });
    let m = compute_unbalanced_map(&rgb, 3).unwrap();
    for y in 1..n - 1 {
        for x in 1..n - 1 {
            let mut ones = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    ones += ((y + dy - 1 + x + dx - 1) % 2) as f64;
                }
            }
            let mean = ones / 9.0;
            let want = mean * (1.0 - mean) + (1.0 - mean);
            assert!((m.values.get(&[0, y, x]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn map_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let rgb = Tensor::<f64>::from_fn(&[3, 8, 8], |_| rng.gen_range(0.0..1.0));
        let m = compute_unbalanced_map(&rgb, 5).unwrap();
        let (lo, hi) = m.values.min_max();
        assert!(lo >= 0.0 && hi <= 1.25);
    }
}
