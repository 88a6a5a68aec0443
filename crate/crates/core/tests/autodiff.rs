use clarity_core::autodiff::{grad_check, ConvGeom, Tape, Var};
use clarity_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn conv(x: &Tensor<f64>, k: &Tensor<f64>, geom: ConvGeom) -> clarity_core::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let kv = tape.constant(k.clone())?;
    let y = tape.conv2d(xv, kv, geom)?;
    Ok(tape.value(y).clone())
}

/// Quadruple loop, taps accumulated in (ci, ky, kx) order.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
    let (cin, h, w) = x.chw().unwrap();
    let (cout, ks) = (k.shape()[0], k.shape()[2]);
    let ho = g.out_len(h, ks).unwrap();
    let wo = g.out_len(w, ks).unwrap();
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                            let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k.get(&[co, ci, ky, kx]) * x.get(&[ci, iy as usize, ix as usize]);
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(vec![cout, ho, wo], out).unwrap()
}

#[test]
fn conv_identity_kernel() {
    let x = random(1, &[1, 5, 4], -1.0, 1.0);
    let k = t64(&[1, 1, 1, 1], &[1.0]);
    assert_eq!(conv(&x, &k, ConvGeom::same(1, 1)).unwrap(), x);
}

#[test]
fn conv_ones_kernel_counts_neighbours() {
    let x = Tensor::<f64>::full(&[1, 5, 5], 1.0);
    let k = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
    let y = conv(&x, &k, ConvGeom::same(1, 3)).unwrap();
    assert_eq!(y.get(&[0, 2, 2]), 9.0);
    for (r, c) in [(0, 0), (0, 4), (4, 0), (4, 4)] {
        assert_eq!(y.get(&[0, r, c]), 4.0);
    }
    assert_eq!(y.get(&[0, 0, 2]), 6.0);
}

#[test]
fn dilated_taps_land_two_apart() {
    let mut x = Tensor::<f64>::zeros(&[1, 5, 5]);
    x.data_mut()[12] = 1.0;
    let k = random(3, &[1, 1, 3, 3], 0.5, 1.0);
    let y = conv(&x, &k, ConvGeom::same(2, 3)).unwrap();
    assert_eq!(y, naive_conv(&x, &k, ConvGeom::same(2, 3)));
    for r in 0..5 {
        for c in 0..5 {
            let v = y.get(&[0, r, c]);
            let on_grid = r % 2 == 0 && c % 2 == 0;
            assert_eq!(v != 0.0, on_grid, "({r},{c})");
            if on_grid {
                let (ky, kx) = ((4 - r) / 2, (4 - c) / 2);
                assert_eq!(v, k.get(&[0, 0, ky, kx]));
            }
        }
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let x = random(4, &[2, 4, 4], -1.0, 1.0);
    let k = random(5, &[1, 3, 3, 3], -1.0, 1.0);
    assert!(matches!(conv(&x, &k, ConvGeom::same(1, 3)), Err(Error::Dimension { .. })));
    let k_even = random(5, &[1, 2, 2, 2], -1.0, 1.0);
    assert!(conv(&x, &k_even, ConvGeom::same(1, 3)).is_err());
    let k_big = random(6, &[1, 2, 5, 5], -1.0, 1.0);
    let geom = ConvGeom {
        stride: 1,
        dilation: 2,
        padding: 0,
    };
    assert!(conv(&x, &k_big, geom).is_err());
}

proptest! {
    #[test]
    fn conv_matches_naive_oracle(
        seed in any::<u64>(),
        cin in 1usize..4,
        cout in 1usize..4,
        ks in prop::sample::select(vec![1usize, 3, 5]),
        dilation in 1usize..3,
        stride in 1usize..3,
        pad_extra in 0usize..2,
    ) {
        let padding = dilation * (ks - 1) / 2 + pad_extra;
        let geom = ConvGeom { stride, dilation, padding };
        let x = random(seed, &[cin, 8, 8], -1.0, 1.0);
        let k = random(seed ^ 0xabc, &[cout, cin, ks, ks], -1.0, 1.0);
        prop_assert_eq!(conv(&x, &k, geom).unwrap(), naive_conv(&x, &k, geom));
    }

    #[test]
    fn softmax_normalised_and_shift_invariant(
        values in prop::collection::vec(-20.0f64..20.0, 12),
        shift in -50.0f64..50.0,
        axis in 0usize..2,
    ) {
        let x = t64(&[3, 4], &values);
        let shifted = x.map(|v| v + shift);
        let mut tape = Tape::new();
        let a = tape.constant(x).unwrap();
        let b = tape.constant(shifted).unwrap();
        let sa = tape.softmax(a, axis).unwrap();
        let sb = tape.softmax(b, axis).unwrap();
        let (ya, yb) = (tape.value(sa).clone(), tape.value(sb).clone());
        for (p, q) in ya.data().iter().zip(yb.data()) {
            prop_assert!(*p > 0.0);
            prop_assert!((p - q).abs() < 1e-6);
        }
        let (rows, cols) = (3, 4);
        let slices: Vec<f64> = if axis == 0 {
            (0..cols).map(|c| (0..rows).map(|r| ya.get(&[r, c])).sum()).collect()
        } else {
            (0..rows).map(|r| (0..cols).map(|c| ya.get(&[r, c])).sum()).collect()
        };
        for s in slices {
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_stays_in_envelope(values in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 4), scale in 1usize..4) {
        let x = t64(&[2, 3, 4], &values);
        let (lo, hi) = x.min_max();
        let mut tape = Tape::new();
        let v = tape.constant(x).unwrap();
        let u = tape.upsample(v, scale).unwrap();
        prop_assert_eq!(tape.value(u).shape(), &[2, 3 * scale, 4 * scale]);
        for &y in tape.value(u).data() {
            prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        }
    }

    #[test]
    fn local_variance_non_negative(values in prop::collection::vec(0.0f64..1.0, 36), window in prop::sample::select(vec![3usize, 5])) {
        let mut tape = Tape::new();
        let v = tape.constant(t64(&[1, 6, 6], &values)).unwrap();
        let var = tape.local_var(v, window).unwrap();
        prop_assert!(tape.value(var).data().iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t64(&[3], &[0.0, 0.0, 0.0])).unwrap();
    let b = tape.constant(t64(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
    let sa = tape.softmax(a, 0).unwrap();
    let sb = tape.softmax(b, 0).unwrap();
    for &v in tape.value(sa).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    for (v, want) in tape.value(sb).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((v - want).abs() < 1e-15);
    }
}

fn local_stats(img: &Tensor<f64>, window: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let v = tape.constant(img.clone()).unwrap();
    let m = tape.local_mean(v, window).unwrap();
    let s = tape.local_var(v, window).unwrap();
    (tape.value(m).clone(), tape.value(s).clone())
}

/// Brute-force window scan with edge replication.
fn stats_oracle(img: &Tensor<f64>, window: usize) -> (Vec<f64>, Vec<f64>) {
    let (_, h, w) = img.chw().unwrap();
    let r = (window / 2) as isize;
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut vals = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    vals.push(img.get(&[0, yy, xx]));
                }
            }
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            means.push(m);
            vars.push(vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n);
        }
    }
    (means, vars)
}

#[test]
fn local_stats_constant_field() {
    for c in [0.0, 0.25, 0.3, 1.0] {
        let (m, v) = local_stats(&Tensor::full(&[1, 7, 7], c), 5);
        assert!(m.data().iter().all(|&x| (x - c).abs() < 1e-15));
        assert!(v.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn local_stats_checkerboard() {
    let img = Tensor::from_fn(&[1, 6, 6], |i| ((i / 6 + i % 6) % 2) as f64);
    let (m, v) = local_stats(&img, 3);
    for y in 1..5 {
        for x in 1..5 {
            let mean = m.get(&[0, y, x]);
            assert!((mean - 4.0 / 9.0).abs() < 1e-12 || (mean - 5.0 / 9.0).abs() < 1e-12);
            assert!((v.get(&[0, y, x]) - mean * (1.0 - mean)).abs() < 1e-12);
        }
    }
}

#[test]
fn local_stats_single_bright_pixel() {
    let mut img = Tensor::<f64>::zeros(&[1, 7, 7]);
    img.data_mut()[3 * 7 + 3] = 1.0;
    let (m, v) = local_stats(&img, 3);
    let (om, ov) = stats_oracle(&img, 3);
    for i in 0..49 {
        assert!((m.data()[i] - om[i]).abs() < 1e-12);
        assert!((v.data()[i] - ov[i]).abs() < 1e-12);
    }
    for y in 2..5 {
        for x in 2..5 {
            assert!((v.get(&[0, y, x]) - 8.0 / 81.0).abs() < 1e-12);
        }
    }
    assert_eq!(v.get(&[0, 0, 0]), 0.0);
}

#[test]
fn even_window_rejected() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::<f64>::zeros(&[1, 4, 4])).unwrap();
    assert!(matches!(tape.local_mean(v, 4), Err(Error::Parameter { .. })));
    assert!(tape.local_var(v, 1).is_err());
}

/// Half-pixel-centre bilinear sample with clamped borders.
fn bilinear_oracle(src: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for oy in 0..ho {
        for ox in 0..wo {
            let sy = ((oy as f64 + 0.5) * h as f64 / ho as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = ((ox as f64 + 0.5) * w as f64 / wo as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

#[test]
fn upsample_examples() {
    let x = t64(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    let same = tape.upsample(v, 1).unwrap();
    assert_eq!(tape.value(same), &x);
    let up = tape.upsample(v, 2).unwrap();
    let want = bilinear_oracle(x.data(), 2, 2, 4, 4);
    for (a, b) in tape.value(up).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(want[..4], [0.0, 0.25, 0.75, 1.0]);
    let c = tape.constant(Tensor::full(&[2, 3, 3], 0.7)).unwrap();
    let cu = tape.upsample(c, 2).unwrap();
    assert!(tape.value(cu).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(1.0)).unwrap();
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(random(2, &[5], -2.0, 2.0)).unwrap();
    let s = tape.softmax(x, 0).unwrap();
    let l = tape.sum(s).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|g| g.abs() < 1e-15));

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(random(3, &[2, 2], -1.0, 1.0)).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn gradients_accumulate_over_consumers() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1.5, -2.0])).unwrap();
    let a = tape.scale(x, 3.0).unwrap();
    let b = tape.mul(x, x).unwrap();
    let c = tape.add(a, b).unwrap();
    let l = tape.sum(c).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0 + 3.0, 3.0 - 4.0]);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(tape.scale(x, f64::INFINITY), Err(Error::Numeric { .. })));
    assert!(tape.leaf(t64(&[1], &[f64::NAN])).is_err());
}

#[test]
fn grad_check_examples() {
    let p = random(9, &[4, 3], -1.0, 1.0);
    assert!(grad_check(|t, x| t.sum(x), &p, 1e-3).unwrap() < 1e-12);
    let e = grad_check(
        |t, x| {
            let y = t.tanh(x)?;
            t.sum(y)
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-4);
}

fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> clarity_core::Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let w = t.constant(random(seed, &shape, -1.0, 1.0))?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

#[test]
fn conv_sum_matches_finite_differences_at_step_1e3() {
    let x = random(10, &[2, 6, 6], -1.0, 1.0);
    let k = random(11, &[3, 2, 3, 3], -1.0, 1.0);
    let e = grad_check(
        |t, xv| {
            let kv = t.constant(k.clone())?;
            let y = t.conv2d(xv, kv, ConvGeom::same(1, 3))?;
            t.sum(y)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(e < 1e-4, "{e}");
}

/// Five seeded points per op.
#[test]
fn ops_pass_grad_check_at_five_points() {
    type Op = fn(&mut Tape<f64>, Var) -> clarity_core::Result<Var>;
    let ops: [(&str, &[usize], Op); 9] = [
        ("conv2d", &[2, 5, 5], |t, x| {
            let k = t.constant(random(77, &[2, 2, 3, 3], -1.0, 1.0))?;
            t.conv2d(x, k, ConvGeom::same(2, 3))
        }),
        ("softmax", &[3, 4], |t, x| t.softmax(x, 1)),
        ("tanh", &[3, 4], |t, x| t.tanh(x)),
        ("upsample", &[2, 3, 3], |t, x| t.upsample(x, 2)),
        ("resize", &[2, 4, 4], |t, x| t.resize(x, 3, 5)),
        ("avg_pool", &[1, 4, 4], |t, x| t.avg_pool(x, 2)),
        ("local_var", &[1, 5, 5], |t, x| t.local_var(x, 3)),
        ("local_mean", &[1, 5, 5], |t, x| t.local_mean(x, 5)),
        ("matmul", &[3, 4], |t, x| {
            let b = t.constant(random(78, &[4, 2], -1.0, 1.0))?;
            t.matmul(x, b)
        }),
    ];
    for (name, shape, op) in ops {
        for point in 0..5 {
            let p = random(100 + point, shape, 0.05, 0.95);
            let e = grad_check(
                |t, x| {
                    let y = op(t, x)?;
                    probe(t, y, 5)
                },
                &p,
                1e-6,
            )
            .unwrap();
            assert!(e < 1e-4, "{name} at point {point}: {e}");
        }
    }
}
