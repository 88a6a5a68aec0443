use clarity_core::autodiff::{ParamStore, Tape};
use clarity_core::moe::{
    dense_routed_mix, random_scores, route_statistics, sparse_fuse, sparse_fuse_routed, ExpertBank, Gate, Routing,
    SceneContext,
};
use clarity_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

struct Setup {
    store: ParamStore<f64>,
    gate: Gate,
    bank: ExpertBank,
    f_rgb: Tensor<f64>,
    f_th: Tensor<f64>,
    p_cond: Tensor<f64>,
}

fn setup(seed: u64, c: usize, experts: usize, h: usize, w: usize) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gate = Gate::new(&mut store, &mut rng, "gate", c, 3, experts).unwrap();
    let bank = ExpertBank::new(&mut store, &mut rng, "bank", c, experts).unwrap();
    Setup {
        store,
        gate,
        bank,
        f_rgb: random(seed + 1, &[c, h, w]),
        f_th: random(seed + 2, &[c, h, w]),
        p_cond: random(seed + 3, &[3]),
    }
}

impl Setup {
    fn scores(&self) -> Tensor<f64> {
        let mut t = Tape::new();
        let a = t.constant(self.f_rgb.clone()).unwrap();
        let b = t.constant(self.f_th.clone()).unwrap();
        let p = t.constant(self.p_cond.clone()).unwrap();
        let s = self.gate.forward(&mut t, &self.store, a, b, p).unwrap();
        t.value(s).clone()
    }

    fn fuse(&self, scores: &Tensor<f64>, routing: Routing) -> Tensor<f64> {
        let mut t = Tape::new();
        let a = t.constant(self.f_rgb.clone()).unwrap();
        let b = t.constant(self.f_th.clone()).unwrap();
        let s = t.constant(scores.clone()).unwrap();
        let y = sparse_fuse_routed(&mut t, &self.store, a, b, s, &self.bank, routing, false).unwrap();
        t.value(y).clone()
    }

    /// Every expert run densely over the whole map.
    fn expert_outputs(&self) -> Vec<Tensor<f64>> {
        let mut t = Tape::new();
        let a = t.constant(self.f_rgb.clone()).unwrap();
        let b = t.constant(self.f_th.clone()).unwrap();
        let x = t.concat(&[a, b]).unwrap();
        let outs = self.bank.forward_all(&mut t, &self.store, x).unwrap();
        outs.iter().map(|&o| t.value(o).clone()).collect()
    }
}

#[test]
fn all_experts_selected_equals_dense_mixture() {
    let s = setup(1, 3, 4, 5, 6);
    let scores = s.scores();
    let routing = Routing::top_k(&scores, 4).unwrap();
    let fused = s.fuse(&scores, routing);
    let outs = s.expert_outputs();
    let (c, h, w) = fused.chw().unwrap();
    for ch in 0..c {
        for p in 0..h * w {
            let dense: f64 = (0..4).map(|e| scores.data()[e * h * w + p] * outs[e].data()[ch * h * w + p]).sum();
            assert!((fused.data()[ch * h * w + p] - dense).abs() < 1e-6);
        }
    }
}

#[test]
fn routed_path_matches_dense_reference() {
    let s = setup(2, 2, 5, 4, 4);
    let scores = s.scores();
    for renorm in [false, true] {
        let routing = Routing::top_k(&scores, 2).unwrap();
        let mut t = Tape::new();
        let a = t.constant(s.f_rgb.clone()).unwrap();
        let b = t.constant(s.f_th.clone()).unwrap();
        let sc = t.constant(scores.clone()).unwrap();
        let fast = sparse_fuse_routed(&mut t, &s.store, a, b, sc, &s.bank, routing.clone(), renorm).unwrap();
        let slow = dense_routed_mix(&mut t, &s.store, a, b, sc, &s.bank, routing, renorm).unwrap();
        for (x, y) in t.value(fast).data().iter().zip(t.value(slow).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn non_selected_experts_do_not_touch_the_output() {
    let s = setup(3, 2, 5, 4, 5);
    let scores = s.scores();
    let routing = Routing::top_k(&scores, 2).unwrap();
    let base = s.fuse(&scores, routing.clone());
    let (c, h, w) = base.chw().unwrap();
    for e in 0..5 {
        let mut zeroed = setup(3, 2, 5, 4, 5);
        let id = zeroed.bank.experts[e].weight;
        let shape = zeroed.store.tensor(id).shape().to_vec();
        zeroed.store.get_mut(id).tensor = Tensor::zeros(&shape);
        let out = zeroed.fuse(&scores, routing.clone());
        for p in 0..h * w {
            if routing.selected(p).contains(&e) {
                continue;
            }
            for ch in 0..c {
                assert_eq!(out.data()[ch * h * w + p].to_bits(), base.data()[ch * h * w + p].to_bits());
            }
        }
    }
}

#[test]
fn single_pixel_top_one_and_top_two() {
    let s = setup(4, 2, 4, 1, 1);
    let scores = Tensor::new(vec![4, 1, 1], vec![0.4, 0.3, 0.2, 0.1]).unwrap();
    let outs = s.expert_outputs();
    let top1 = s.fuse(&scores, Routing::top_k(&scores, 1).unwrap());
    for ch in 0..2 {
        assert!((top1.data()[ch] - 0.4 * outs[0].data()[ch]).abs() < 1e-15);
    }
    let routing = Routing::top_k(&scores, 2).unwrap();
    assert_eq!(routing.selected(0), &[0, 1]);
    let top2 = s.fuse(&scores, routing);
    for ch in 0..2 {
        let want = 0.4 * outs[0].data()[ch] + 0.3 * outs[1].data()[ch];
        assert!((top2.data()[ch] - want).abs() < 1e-15);
    }
}

#[test]
fn k_larger_than_bank_rejected() {
    let s = setup(5, 2, 3, 2, 2);
    let mut t = Tape::new();
    let a = t.constant(s.f_rgb.clone()).unwrap();
    let b = t.constant(s.f_th.clone()).unwrap();
    let sc = t.constant(s.scores()).unwrap();
    assert!(sparse_fuse(&mut t, &s.store, a, b, sc, &s.bank, 4, false).is_err());
}

#[test]
fn zero_gate_is_uniform() {
    let mut s = setup(6, 2, 5, 3, 3);
    for id in s.gate.proj.params() {
        let shape = s.store.tensor(id).shape().to_vec();
        s.store.get_mut(id).tensor = Tensor::zeros(&shape);
    }
    assert!(s.scores().data().iter().all(|&v| v == 0.2));
}

#[test]
fn gate_on_constant_inputs_is_spatially_constant() {
    let mut s = setup(7, 2, 4, 3, 4);
    s.f_rgb = Tensor::from_fn(&[2, 3, 4], |i| if i < 12 { 0.3 } else { -0.6 });
    s.f_th = Tensor::from_fn(&[2, 3, 4], |i| if i < 12 { 0.9 } else { 0.1 });
    let scores = s.scores();
    for e in 0..4 {
        let plane = &scores.data()[e * 12..(e + 1) * 12];
        assert!(plane.iter().all(|&v| v == plane[0]));
    }
    for p in 0..12 {
        let sum: f64 = (0..4).map(|e| scores.data()[e * 12 + p]).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn gate_permutation_equivariance() {
    let s = setup(8, 2, 4, 2, 3);
    let base = s.scores();
    let perm = [2, 0, 3, 1];
    let mut permuted = setup(8, 2, 4, 2, 3);
    let w_id = permuted.gate.proj.weight;
    let b_id = permuted.gate.proj.bias.unwrap();
    let w = s.store.tensor(w_id).clone();
    let b = s.store.tensor(b_id).clone();
    let row = w.numel() / 4;
    let mut wd = w.data().to_vec();
    let mut bd = b.data().to_vec();
    for (new, &old) in perm.iter().enumerate() {
        wd[new * row..(new + 1) * row].copy_from_slice(&w.data()[old * row..(old + 1) * row]);
        bd[new] = b.data()[old];
    }
    permuted.store.get_mut(w_id).tensor = Tensor::new(w.shape().to_vec(), wd).unwrap();
    permuted.store.get_mut(b_id).tensor = Tensor::new(b.shape().to_vec(), bd).unwrap();
    let out = permuted.scores();
    for (new, &old) in perm.iter().enumerate() {
        for p in 0..6 {
            assert!((out.data()[new * 6 + p] - base.data()[old * 6 + p]).abs() < 1e-15);
        }
    }
}

#[test]
fn expand_examples() {
    let mut t = Tape::<f64>::new();
    let p = t.leaf(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
    let e = t.expand(p, 2, 2).unwrap();
    assert_eq!(t.value(e).data(), &[1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
    let pooled = t.avg_pool(e, 2).unwrap();
    assert_eq!(t.value(pooled).data(), &[1.0, -1.0]);
    let big = t.expand(p, 3, 5).unwrap();
    let s = t.sum(big).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(p).unwrap().data(), &[15.0, 15.0]);
}

fn context(seed: u64) -> (ParamStore<f64>, SceneContext) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ctx = SceneContext::new(&mut store, &mut rng, 3, 4, 5).unwrap();
    (store, ctx)
}

fn run_context(store: &ParamStore<f64>, ctx: &SceneContext, fused: &Tensor<f64>, emb: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut t = Tape::new();
    let f = t.constant(fused.clone()).unwrap();
    let e = t.constant(emb.clone()).unwrap();
    let out = ctx.forward(&mut t, store, f, e).unwrap();
    (t.value(out.out).clone(), t.value(out.weights).clone())
}

#[test]
fn single_token_context_weight_is_one() {
    let (store, ctx) = context(9);
    let (_, w) = run_context(&store, &ctx, &random(10, &[3, 4, 4]), &random(11, &[4]));
    assert_eq!(w.shape(), &[16, 1]);
    assert!(w.data().iter().all(|&v| v == 1.0));
}

#[test]
fn context_residual_properties() {
    let (mut store, ctx) = context(12);
    let emb = random(13, &[4]);
    let a = random(14, &[3, 3, 3]);
    let b = random(15, &[3, 3, 3]);
    let (ya, _) = run_context(&store, &ctx, &a, &emb);
    let (yb, _) = run_context(&store, &ctx, &b, &emb);
    for i in 0..27 {
        let lhs = ya.data()[i] - yb.data()[i];
        let rhs = a.data()[i] - b.data()[i];
        assert!((lhs - rhs).abs() < 1e-12);
    }
    for id in [ctx.value.weight, ctx.out.weight] {
        let shape = store.tensor(id).shape().to_vec();
        store.get_mut(id).tensor = Tensor::zeros(&shape);
    }
    let (y0, _) = run_context(&store, &ctx, &a, &emb);
    assert_eq!(y0, a);
}

#[test]
fn route_frequencies_sum_to_k() {
    for k in 1..=3 {
        let scores: Tensor<f64> = random_scores(17, 5, 25, 40);
        let stats = route_statistics(&scores, k).unwrap();
        assert_eq!(stats.pixels, 1000);
        assert_eq!(stats.counts.iter().sum::<u64>(), 1000 * k as u64);
        let total: f64 = stats.frequencies().iter().sum();
        assert!((total - k as f64).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn top_k_mass_bounds(seed in any::<u64>(), experts in 2usize..7, k_frac in 0.0f64..1.0) {
        let k = 1 + ((experts - 1) as f64 * k_frac) as usize;
        let scores: Tensor<f64> = random_scores(seed, experts, 3, 3);
        let routing = Routing::top_k(&scores, k).unwrap();
        for p in 0..9 {
            let mass: f64 = routing.selected(p).iter().map(|&e| scores.data()[e * 9 + p]).sum();
            prop_assert!(mass > k as f64 / experts as f64 * (1.0 - 1e-9) && mass <= 1.0 + 1e-12);
            let min_sel = routing.selected(p).iter().map(|&e| scores.data()[e * 9 + p]).fold(f64::INFINITY, f64::min);
            for e in 0..experts {
                if !routing.selected(p).contains(&e) {
                    prop_assert!(scores.data()[e * 9 + p] <= min_sel);
                }
            }
        }
    }
}
