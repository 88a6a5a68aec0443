//! Finite-difference sweep over every differentiable op and composite block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clarity_core::attention::{luminance, sgupt_attention, unbalanced_map_var, Gating, GatingMode, SgUptBlock};
use clarity_core::autodiff::{grad_check, ConvGeom, ParamId, ParamStore, Tape, Var};
use clarity_core::conditioning::{EmbeddingTable, SemanticEncoder, build_prompt, SceneCondition, TargetClass};
use clarity_core::decoder::{decode_stage, Calibrator, DfaBlock};
use clarity_core::loss::{total_loss, LossConfig};
use clarity_core::moe::{sparse_fuse_routed, ExpertBank, Gate, Routing, SceneContext};
use clarity_core::{Result, Tensor};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct BlockResult {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl BlockResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `sum(y * w)` for a fixed random `w`, so every output coordinate matters.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0))?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Worst error over the input and each listed parameter.
fn sweep(
    store: &ParamStore<f64>,
    params: &[ParamId],
    input: &Tensor<f64>,
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>, Var) -> Result<Var>,
) -> Result<f64> {
    let mut worst = grad_check(|t, x| f(t, store, x), input, STEP)?;
    for &id in params {
        let e = grad_check(
            |t, p| {
                t.bind_param(id, p);
                let x = t.constant(input.clone())?;
                f(t, store, x)
            },
            store.tensor(id),
            STEP,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

type Block = (&'static str, fn() -> Result<f64>);

/// Every checked block, in report order.
pub const BLOCKS: [Block; 16] = [
    ("conv2d", check_conv2d),
    ("conv2d_strided_dilated", check_conv2d_geom),
    ("softmax", check_softmax),
    ("masked_row_softmax", check_masked_softmax),
    ("matmul_transpose", check_matmul),
    ("resample", check_resample),
    ("local_stats", check_local_stats),
    ("sgupt_attention_soft", check_attention_soft),
    ("sgupt_attention_hard", check_attention_hard),
    ("sgupt_block", check_sgupt_block),
    ("gate_sparse_fuse", check_gate_fuse),
    ("scene_context", check_scene_context),
    ("condition_mlp", check_condition_mlp),
    ("decode_stage", check_decode_stage),
    ("weighted_ce_focal", check_losses),
    ("total_loss", check_total_loss),
];

pub fn run_all() -> Result<Vec<BlockResult>> {
    BLOCKS
        .iter()
        .map(|&(name, f)| Ok(BlockResult { name, max_rel_error: f()? }))
        .collect()
}

fn check_conv2d() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 5, 6], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let kx = k.clone();
    let a = grad_check(
        move |t, x| {
            let k = t.constant(kx.clone())?;
            let y = t.conv2d(x, k, ConvGeom::same(1, 3))?;
            probe(t, y, 11)
        },
        &x,
        STEP,
    )?;
    let b = grad_check(
        move |t, k| {
            let x = t.constant(x.clone())?;
            let y = t.conv2d(x, k, ConvGeom::same(1, 3))?;
            probe(t, y, 11)
        },
        &k,
        STEP,
    )?;
    Ok(a.max(b))
}

fn check_conv2d_geom() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 7, 7], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let mut worst = 0.0f64;
    for geom in [
        ConvGeom { stride: 2, dilation: 1, padding: 1 },
        ConvGeom::same(2, 3),
    ] {
        let kc = k.clone();
        worst = worst.max(grad_check(
            move |t, x| {
                let k = t.constant(kc.clone())?;
                let y = t.conv2d(x, k, geom)?;
                probe(t, y, 12)
            },
            &x,
            STEP,
        )?);
    }
    Ok(worst)
}

fn check_softmax() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[4, 3, 2], -2.0, 2.0);
    let mut worst = 0.0f64;
    for axis in 0..3 {
        worst = worst.max(grad_check(
            move |t, x| {
                let y = t.softmax(x, axis)?;
                probe(t, y, 13)
            },
            &x,
            STEP,
        )?);
    }
    Ok(worst)
}

fn check_masked_softmax() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let keep = [true, false, true, true];
    grad_check(
        move |t, x| {
            let y = t.masked_row_softmax(x, &keep)?;
            probe(t, y, 14)
        },
        &x,
        STEP,
    )
}

fn check_matmul() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    grad_check(
        move |t, a| {
            let b = t.constant(b.clone())?;
            let at = t.transpose(a)?;
            let y = t.matmul(at, b)?;
            let z = t.tanh(y)?;
            probe(t, z, 15)
        },
        &a,
        STEP,
    )
}

fn check_resample() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0);
    grad_check(
        |t, x| {
            let up = t.upsample(x, 2)?;
            let pooled = t.avg_pool(up, 4)?;
            let r = t.resize(pooled, 3, 3)?;
            let e = t.expand(pooled, 2, 2)?;
            let a = probe(t, r, 16)?;
            let b = probe(t, e, 17)?;
            t.add(a, b)
        },
        &x,
        STEP,
    )
}

fn check_local_stats() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rgb = rand_tensor(&mut rng, &[3, 6, 6], 0.05, 0.95);
    grad_check(
        |t, rgb| {
            let r = t.reshape(rgb, &[3, 36])?;
            let lum_w = t.constant(Tensor::from_f64(&[1, 3], &[1.0 / 3.0; 3])?)?;
            let lum = t.matmul(lum_w, r)?;
            let lum = t.reshape(lum, &[1, 6, 6])?;
            let m = unbalanced_map_var(t, lum, 3)?;
            let v = t.local_var(lum, 5)?;
            let a = probe(t, m, 18)?;
            let b = probe(t, v, 19)?;
            t.add(a, b)
        },
        &rgb,
        STEP,
    )
}

fn attention_inputs(seed: u64) -> (Tensor<f64>, Vec<f64>, [Tensor<f64>; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[6, 4], -1.0, 1.0);
    let m: Vec<f64> = (0..6).map(|i| [0.02, 0.9, 0.3, 0.05, 0.6, 1.2][i]).collect();
    let w = [
        rand_tensor(&mut rng, &[4, 3], -1.0, 1.0),
        rand_tensor(&mut rng, &[4, 3], -1.0, 1.0),
        rand_tensor(&mut rng, &[4, 4], -1.0, 1.0),
    ];
    (x, m, w)
}

fn attention_check(mode: GatingMode) -> Result<f64> {
    let (x, m, w) = attention_inputs(8);
    let gating = |t: &mut Tape<f64>, lambda: Option<Var>| -> Result<Gating> {
        Ok(match mode {
            GatingMode::NoPrior => Gating::NoPrior,
            GatingMode::HardCut { threshold } => Gating::HardCut(threshold),
            GatingMode::SoftTanh => Gating::SoftTanh(match lambda {
                Some(l) => l,
                None => t.constant(Tensor::scalar(0.7))?,
            }),
        })
    };
    let run = |t: &mut Tape<f64>, x: Var, ws: [Var; 3], lambda: Option<Var>| -> Result<Var> {
        let g = gating(t, lambda)?;
        let out = sgupt_attention(t, x, &m, g, ws[0], ws[1], ws[2])?;
        probe(t, out.out, 20)
    };
    let consts = |t: &mut Tape<f64>| -> Result<[Var; 3]> {
        Ok([t.constant(w[0].clone())?, t.constant(w[1].clone())?, t.constant(w[2].clone())?])
    };
    let mut worst = grad_check(
        |t, x| {
            let ws = consts(t)?;
            run(t, x, ws, None)
        },
        &x,
        STEP,
    )?;
    for i in 0..3 {
        worst = worst.max(grad_check(
            |t, wi| {
                let mut ws = consts(t)?;
                ws[i] = wi;
                let x = t.constant(x.clone())?;
                run(t, x, ws, None)
            },
            &w[i],
            STEP,
        )?);
    }
    if mode == GatingMode::SoftTanh {
        worst = worst.max(grad_check(
            |t, l| {
                let ws = consts(t)?;
                let x = t.constant(x.clone())?;
                run(t, x, ws, Some(l))
            },
            &Tensor::scalar(0.7),
            STEP,
        )?);
    }
    Ok(worst)
}

fn check_attention_soft() -> Result<f64> {
    attention_check(GatingMode::SoftTanh)
}

fn check_attention_hard() -> Result<f64> {
    attention_check(GatingMode::HardCut { threshold: 0.1 })
}

fn check_sgupt_block() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let block = SgUptBlock::new(&mut store, &mut rng, 3, 4, GatingMode::SoftTanh, 0.8)?;
    let x = rand_tensor(&mut rng, &[3, 2, 3], -1.0, 1.0);
    let rgb = rand_tensor(&mut rng, &[3, 2, 3], 0.0, 1.0);
    let lum = luminance(&rgb)?;
    let m: Vec<f64> = lum.data().iter().map(|v| 1.0 - v).collect();
    let params = [block.query.weight, block.key.weight, block.value.weight, block.lambda];
    sweep(&store, &params, &x, |t, s, x| {
        let y = block.forward(t, s, x, &m)?;
        probe(t, y, 21)
    })
}

fn check_gate_fuse() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f64>::new();
    let (c, cond, experts, k) = (2, 3, 4, 2);
    let gate = Gate::new(&mut store, &mut rng, "gate", c, cond, experts)?;
    let bank = ExpertBank::new(&mut store, &mut rng, "experts", c, experts)?;
    let f_rgb = rand_tensor(&mut rng, &[c, 4, 4], -1.0, 1.0);
    let f_th = rand_tensor(&mut rng, &[c, 4, 4], -1.0, 1.0);
    let p_cond = rand_tensor(&mut rng, &[cond], -1.0, 1.0);
    let routing = {
        let mut t = Tape::new();
        let (a, b, p) = (t.constant(f_rgb.clone())?, t.constant(f_th.clone())?, t.constant(p_cond.clone())?);
        let s = gate.forward(&mut t, &store, a, b, p)?;
        Routing::top_k(t.value(s), k)?
    };
    let mut params: Vec<ParamId> = gate.proj.params();
    params.extend(bank.experts.iter().map(|e| e.weight));
    let fwd = |t: &mut Tape<f64>, s: &ParamStore<f64>, a: Var, b: Var, p: Var| -> Result<Var> {
        let scores = gate.forward(t, s, a, b, p)?;
        let y = sparse_fuse_routed(t, s, a, b, scores, &bank, routing.clone(), false)?;
        probe(t, y, 22)
    };
    let mut worst = sweep(&store, &params, &f_rgb, |t, s, a| {
        let b = t.constant(f_th.clone())?;
        let p = t.constant(p_cond.clone())?;
        fwd(t, s, a, b, p)
    })?;
    worst = worst.max(grad_check(
        |t, p| {
            let a = t.constant(f_rgb.clone())?;
            let b = t.constant(f_th.clone())?;
            fwd(t, &store, a, b, p)
        },
        &p_cond,
        STEP,
    )?);
    Ok(worst)
}

fn check_scene_context() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let ctx = SceneContext::new(&mut store, &mut rng, 3, 4, 5)?;
    let fused = rand_tensor(&mut rng, &[3, 2, 2], -1.0, 1.0);
    let p_emb = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let a = sweep(&store, &ctx.params(), &fused, |t, s, x| {
        let p = t.constant(p_emb.clone())?;
        let out = ctx.forward(t, s, x, p)?;
        probe(t, out.out, 23)
    })?;
    let b = grad_check(
        |t, p| {
            let x = t.constant(fused.clone())?;
            let out = ctx.forward(t, &store, x, p)?;
            probe(t, out.out, 23)
        },
        &p_emb,
        STEP,
    )?;
    Ok(a.max(b))
}

fn check_condition_mlp() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let enc = SemanticEncoder::new(&mut store, &mut rng, EmbeddingTable::new(3, 8), 4)?;
    let caption = build_prompt(SceneCondition::Glare, &[TargetClass::Car, TargetClass::Guardrail])?;
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        worst = worst.max(grad_check(
            |t, p| {
                t.bind_param(id, p);
                let a = enc.encode_condition(t, &store, &caption)?;
                let b = enc.encode_scene(t, &store, &caption)?;
                let pa = probe(t, a, 24)?;
                let pb = probe(t, b, 25)?;
                t.add(pa, pb)
            },
            store.tensor(id),
            STEP,
        )?);
    }
    Ok(worst)
}

fn check_decode_stage() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let c = 2;
    let dfa = DfaBlock::new(&mut store, &mut rng, "dfa", c)?;
    let cal = Calibrator::new(&mut store, &mut rng, c)?;
    let d_t = rand_tensor(&mut rng, &[c, 3, 3], -1.0, 1.0);
    let d_1 = rand_tensor(&mut rng, &[c, 3, 3], -1.0, 1.0);
    let skip = rand_tensor(&mut rng, &[c, 6, 6], -1.0, 1.0);
    let mut params = dfa.params();
    params.extend(cal.proj.params());
    let a = sweep(&store, &params, &d_t, |t, s, d| {
        let d1 = t.constant(d_1.clone())?;
        let sk = t.constant(skip.clone())?;
        let y = decode_stage(t, s, d, d1, Some(sk), &dfa, Some(&cal))?;
        probe(t, y, 26)
    })?;
    let b = grad_check(
        |t, d1| {
            let d = t.constant(d_t.clone())?;
            let sk = t.constant(skip.clone())?;
            let y = decode_stage(t, &store, d, d1, Some(sk), &dfa, Some(&cal))?;
            probe(t, y, 26)
        },
        &d_1,
        STEP,
    )?;
    Ok(a.max(b))
}

fn loss_targets(rng: &mut ChaCha8Rng, pixels: usize) -> (Vec<usize>, Vec<bool>) {
    let labels = (0..pixels).map(|_| rng.gen_range(0..9)).collect();
    let edges = (0..pixels).map(|_| rng.gen_bool(0.3)).collect();
    (labels, edges)
}

fn check_losses() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let seg = rand_tensor(&mut rng, &[9, 3, 3], -2.0, 2.0);
    let edge = rand_tensor(&mut rng, &[1, 3, 3], -2.0, 2.0);
    let (labels, edges) = loss_targets(&mut rng, 9);
    let weights: Vec<f64> = (0..9).map(|i| 0.5 + 0.25 * i as f64).collect();
    let a = grad_check(|t, x| t.weighted_ce(x, &labels, &weights), &seg, STEP)?;
    let b = grad_check(|t, x| t.focal(x, &edges, 2.0), &edge, STEP)?;
    Ok(a.max(b))
}

fn check_total_loss() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let seg = rand_tensor(&mut rng, &[9, 4, 4], -2.0, 2.0);
    let edge = rand_tensor(&mut rng, &[1, 4, 4], -2.0, 2.0);
    let (labels, edges) = loss_targets(&mut rng, 16);
    let cfg = LossConfig::new(0.6, 2.0, (0..9).map(|i| 1.0 + 0.5 * i as f64).collect())?;
    let a = grad_check(
        |t, x| {
            let e = t.constant(edge.clone())?;
            Ok(total_loss(t, x, &labels, e, &edges, &cfg)?.total)
        },
        &seg,
        STEP,
    )?;
    let b = grad_check(
        |t, e| {
            let x = t.constant(seg.clone())?;
            Ok(total_loss(t, x, &labels, e, &edges, &cfg)?.total)
        },
        &edge,
        STEP,
    )?;
    Ok(a.max(b))
}

/// Plain-text pass/fail table.
pub fn render(results: &[BlockResult]) -> String {
    let mut s = format!("{:<26} {:>14}  status\n", "block", "max rel error");
    for r in results {
        s.push_str(&format!(
            "{:<26} {:>14.3e}  {}\n",
            r.name,
            r.max_rel_error,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}
