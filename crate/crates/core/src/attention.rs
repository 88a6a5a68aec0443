//! Soft-gated unbalanced point attention.
//!
//! The unbalanced map scores each pixel by local variance plus darkness of
//! the RGB luminance. Attention logits are then biased per key column by
//! `-lambda * tanh(m)`, or, for the hard-cut baseline, keys whose trust
//! `1 - clamp(m, 0, 1)` falls below a threshold are removed outright.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::layers::{from_tokens, to_tokens, Projection};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_HARD_THRESHOLD: f64 = 0.1;
pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct UnbalancedMap<R> {
    pub values: Tensor<R>,
    pub window: usize,
}

impl<R: Real> UnbalancedMap<R> {
    /// Per-pixel trust `1 - clamp(m, 0, 1)`.
    pub fn trust(&self) -> Vec<R> {
        self.values
            .data()
            .iter()
            .map(|&m| R::one() - m.max(R::zero()).min(R::one()))
            .collect()
    }
}

/// Channel mean of an RGB image, computed relative to the red channel so a
/// grey pixel maps to its own value exactly.
pub fn luminance<R: Real>(rgb: &Tensor<R>) -> Result<Tensor<R>> {
    let (c, h, w) = rgb.chw()?;
    if c != 3 {
        return dim_err("luminance", format!("expected 3 channels, got {c}"));
    }
    let plane = h * w;
    let d = rgb.data();
    let three = R::lit(3.0);
    let lum = (0..plane)
        .map(|i| {
            let r = d[i];
            r + ((d[plane + i] - r) + (d[2 * plane + i] - r)) / three
        })
        .collect();
    Tensor::new(vec![1, h, w], lum)
}

/// `m = local_var(lum) + (1 - local_mean(lum))` as a differentiable path.
pub fn unbalanced_map_var<R: Real>(tape: &mut Tape<R>, lum: Var, window: usize) -> Result<Var> {
    let mean = tape.local_mean(lum, window)?;
    let var = tape.local_var(lum, window)?;
    let ones = tape.constant(Tensor::full(tape.value(lum).shape(), R::one()))?;
    let dark = tape.sub(ones, mean)?;
    tape.add(var, dark)
}

pub fn compute_unbalanced_map<R: Real>(rgb: &Tensor<R>, window: usize) -> Result<UnbalancedMap<R>> {
    let (lo, hi) = rgb.min_max();
    if rgb.numel() > 0 && (lo < R::zero() || hi > R::one()) {
        return Err(Error::Contract(format!("rgb values must lie in [0,1], found [{lo}, {hi}]")));
    }
    let lum = luminance(rgb)?;
    let mut tape = Tape::new();
    let x = tape.constant(lum)?;
    let m = unbalanced_map_var(&mut tape, x, window)?;
    Ok(UnbalancedMap {
        values: tape.value(m).clone(),
        window,
    })
}

/// Binary mask: 1 where trust reaches `threshold`, else 0.
pub fn hard_cut_mask<R: Real>(m: &UnbalancedMap<R>, threshold: f64) -> Tensor<R> {
    let th = R::lit(threshold);
    let data = m
        .trust()
        .into_iter()
        .map(|t| if t >= th { R::one() } else { R::zero() })
        .collect();
    Tensor::from_parts(m.values.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GatingMode {
    NoPrior,
    HardCut { threshold: f64 },
    SoftTanh,
}

impl GatingMode {
    pub fn key(&self) -> &'static str {
        match self {
            GatingMode::NoPrior => "none",
            GatingMode::HardCut { .. } => "hard",
            GatingMode::SoftTanh => "soft",
        }
    }
}

/// Gating as seen by one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Gating {
    NoPrior,
    HardCut(f64),
    /// Carries the learnable `lambda` as a one-element variable.
    SoftTanh(Var),
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
    pub values: Var,
}

/// Single-head attention over tokens `x: [N, C]` with the unbalanced-map
/// prior `m` (one value per token). `wq`, `wk` are `[C, d]`, `wv` is `[C, C]`.
pub fn sgupt_attention<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    m: &[R],
    gating: Gating,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<AttentionOutput> {
    let n = tape.value(x).shape()[0];
    if m.len() != n {
        return dim_err("sgupt_attention", format!("{n} tokens but map has {} entries", m.len()));
    }
    let d = tape.value(wq).shape()[1];
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scores = tape.scale(raw, R::lit(1.0 / (d as f64).sqrt()))?;
    let weights = match gating {
        Gating::NoPrior => tape.softmax(scores, 1)?,
        Gating::SoftTanh(lambda) => {
            let mv = tape.constant(Tensor::new(vec![n], m.to_vec())?)?;
            let t = tape.tanh(mv)?;
            let bias = tape.scale_by(t, lambda)?;
            let neg = tape.scale(bias, -R::one())?;
            let biased = tape.row_bias(scores, neg)?;
            tape.softmax(biased, 1)?
        }
        Gating::HardCut(threshold) => {
            let th = R::lit(threshold);
            let keep: Vec<bool> = m
                .iter()
                .map(|&mi| R::one() - mi.max(R::zero()).min(R::one()) >= th)
                .collect();
            tape.masked_row_softmax(scores, &keep)?
        }
    };
    let out = tape.matmul(weights, v)?;
    Ok(AttentionOutput {
        out,
        weights,
        values: v,
    })
}

/// Attention block applied residually to a `[C,H,W]` feature map.
#[derive(Debug, Clone)]
pub struct SgUptBlock {
    pub query: Projection,
    pub key: Projection,
    pub value: Projection,
    pub lambda: ParamId,
    pub mode: GatingMode,
}

impl SgUptBlock {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut ChaCha8Rng,
        channels: usize,
        dim: usize,
        mode: GatingMode,
        lambda_init: f64,
    ) -> Result<Self> {
        Ok(Self {
            query: Projection::new(store, rng, "sgupt.query", channels, dim)?,
            key: Projection::new(store, rng, "sgupt.key", channels, dim)?,
            value: Projection::new(store, rng, "sgupt.value", channels, channels)?,
            lambda: store.register("sgupt.lambda", Tensor::scalar(R::lit(lambda_init)))?,
            mode,
        })
    }

    /// `x + attention(x)`; `m` holds one prior value per pixel of `x`.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Var, m: &[R]) -> Result<Var> {
        let (_, h, w) = tape.value(x).chw()?;
        let tokens = to_tokens(tape, x)?;
        let wq = tape.param(store, self.query.weight)?;
        let wk = tape.param(store, self.key.weight)?;
        let wv = tape.param(store, self.value.weight)?;
        let gating = match self.mode {
            GatingMode::NoPrior => Gating::NoPrior,
            GatingMode::HardCut { threshold } => Gating::HardCut(threshold),
            GatingMode::SoftTanh => Gating::SoftTanh(tape.param(store, self.lambda)?),
        };
        let att = sgupt_attention(tape, tokens, m, gating, wq, wk, wv)?;
        let refined = from_tokens(tape, att.out, h, w)?;
        tape.add(x, refined)
    }
}
