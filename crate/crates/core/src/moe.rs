//! Condition-gated sparse mixture-of-experts fusion and scene-context
//! injection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeom, ParamId, ParamStore, Tape, Var};
use crate::error::{dim_err, param_err, Error, Result};
use crate::layers::{from_tokens, to_tokens, Conv2d, Projection};
use crate::tensor::{Real, Tensor};

/// Top-K expert selection per pixel. Ties go to the lower expert index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Routing {
    experts: usize,
    k: usize,
    selected: Vec<usize>,
}

impl Routing {
    /// Ranks the expert axis of `scores: [E,H,W]` at every pixel.
    pub fn top_k<R: Real>(scores: &Tensor<R>, k: usize) -> Result<Self> {
        let (experts, h, w) = scores.chw()?;
        if k == 0 || k > experts {
            return param_err("top_k", format!("k = {k} with {experts} experts"));
        }
        let p_count = h * w;
        let s = scores.data();
        let mut selected = Vec::with_capacity(p_count * k);
        let mut order: Vec<usize> = Vec::with_capacity(experts);
        for p in 0..p_count {
            order.clear();
            order.extend(0..experts);
            // stable sort keeps the lower index first among equal scores
            order.sort_by(|&a, &b| {
                s[b * p_count + p]
                    .partial_cmp(&s[a * p_count + p])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut chosen = order[..k].to_vec();
            chosen.sort_unstable();
            selected.extend(chosen);
        }
        Ok(Self { experts, k, selected })
    }

    /// Selects the same expert set at every pixel.
    pub fn fixed(experts: usize, pixels: usize, chosen: &[usize]) -> Result<Self> {
        if chosen.is_empty() || chosen.iter().any(|&e| e >= experts) {
            return param_err("routing", format!("selection {chosen:?} over {experts} experts"));
        }
        let mut sorted = chosen.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != chosen.len() {
            return param_err("routing", "duplicate expert in selection");
        }
        Ok(Self {
            experts,
            k: sorted.len(),
            selected: sorted.iter().copied().cycle().take(pixels * sorted.len()).collect(),
        })
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn pixels(&self) -> usize {
        self.selected.len() / self.k
    }

    /// Selected expert indices at pixel `p`, ascending.
    pub fn selected(&self, p: usize) -> &[usize] {
        &self.selected[p * self.k..(p + 1) * self.k]
    }
}

/// Per-expert Top-K selection counts accumulated over pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteStats {
    pub counts: Vec<u64>,
    pub pixels: u64,
    pub k: usize,
}

impl RouteStats {
    pub fn empty(experts: usize, k: usize) -> Self {
        Self {
            counts: vec![0; experts],
            pixels: 0,
            k,
        }
    }

    pub fn from_routing(routing: &Routing) -> Self {
        let mut stats = Self::empty(routing.experts(), routing.k());
        for p in 0..routing.pixels() {
            for &e in routing.selected(p) {
                stats.counts[e] += 1;
            }
        }
        stats.pixels = routing.pixels() as u64;
        stats
    }

    pub fn merge(&mut self, other: &RouteStats) -> Result<()> {
        if other.counts.len() != self.counts.len() || other.k != self.k {
            return Err(Error::Contract("merging route statistics of different shapes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.pixels += other.pixels;
        Ok(())
    }

    /// Fraction of pixels selecting each expert; sums to `k`.
    pub fn frequencies(&self) -> Vec<f64> {
        if self.pixels == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / self.pixels as f64).collect()
    }
}

pub fn route_statistics<R: Real>(scores: &Tensor<R>, k: usize) -> Result<RouteStats> {
    Ok(RouteStats::from_routing(&Routing::top_k(scores, k)?))
}

/// Total-variation distance between the selection distributions
/// `freq / k` of two statistics.
pub fn tv_distance(a: &RouteStats, b: &RouteStats) -> Result<f64> {
    if a.counts.len() != b.counts.len() || a.k != b.k {
        return Err(Error::Contract("route statistics over different expert sets".into()));
    }
    tv_frequencies(&a.frequencies(), &b.frequencies(), a.k)
}

/// Total-variation distance between two frequency vectors that each sum to `k`.
pub fn tv_frequencies(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    if a.len() != b.len() || k == 0 {
        return Err(Error::Contract("frequency vectors of different lengths".into()));
    }
    let k = k as f64;
    Ok(0.5 * a.iter().zip(b).map(|(x, y)| (x / k - y / k).abs()).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterMode {
    /// One dense fusion convolution, no experts.
    Static,
    /// Seeded uniform-random scores in place of the learned gate.
    Random,
    /// Learned gate over features and the condition embedding.
    Condition,
}

impl RouterMode {
    pub fn key(self) -> &'static str {
        match self {
            RouterMode::Static => "static",
            RouterMode::Random => "random",
            RouterMode::Condition => "condition",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        match key {
            "static" => Some(RouterMode::Static),
            "random" => Some(RouterMode::Random),
            "condition" => Some(RouterMode::Condition),
            _ => None,
        }
    }
}

/// `S = softmax(W_g [f_rgb, f_th, expand(p_cond)])` over the expert axis.
#[derive(Debug, Clone)]
pub struct Gate {
    pub proj: Conv2d,
}

impl Gate {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        cond_dim: usize,
        experts: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::pointwise(store, rng, name, 2 * channels + cond_dim, experts, true)?,
        })
    }

    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        f_rgb: Var,
        f_th: Var,
        p_cond: Var,
    ) -> Result<Var> {
        let (_, h, w) = tape.value(f_rgb).chw()?;
        if tape.value(f_th).shape() != tape.value(f_rgb).shape() {
            return dim_err("gate", "rgb and thermal features differ in shape");
        }
        let p = tape.expand(p_cond, h, w)?;
        let x = tape.concat(&[f_rgb, f_th, p])?;
        let logits = self.proj.forward(tape, store, x)?;
        tape.softmax(logits, 0)
    }
}

/// Uniform-random selection scores of shape `[experts,h,w]`.
pub fn random_scores<R: Real>(seed: u64, experts: usize, h: usize, w: usize) -> Tensor<R> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_count = h * w;
    let logits: Vec<f64> = (0..experts * p_count).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut data = vec![R::zero(); logits.len()];
    for p in 0..p_count {
        let max = (0..experts).map(|e| logits[e * p_count + p]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..experts).map(|e| (logits[e * p_count + p] - max).exp()).sum();
        for e in 0..experts {
            data[e * p_count + p] = R::lit((logits[e * p_count + p] - max).exp() / denom);
        }
    }
    Tensor::from_parts(vec![experts, h, w], data)
}

/// Bank of identically shaped bias-free 3x3 experts mapping `2c -> c`.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    pub experts: Vec<Conv2d>,
}

impl ExpertBank {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut ChaCha8Rng, name: &str, channels: usize, count: usize) -> Result<Self> {
        let experts = (0..count)
            .map(|i| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.{i}"),
                    2 * channels,
                    channels,
                    3,
                    ConvGeom::same(1, 3),
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Every expert applied densely to the concatenated input.
    pub fn forward_all<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Var) -> Result<Vec<Var>> {
        self.experts.iter().map(|e| e.forward(tape, store, x)).collect()
    }
}

/// `F_fused = sum_k S_rho(k) * E_rho(k)([f_rgb, f_th])` at the routed pixels.
pub fn sparse_fuse<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    f_rgb: Var,
    f_th: Var,
    scores: Var,
    bank: &ExpertBank,
    k: usize,
    renormalize: bool,
) -> Result<(Var, Routing)> {
    if k == 0 || k > bank.len() {
        return param_err("sparse_fuse", format!("k = {k} with {} experts", bank.len()));
    }
    let routing = Routing::top_k(tape.value(scores), k)?;
    let fused = sparse_fuse_routed(tape, store, f_rgb, f_th, scores, bank, routing.clone(), renormalize)?;
    Ok((fused, routing))
}

/// As [`sparse_fuse`] with a caller-fixed routing. Each expert is evaluated
/// only at the pixels routed to it.
#[allow(clippy::too_many_arguments)]
pub fn sparse_fuse_routed<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    f_rgb: Var,
    f_th: Var,
    scores: Var,
    bank: &ExpertBank,
    routing: Routing,
    renormalize: bool,
) -> Result<Var> {
    let x = tape.concat(&[f_rgb, f_th])?;
    let kernels = bank
        .experts
        .iter()
        .map(|e| tape.param(store, e.weight))
        .collect::<Result<Vec<_>>>()?;
    tape.routed_conv(x, &kernels, scores, routing, renormalize, bank.experts[0].geom)
}

/// Reference path for [`sparse_fuse_routed`]: every expert evaluated densely,
/// then mixed at the routed pixels.
#[allow(clippy::too_many_arguments)]
pub fn dense_routed_mix<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    f_rgb: Var,
    f_th: Var,
    scores: Var,
    bank: &ExpertBank,
    routing: Routing,
    renormalize: bool,
) -> Result<Var> {
    let x = tape.concat(&[f_rgb, f_th])?;
    let outs = bank.forward_all(tape, store, x)?;
    tape.topk_mix(scores, &outs, routing, renormalize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoeConfig {
    pub experts: usize,
    pub top_k: usize,
    pub renormalize: bool,
    pub router: RouterMode,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            experts: 5,
            top_k: 2,
            renormalize: false,
            router: RouterMode::Condition,
        }
    }
}

/// Fusion for one encoder stage.
#[derive(Debug, Clone)]
pub struct FusionStage {
    pub gate: Option<Gate>,
    pub bank: Option<ExpertBank>,
    pub dense: Option<Conv2d>,
    pub cfg: MoeConfig,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub fused: Var,
    pub scores: Option<Var>,
    pub routing: Option<Routing>,
}

impl FusionStage {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        cond_dim: usize,
        cfg: MoeConfig,
    ) -> Result<Self> {
        if cfg.router == RouterMode::Static {
            let dense = Conv2d::new(store, rng, &format!("{name}.dense"), 2 * channels, channels, 3, ConvGeom::same(1, 3), false)?;
            return Ok(Self {
                gate: None,
                bank: None,
                dense: Some(dense),
                cfg,
            });
        }
        if cfg.top_k == 0 || cfg.top_k > cfg.experts {
            return param_err("moe", format!("top_k = {} with {} experts", cfg.top_k, cfg.experts));
        }
        let gate = match cfg.router {
            RouterMode::Condition => Some(Gate::new(store, rng, &format!("{name}.gate"), channels, cond_dim, cfg.experts)?),
            _ => None,
        };
        Ok(Self {
            gate,
            bank: Some(ExpertBank::new(store, rng, &format!("{name}.expert"), channels, cfg.experts)?),
            dense: None,
            cfg,
        })
    }

    /// `route_seed` drives the random router and is ignored otherwise.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        f_rgb: Var,
        f_th: Var,
        p_cond: Var,
        route_seed: u64,
    ) -> Result<FusionOutput> {
        if let Some(dense) = &self.dense {
            let x = tape.concat(&[f_rgb, f_th])?;
            return Ok(FusionOutput {
                fused: dense.forward(tape, store, x)?,
                scores: None,
                routing: None,
            });
        }
        let bank = self.bank.as_ref().expect("expert bank present for sparse routers");
        let scores = match &self.gate {
            Some(gate) => gate.forward(tape, store, f_rgb, f_th, p_cond)?,
            None => {
                let (_, h, w) = tape.value(f_rgb).chw()?;
                tape.constant(random_scores(route_seed, self.cfg.experts, h, w))?
            }
        };
        let (fused, routing) = sparse_fuse(tape, store, f_rgb, f_th, scores, bank, self.cfg.top_k, self.cfg.renormalize)?;
        Ok(FusionOutput {
            fused,
            scores: Some(scores),
            routing: Some(routing),
        })
    }
}

/// Cross-attention of every pixel onto the single scene-embedding token,
/// added residually.
#[derive(Debug, Clone)]
pub struct SceneContext {
    pub query: Projection,
    pub key: Projection,
    pub value: Projection,
    pub out: Projection,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ContextOutput {
    pub out: Var,
    pub weights: Var,
}

impl SceneContext {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut ChaCha8Rng, channels: usize, emb_dim: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            query: Projection::new(store, rng, "context.query", channels, dim)?,
            key: Projection::new(store, rng, "context.key", emb_dim, dim)?,
            value: Projection::new(store, rng, "context.value", emb_dim, dim)?,
            out: Projection::new(store, rng, "context.out", dim, channels)?,
            dim,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, fused: Var, p_emb: Var) -> Result<ContextOutput> {
        let (_, h, w) = tape.value(fused).chw()?;
        let e = tape.value(p_emb).numel();
        let tokens = to_tokens(tape, fused)?;
        let p = tape.reshape(p_emb, &[1, e])?;
        let q = self.query.forward(tape, store, tokens)?;
        let k = self.key.forward(tape, store, p)?;
        let v = self.value.forward(tape, store, p)?;
        let kt = tape.transpose(k)?;
        let raw = tape.matmul(q, kt)?;
        let logits = tape.scale(raw, R::lit(1.0 / (self.dim as f64).sqrt()))?;
        let weights = tape.softmax(logits, 1)?;
        let ctx = tape.matmul(weights, v)?;
        let projected = self.out.forward(tape, store, ctx)?;
        let spatial = from_tokens(tape, projected, h, w)?;
        Ok(ContextOutput {
            out: tape.add(fused, spatial)?,
            weights,
        })
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.query.weight, self.key.weight, self.value.weight, self.out.weight]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores_1px(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len(), 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_scores_tie_break_low() {
        let s = Tensor::<f64>::full(&[4, 3, 3], 0.25);
        let stats = route_statistics(&s, 2).unwrap();
        assert_eq!(stats.frequencies(), vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_argmax() {
        let stats = route_statistics(&scores_1px(&[0.0, 0.0, 1.0, 0.0]), 1).unwrap();
        assert_eq!(stats.frequencies(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn top_k_order() {
        let r = Routing::top_k(&scores_1px(&[0.2, 0.4, 0.1, 0.3]), 2).unwrap();
        assert_eq!(r.selected(0), &[1, 3]);
        assert!(Routing::top_k(&scores_1px(&[0.5, 0.5]), 3).is_err());
    }

    #[test]
    fn tv_distance_bounds() {
        let a = route_statistics(&scores_1px(&[1.0, 0.0, 0.0]), 1).unwrap();
        let b = route_statistics(&scores_1px(&[0.0, 1.0, 0.0]), 1).unwrap();
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(tv_distance(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn tv_frequencies_matches_statistics() {
        let a = route_statistics(&scores_1px(&[0.5, 0.3, 0.2]), 2).unwrap();
        let b = route_statistics(&scores_1px(&[0.1, 0.3, 0.6]), 2).unwrap();
        let direct = tv_frequencies(&a.frequencies(), &b.frequencies(), 2).unwrap();
        assert_eq!(direct, tv_distance(&a, &b).unwrap());
        assert_eq!(direct, 0.5);
        assert!(tv_frequencies(&[1.0], &[1.0, 0.0], 1).is_err());
    }

    #[test]
    fn random_scores_are_distributions() {
        let s: Tensor<f64> = random_scores(3, 5, 4, 4);
        for p in 0..16 {
            let total: f64 = (0..5).map(|e| s.data()[e * 16 + p]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert_eq!(s, random_scores(3, 5, 4, 4));
        assert_ne!(s, random_scores(4, 5, 4, 4));
    }
}
