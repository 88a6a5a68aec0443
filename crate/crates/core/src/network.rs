//! The full RGB-thermal segmentation network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{compute_unbalanced_map, GatingMode, SgUptBlock};
use crate::autodiff::{ConvGeom, ParamStore, Tape, Var};
use crate::conditioning::{Caption, EmbeddingTable, PromptGranularity, SemanticEncoder};
use crate::decoder::Decoder;
use crate::error::{param_err, Result};
use crate::layers::Conv2d;
use crate::moe::{FusionStage, MoeConfig, Routing, SceneContext};
use crate::tensor::{Real, Tensor};

pub const ENCODER_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub text_dim: usize,
    pub embedding_seed: u64,
    pub prompts: PromptGranularity,
    pub moe: MoeConfig,
    pub scene_embedding: bool,
    pub context_dim: usize,
    pub gating: GatingMode,
    pub lambda_init: f64,
    pub attention_dim: usize,
    pub window: usize,
    pub calibrator: bool,
    pub decoder_stages: usize,
    pub decoder_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            text_dim: 64,
            embedding_seed: 7,
            prompts: PromptGranularity::FiveWay,
            moe: MoeConfig::default(),
            scene_embedding: true,
            context_dim: 8,
            gating: GatingMode::SoftTanh,
            lambda_init: 1.0,
            attention_dim: 8,
            window: 5,
            calibrator: true,
            decoder_stages: 4,
            decoder_channels: 16,
        }
    }
}

impl ModelConfig {
    /// Channels per encoder stage: `C, 2C, 4C, 4C`.
    pub fn stage_channels(&self) -> [usize; ENCODER_STAGES] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 4 * c]
    }

    /// Input side length must be divisible by this.
    pub fn input_multiple(&self) -> usize {
        1 << (ENCODER_STAGES - 1)
    }
}

/// Four conv-bias-relu stages; the first keeps resolution, the rest halve it.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub stages: Vec<Conv2d>,
}

impl Encoder {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        channels: &[usize],
    ) -> Result<Self> {
        let mut cin = input;
        let mut stages = Vec::with_capacity(channels.len());
        for (i, &c) in channels.iter().enumerate() {
            let geom = ConvGeom {
                stride: if i == 0 { 1 } else { 2 },
                dilation: 1,
                padding: 1,
            };
            stages.push(Conv2d::new(store, rng, &format!("{name}.{i}"), cin, c, 3, geom, true)?);
            cin = c;
        }
        Ok(Self { stages })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for s in &self.stages {
            let y = s.forward(tape, store, h)?;
            h = tape.relu(y)?;
            feats.push(h);
        }
        Ok(feats)
    }
}

/// One scene as seen by the network.
#[derive(Debug, Clone, Copy)]
pub struct SceneInput<'a, R> {
    pub rgb: &'a Tensor<R>,
    pub thermal: &'a Tensor<R>,
    pub caption: &'a Caption,
    /// Seed for the random router; ignored by the other routers.
    pub route_seed: u64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub seg_logits: Var,
    pub edge_logits: Var,
    /// Routing per encoder stage, `None` for the static router.
    pub routes: Vec<Option<Routing>>,
    pub decoder_states: Vec<Var>,
    pub context_weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ClarityNet {
    pub cfg: ModelConfig,
    pub semantic: SemanticEncoder,
    pub rgb_encoder: Encoder,
    pub thermal_encoder: Encoder,
    pub fusion: Vec<FusionStage>,
    pub context: Option<SceneContext>,
    pub attention: SgUptBlock,
    pub decoder: Decoder,
}

impl ClarityNet {
    /// Registers every parameter in `store`, initialised from `seed`.
    pub fn new<R: Real>(cfg: ModelConfig, store: &mut ParamStore<R>, seed: u64) -> Result<Self> {
        if cfg.base_channels == 0 || cfg.decoder_channels == 0 {
            return param_err("model", "channel counts must be positive");
        }
        if cfg.decoder_stages == 0 || cfg.decoder_stages > ENCODER_STAGES {
            return param_err("model", format!("decoder_stages must lie in 1..={ENCODER_STAGES}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chans = cfg.stage_channels();
        let c = cfg.base_channels;
        let table = EmbeddingTable::new(cfg.embedding_seed, cfg.text_dim);
        let semantic = SemanticEncoder::new(store, &mut rng, table, c)?;
        let rgb_encoder = Encoder::new(store, &mut rng, "encoder.rgb", 3, &chans)?;
        let thermal_encoder = Encoder::new(store, &mut rng, "encoder.thermal", 1, &chans)?;
        let fusion = chans
            .iter()
            .enumerate()
            .map(|(i, &ci)| FusionStage::new(store, &mut rng, &format!("fusion.{i}"), ci, c, cfg.moe))
            .collect::<Result<Vec<_>>>()?;
        let coarsest = chans[ENCODER_STAGES - 1];
        let context = if cfg.scene_embedding {
            Some(SceneContext::new(store, &mut rng, coarsest, c, cfg.context_dim)?)
        } else {
            None
        };
        let attention = SgUptBlock::new(store, &mut rng, coarsest, cfg.attention_dim, cfg.gating, cfg.lambda_init)?;
        let skip_channels: Vec<usize> = chans.iter().rev().take(cfg.decoder_stages).copied().collect();
        let decoder = Decoder::new(store, &mut rng, &skip_channels, cfg.decoder_channels, cfg.calibrator)?;
        Ok(Self {
            cfg,
            semantic,
            rgb_encoder,
            thermal_encoder,
            fusion,
            context,
            attention,
            decoder,
        })
    }

    /// Unbalanced map of `rgb` averaged down to the coarsest feature grid.
    pub fn coarse_prior<R: Real>(&self, rgb: &Tensor<R>, h: usize, w: usize) -> Result<Vec<R>> {
        let m = compute_unbalanced_map(rgb, self.cfg.window)?;
        let (_, mh, mw) = m.values.chw()?;
        if mh % h != 0 || mw % w != 0 || mh / h != mw / w {
            return param_err("unbalanced_map", format!("{mh}x{mw} does not pool onto {h}x{w}"));
        }
        let mut tape = Tape::new();
        let x = tape.constant(m.values)?;
        let pooled = tape.avg_pool(x, mh / h)?;
        Ok(tape.value(pooled).data().to_vec())
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, input: SceneInput<'_, R>) -> Result<ForwardOutput> {
        let (_, h, w) = input.rgb.chw()?;
        let m = self.cfg.input_multiple();
        if h % m != 0 || w % m != 0 {
            return param_err("model", format!("input {h}x{w} must be divisible by {m}"));
        }
        // encoders see zero-centred inputs
        let half = R::lit(0.5);
        let rgb = tape.constant(input.rgb.map(|v| v - half))?;
        let thermal = tape.constant(input.thermal.map(|v| v - half))?;
        let f_rgb = self.rgb_encoder.forward(tape, store, rgb)?;
        let f_th = self.thermal_encoder.forward(tape, store, thermal)?;
        let p_cond = self.semantic.encode_condition(tape, store, input.caption)?;

        let mut fused = Vec::with_capacity(ENCODER_STAGES);
        let mut routes = Vec::with_capacity(ENCODER_STAGES);
        for (i, stage) in self.fusion.iter().enumerate() {
            let seed = input.route_seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let out = stage.forward(tape, store, f_rgb[i], f_th[i], p_cond, seed)?;
            fused.push(out.fused);
            routes.push(out.routing);
        }

        let mut coarse = fused[ENCODER_STAGES - 1];
        let mut context_weights = None;
        if let Some(ctx) = &self.context {
            let p_emb = self.semantic.encode_scene(tape, store, input.caption)?;
            let out = ctx.forward(tape, store, coarse, p_emb)?;
            coarse = out.out;
            context_weights = Some(out.weights);
        }
        let (_, ch, cw) = tape.value(coarse).chw()?;
        let prior = self.coarse_prior(input.rgb, ch, cw)?;
        coarse = self.attention.forward(tape, store, coarse, &prior)?;

        let mut skips = vec![coarse];
        skips.extend(fused.iter().rev().skip(1).take(self.cfg.decoder_stages - 1));
        let dec = self.decoder.run(tape, store, &skips)?;
        let (seg_logits, edge_logits) = self.decoder.heads(tape, store, dec.feature, h, w)?;
        Ok(ForwardOutput {
            seg_logits,
            edge_logits,
            routes,
            decoder_states: dec.states,
            context_weights,
        })
    }
}
