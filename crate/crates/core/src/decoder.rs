//! Hierarchical decoder with a weight-shared dilated aggregation block and
//! calibration against the initial decoder state.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeom, ParamId, ParamStore, Tape, Var};
use crate::conditioning::NUM_CLASSES;
use crate::error::{dim_err, Error, Result};
use crate::layers::Conv2d;
use crate::tensor::Real;

pub const DILATIONS: [usize; 3] = [1, 2, 4];

// keeps the summed branches at unit variance
const BRANCH_SCALE: f64 = 0.577_350_269_189_625_8;

const HEAD_SCALE: f64 = 0.1;

/// Parallel 3x3 branches at dilations 1, 2, 4, summed, then a pointwise mix
/// and a rectifier.
#[derive(Debug, Clone)]
pub struct DfaBlock {
    pub branches: Vec<Conv2d>,
    pub mix: Conv2d,
}

impl DfaBlock {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Result<Self> {
        let branches = DILATIONS
            .iter()
            .map(|&d| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.dil{d}"),
                    channels,
                    channels,
                    3,
                    ConvGeom::same(d, 3),
                    false,
                )
                .map(|c| c.rescale(store, BRANCH_SCALE))
            })
            .collect::<Result<Vec<_>>>()?;
        let mix = Conv2d::pointwise(store, rng, &format!("{name}.mix"), channels, channels, true)?;
        Ok(Self { branches, mix })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let mut acc = self.branches[0].forward(tape, store, x)?;
        for b in &self.branches[1..] {
            let y = b.forward(tape, store, x)?;
            acc = tape.add(acc, y)?;
        }
        let mixed = self.mix.forward(tape, store, acc)?;
        tape.relu(mixed)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.branches.iter().chain(std::iter::once(&self.mix)).flat_map(Conv2d::params).collect()
    }
}

/// Pointwise projection of `D_1` resized to the target resolution.
#[derive(Debug, Clone)]
pub struct Calibrator {
    pub proj: Conv2d,
}

impl Calibrator {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut ChaCha8Rng, channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::pointwise(store, rng, "decoder.calibrator", channels, channels, false)?,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, d1: Var, h: usize, w: usize) -> Result<Var> {
        let y = self.proj.forward(tape, store, d1)?;
        let (_, yh, yw) = tape.value(y).chw()?;
        if (yh, yw) == (h, w) {
            Ok(y)
        } else {
            tape.resize(y, h, w)
        }
    }
}

/// `D_{t+1} = H(Up(D_t) + skip + S(D_1))`; `skip` and the calibrator are
/// optional.
pub fn decode_stage<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    d_t: Var,
    d_1: Var,
    skip: Option<Var>,
    shared: &DfaBlock,
    cal: Option<&Calibrator>,
) -> Result<Var> {
    let mut u = tape.upsample(d_t, 2)?;
    let (_, h, w) = tape.value(u).chw()?;
    if let Some(s) = skip {
        if tape.value(s).shape() != tape.value(u).shape() {
            return dim_err(
                "decode_stage",
                format!("skip {:?} vs upsampled {:?}", tape.value(s).shape(), tape.value(u).shape()),
            );
        }
        u = tape.add(u, s)?;
    }
    if let Some(cal) = cal {
        let c = cal.forward(tape, store, d_1, h, w)?;
        if tape.value(c).shape() != tape.value(u).shape() {
            return dim_err("decode_stage", "calibrator output does not match the upsampled state");
        }
        u = tape.add(u, c)?;
    }
    shared.forward(tape, store, u)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub input_proj: Conv2d,
    /// Projections of the finer skips, ordered coarse to fine.
    pub skip_proj: Vec<Conv2d>,
    pub dfa: DfaBlock,
    pub calibrator: Option<Calibrator>,
    pub seg_head: Conv2d,
    pub edge_head: Conv2d,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub feature: Var,
    /// `D_1 .. D_T`.
    pub states: Vec<Var>,
}

impl Decoder {
    /// `skip_channels` lists encoder channels coarse to fine; its length is
    /// the stage count `T`.
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut ChaCha8Rng,
        skip_channels: &[usize],
        channels: usize,
        calibrator: bool,
    ) -> Result<Self> {
        let (&coarsest, finer) = skip_channels
            .split_first()
            .ok_or_else(|| Error::Contract("decoder needs at least one stage".into()))?;
        Ok(Self {
            input_proj: Conv2d::pointwise(store, rng, "decoder.input", coarsest, channels, true)?,
            skip_proj: finer
                .iter()
                .enumerate()
                .map(|(i, &c)| Conv2d::pointwise(store, rng, &format!("decoder.skip{}", i + 2), c, channels, false))
                .collect::<Result<Vec<_>>>()?,
            dfa: DfaBlock::new(store, rng, "decoder.dfa", channels)?,
            calibrator: if calibrator { Some(Calibrator::new(store, rng, channels)?) } else { None },
            seg_head: Conv2d::pointwise(store, rng, "head.seg", channels, NUM_CLASSES, true)?.rescale(store, HEAD_SCALE),
            edge_head: Conv2d::pointwise(store, rng, "head.edge", channels, 1, true)?.rescale(store, HEAD_SCALE),
        })
    }

    pub fn stages(&self) -> usize {
        self.skip_proj.len() + 1
    }

    /// Runs the chain over `skips` (coarse to fine) and returns `D_T`.
    pub fn run<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, skips: &[Var]) -> Result<DecoderOutput> {
        if skips.len() != self.stages() {
            return Err(Error::Contract(format!(
                "decoder built for {} stages, got {} skips",
                self.stages(),
                skips.len()
            )));
        }
        let d1 = self.input_proj.forward(tape, store, skips[0])?;
        let mut states = vec![d1];
        let mut d = d1;
        for (proj, &skip) in self.skip_proj.iter().zip(&skips[1..]) {
            let s = proj.forward(tape, store, skip)?;
            d = decode_stage(tape, store, d, d1, Some(s), &self.dfa, self.calibrator.as_ref())?;
            states.push(d);
        }
        Ok(DecoderOutput { feature: d, states })
    }

    /// Segmentation and edge logits at `h x w`.
    pub fn heads<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, d: Var, h: usize, w: usize) -> Result<(Var, Var)> {
        let seg = self.seg_head.forward(tape, store, d)?;
        let edge = self.edge_head.forward(tape, store, d)?;
        let (_, dh, dw) = tape.value(d).chw()?;
        if (dh, dw) == (h, w) {
            Ok((seg, edge))
        } else {
            Ok((tape.resize(seg, h, w)?, tape.resize(edge, h, w)?))
        }
    }
}

/// Mean and population variance of a feature map.
pub fn feature_stats<R: Real>(x: &crate::tensor::Tensor<R>) -> (f64, f64) {
    let n = x.numel().max(1) as f64;
    let mean = x.data().iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}
