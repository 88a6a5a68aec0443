//! Optimiser, schedule, training loop and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape};
use crate::conditioning::{build_caption, Caption, ConditionOracle, PromptGranularity, SceneCondition, NUM_CLASSES};
use crate::dataset::Sample;
use crate::decoder::feature_stats;
use crate::error::{Error, Result};
use crate::loss::{inverse_frequency_weights, total_loss, LossConfig};
use crate::metrics::{argmax, metrics, ConfusionMatrix, Metrics};
use crate::moe::{tv_distance, RouteStats};
use crate::network::{ClarityNet, SceneInput};
use crate::tensor::Real;

pub const POLY_POWER: f64 = 0.9;

/// `lr0 * (1 - t / t_max)^0.9`, zero from `t_max` on.
pub fn poly_lr(lr0: f64, t: usize, t_max: usize) -> f64 {
    if t_max == 0 || t >= t_max {
        return 0.0;
    }
    lr0 * (1.0 - t as f64 / t_max as f64).powf(POLY_POWER)
}

/// Adam with decoupled weight decay. Decay applies to rank >= 2 tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new<R: Real>(store: &ParamStore<R>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies one update using `grad * grad_scale`. Parameters without a
    /// gradient are left untouched.
    pub fn step<R: Real>(&mut self, store: &mut ParamStore<R>, lr: f64, grad_scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.as_ref() else { continue };
            let decay = if p.tensor.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let g = grad.data().to_vec();
            for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64() * grad_scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let wf = w.as_f64();
                *w = R::lit(wf - lr * (mhat / (vhat.sqrt() + self.eps) + decay * wf));
            }
        }
    }
}

/// Turns samples into captions: condition from the (possibly corrupted)
/// oracle, objects from the label map.
#[derive(Debug, Clone, Copy)]
pub struct Captioner {
    pub granularity: PromptGranularity,
    pub oracle: ConditionOracle,
}

impl Captioner {
    pub fn captions(&self, samples: &[Sample]) -> Result<Vec<Caption>> {
        let truth: Vec<SceneCondition> = samples.iter().map(|s| s.condition).collect();
        let seen = self.oracle.classify_all(&truth);
        samples
            .iter()
            .zip(seen)
            .map(|(s, c)| build_caption(self.granularity, c, &s.objects()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta: f64,
    pub gamma: f64,
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 30,
            seed: 1,
            beta: 0.6,
            gamma: 2.0,
            hflip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub seg_loss: f64,
    pub edge_loss: f64,
    pub lr_end: f64,
}

fn param_norms<R: Real>(store: &ParamStore<R>) -> String {
    store
        .iter()
        .map(|(_, p)| {
            let n = p.tensor.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            format!("{}={n:.4e}", p.name)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn route_seed(seed: u64, step: usize, item: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ ((step as u64) << 20) ^ item as u64
}

/// Trains `store` in place and returns one log entry per epoch. `on_epoch`
/// sees each entry as it completes.
pub fn train<R: Real>(
    model: &ClarityNet,
    store: &mut ParamStore<R>,
    samples: &[Sample],
    captions: &[Caption],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if samples.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if captions.len() != samples.len() || cfg.batch_size == 0 {
        return Err(Error::Contract("captions must match samples and batch_size be positive".into()));
    }
    let mut counts = [0u64; NUM_CLASSES];
    for s in samples {
        for (t, c) in counts.iter_mut().zip(s.class_counts()) {
            *t += c;
        }
    }
    let loss_cfg = LossConfig::new(cfg.beta, cfg.gamma, inverse_frequency_weights(&counts))?;
    let mut opt = AdamW::new(store, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0000);
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let t_max = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut tape = Tape::new();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut seg_sum, mut edge_sum) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grads();
            for (j, &idx) in batch.iter().enumerate() {
                let flipped;
                let sample = if cfg.hflip && rng.gen_bool(0.5) {
                    flipped = samples[idx].hflip();
                    &flipped
                } else {
                    &samples[idx]
                };
                let rgb = sample.rgb.cast::<R>();
                let thermal = sample.thermal.cast::<R>();
                tape.reset();
                let out = model.forward(
                    &mut tape,
                    store,
                    SceneInput {
                        rgb: &rgb,
                        thermal: &thermal,
                        caption: &captions[idx],
                        route_seed: route_seed(cfg.seed, step, j),
                    },
                )?;
                let parts = total_loss(&mut tape, out.seg_logits, &sample.labels, out.edge_logits, &sample.edges, &loss_cfg)?;
                let value = tape.value(parts.total).data()[0].as_f64();
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        detail: format!("loss {value}; parameter norms: {}", param_norms(store)),
                    });
                }
                tape.backward(parts.total).map_err(|e| match e {
                    Error::Numeric { op } => Error::Diverged {
                        step,
                        detail: format!("non-finite gradient in {op}; parameter norms: {}", param_norms(store)),
                    },
                    other => other,
                })?;
                tape.accumulate_into(store);
                sum += value;
                seg_sum += tape.value(parts.seg).data()[0].as_f64();
                edge_sum += tape.value(parts.edge).data()[0].as_f64();
            }
            lr = poly_lr(cfg.lr, step, t_max);
            opt.step(store, lr, 1.0 / batch.len() as f64);
            step += 1;
        }
        let n = samples.len() as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            loss: sum / n,
            seg_loss: seg_sum / n,
            edge_loss: edge_sum / n,
            lr_end: lr,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    /// Route statistics per condition (indexed like `SceneCondition::ALL`)
    /// and encoder stage; empty for the static router.
    pub routes: Vec<Vec<RouteStats>>,
    /// Mean and variance of each decoder state, averaged over scenes.
    pub decoder_stats: Vec<(f64, f64)>,
}

impl Evaluation {
    /// Route statistics of one condition summed over stages.
    pub fn condition_routes(&self, condition: SceneCondition) -> Option<RouteStats> {
        let stages = self.routes.get(condition.index())?;
        let mut iter = stages.iter();
        let mut total = iter.next()?.clone();
        for s in iter {
            total.merge(s).ok()?;
        }
        Some(total)
    }

    /// Selection frequencies of one condition with every stage weighted equally.
    pub fn balanced_frequencies(&self, condition: SceneCondition) -> Option<Vec<f64>> {
        let stages = self.routes.get(condition.index())?;
        let first = stages.first()?.frequencies();
        let mut mean = vec![0.0; first.len()];
        for s in stages {
            for (m, f) in mean.iter_mut().zip(s.frequencies()) {
                *m += f / stages.len() as f64;
            }
        }
        Some(mean)
    }

    /// Per-stage total-variation distance between two conditions.
    pub fn stage_tv(&self, a: SceneCondition, b: SceneCondition) -> Option<Vec<f64>> {
        let (sa, sb) = (self.routes.get(a.index())?, self.routes.get(b.index())?);
        if sa.is_empty() || sa.len() != sb.len() {
            return None;
        }
        sa.iter().zip(sb).map(|(x, y)| tv_distance(x, y).ok()).collect()
    }
}

pub fn predict<R: Real>(model: &ClarityNet, store: &ParamStore<R>, sample: &Sample, caption: &Caption, route_seed: u64) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let rgb = sample.rgb.cast::<R>();
    let thermal = sample.thermal.cast::<R>();
    let out = model.forward(
        &mut tape,
        store,
        SceneInput {
            rgb: &rgb,
            thermal: &thermal,
            caption,
            route_seed,
        },
    )?;
    argmax(tape.value(out.seg_logits))
}

pub fn evaluate<R: Real>(
    model: &ClarityNet,
    store: &ParamStore<R>,
    samples: &[Sample],
    captions: &[Caption],
    exclude_background: bool,
    seed: u64,
) -> Result<Evaluation> {
    if captions.len() != samples.len() {
        return Err(Error::Contract("captions must match samples".into()));
    }
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    let mut routes: Vec<Vec<RouteStats>> = Vec::new();
    let mut stats: Vec<(f64, f64)> = Vec::new();
    let mut tape = Tape::new();
    for (i, (sample, caption)) in samples.iter().zip(captions).enumerate() {
        let rgb = sample.rgb.cast::<R>();
        let thermal = sample.thermal.cast::<R>();
        tape.reset();
        let out = model.forward(
            &mut tape,
            store,
            SceneInput {
                rgb: &rgb,
                thermal: &thermal,
                caption,
                route_seed: route_seed(seed ^ 0xe7a1, 0, i),
            },
        )?;
        cm.add(&sample.labels, &argmax(tape.value(out.seg_logits))?)?;
        for (slot, &d) in out.decoder_states.iter().enumerate() {
            let (m, v) = feature_stats(tape.value(d));
            if stats.len() <= slot {
                stats.push((0.0, 0.0));
            }
            stats[slot].0 += m / samples.len() as f64;
            stats[slot].1 += v / samples.len() as f64;
        }
        let stage_stats: Vec<RouteStats> = out.routes.iter().flatten().map(RouteStats::from_routing).collect();
        if !stage_stats.is_empty() {
            if routes.is_empty() {
                routes = SceneCondition::ALL
                    .iter()
                    .map(|_| stage_stats.iter().map(|s| RouteStats::empty(s.counts.len(), s.k)).collect())
                    .collect();
            }
            for (acc, s) in routes[sample.condition.index()].iter_mut().zip(&stage_stats) {
                acc.merge(s)?;
            }
        }
    }
    Ok(Evaluation {
        metrics: metrics(&cm, exclude_background)?,
        confusion: cm,
        routes,
        decoder_stats: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_endpoints() {
        assert_eq!(poly_lr(0.01, 0, 100), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100), 0.0);
        assert!(poly_lr(0.01, 50, 100) < 0.01);
    }

    #[test]
    fn adamw_first_step_is_sign_times_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", crate::tensor::Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap()).unwrap();
        store.accumulate_grad(id, &[0.5, -2.0]);
        let mut opt = AdamW::new(&store, 0.0);
        opt.step(&mut store, 0.1, 1.0);
        let w = store.tensor(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }
}
