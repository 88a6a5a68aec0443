//! Procedural RGB-thermal driving scenes with condition-specific RGB
//! degradation.
//!
//! Layout and thermal rendering depend only on the seed, so the thermal
//! image of a seed is the same under every condition. Degradation draws from
//! a separate stream.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::conditioning::{SceneCondition, TargetClass, NUM_CLASSES};
use crate::error::{param_err, Result};
use crate::metrics::derive_edges;
use crate::tensor::Tensor;

pub const SIZES: [usize; 2] = [32, 64];
const ROAD_HEAT: f64 = 0.35;
const SKY_HEAT: f64 = 0.12;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub rgb: Tensor<f32>,
    pub thermal: Tensor<f32>,
    pub labels: Vec<usize>,
    pub edges: Vec<bool>,
    pub condition: SceneCondition,
    pub seed: u64,
    pub size: usize,
}

impl SyntheticScene {
    /// Classes present in the label map, in enumeration order.
    pub fn objects(&self) -> Vec<TargetClass> {
        present_objects(&self.labels)
    }
}

pub fn present_objects(labels: &[usize]) -> Vec<TargetClass> {
    let mut seen = [false; NUM_CLASSES];
    for &l in labels {
        if l < NUM_CLASSES {
            seen[l] = true;
        }
    }
    TargetClass::ALL.into_iter().filter(|c| seen[c.label()]).collect()
}

struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
    heat: Vec<f64>,
    labels: Vec<usize>,
    /// Fraction of brightness kept under darkness (retroreflection).
    reflect: Vec<f64>,
}

impl Canvas {
    fn paint(&mut self, x: i64, y: i64, class: usize, color: [f64; 3], heat: f64, reflect: f64) {
        let n = self.size as i64;
        if x < 0 || y < 0 || x >= n || y >= n {
            return;
        }
        let i = (y * n + x) as usize;
        self.rgb[i] = color;
        self.heat[i] = heat;
        self.labels[i] = class;
        self.reflect[i] = reflect;
    }

    fn rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, class: usize, color: [f64; 3], heat: f64) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.paint(x, y, class, color, heat, 0.0);
            }
        }
    }

    fn disc(&mut self, cx: f64, cy: f64, r: f64, class: usize, color: [f64; 3], heat: f64) {
        let (lo_y, hi_y) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        let (lo_x, hi_x) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.paint(x, y, class, color, heat, 0.0);
                }
            }
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

fn draw_object(canvas: &mut Canvas, rng: &mut ChaCha8Rng, class: TargetClass, horizon: i64) {
    let n = canvas.size as i64;
    let s = canvas.size as f64 / 32.0;
    let sc = |v: f64| (v * s).round().max(1.0) as i64;
    let label = class.label();
    let ground = |rng: &mut ChaCha8Rng, h: i64| rng.gen_range(horizon + 1..n - 1).max(h) - h;
    match class {
        TargetClass::Car => {
            let (w, h) = (sc(rng.gen_range(7.0..12.0)), sc(rng.gen_range(4.0..7.0)));
            let x = rng.gen_range(-w / 3..n - 2 * w / 3);
            let y = ground(rng, h);
            let palette = [[0.8, 0.12, 0.1], [0.1, 0.2, 0.75], [0.9, 0.9, 0.88], [0.2, 0.2, 0.22]];
            let base = *palette.choose(rng).unwrap();
            let col = jitter(rng, base, 0.05);
            canvas.rect(x, y, w, h, label, col, 0.8 + rng.gen_range(0.0..0.08));
        }
        TargetClass::Person => {
            let (w, h) = (sc(rng.gen_range(2.0..3.5)), sc(rng.gen_range(6.0..9.0)));
            let x = rng.gen_range(0..n - w);
            let y = ground(rng, h);
            let col = jitter(rng, [0.55, 0.4, 0.3], 0.1);
            canvas.rect(x, y, w, h, label, col, 0.93 + rng.gen_range(0.0..0.05));
        }
        TargetClass::Bike => {
            let r = 1.6 * s;
            let cx = rng.gen_range(3.0 * s..n as f64 - 3.0 * s);
            let cy = rng.gen_range((horizon + 3) as f64..n as f64 - r);
            let col = jitter(rng, [0.15, 0.6, 0.3], 0.08);
            let heat = 0.6 + rng.gen_range(0.0..0.05);
            canvas.disc(cx - 1.8 * s, cy, r, label, col, heat);
            canvas.disc(cx + 1.8 * s, cy, r, label, col, heat);
            canvas.rect((cx - 1.8 * s) as i64, (cy - r) as i64, sc(3.6), sc(1.0), label, col, heat);
        }
        TargetClass::Curve => {
            let (w, h) = (sc(rng.gen_range(10.0..20.0)), sc(2.0));
            let x = rng.gen_range(-w / 4..n - 3 * w / 4);
            let y = ground(rng, h);
            for dx in 0..w {
                let col = if (dx / sc(2.0)) % 2 == 0 { [0.85, 0.15, 0.15] } else { [0.92, 0.92, 0.92] };
                canvas.rect(x + dx, y, 1, h, label, col, ROAD_HEAT + 0.04);
            }
        }
        TargetClass::CarStop => {
            let (w, h) = (sc(rng.gen_range(5.0..7.0)), sc(2.0));
            let x = rng.gen_range(0..n - w);
            let y = ground(rng, h);
            let col = jitter(rng, [0.95, 0.8, 0.1], 0.04);
            canvas.rect(x, y, w, h, label, col, ROAD_HEAT + 0.02);
        }
        TargetClass::Guardrail => {
            let thick = rng.gen_range(1..=2);
            let w = sc(rng.gen_range(12.0..24.0));
            let x = rng.gen_range(-w / 4..n - 3 * w / 4);
            let y = rng.gen_range((horizon - 2).max(0)..(horizon + sc(6.0)).min(n - thick));
            let col = jitter(rng, [0.78, 0.8, 0.84], 0.04);
            canvas.rect(x, y, w, thick, label, col, 0.04);
        }
        TargetClass::ColorCone => {
            let h = sc(rng.gen_range(4.0..6.0));
            let cx = rng.gen_range(2 * h..n - 2 * h) as f64;
            let base = ground(rng, h) + h;
            let col = [1.0, 0.45, 0.0];
            for dy in 0..h {
                let half = (dy as f64 + 1.0) * 0.45;
                let y = base - h + dy;
                for x in (cx - half).round() as i64..(cx + half).round() as i64 {
                    canvas.paint(x, y, label, col, ROAD_HEAT + 0.07, 0.35);
                }
            }
        }
        TargetClass::Bump => {
            let (w, h) = (sc(rng.gen_range(10.0..16.0)), sc(2.0));
            let x = rng.gen_range(-w / 4..n - 3 * w / 4);
            let y = ground(rng, h);
            for dx in 0..w {
                let col = if (dx / sc(2.0)) % 2 == 0 { [0.95, 0.85, 0.1] } else { [0.08, 0.08, 0.08] };
                canvas.rect(x + dx, y, 1, h, label, col, ROAD_HEAT + 0.01);
            }
        }
    }
}

fn layout(seed: u64, size: usize) -> Canvas {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = size as i64;
        let horizon = (size as f64 * rng.gen_range(0.32..0.45)) as i64;
        let mut canvas = Canvas {
            size,
            rgb: vec![[0.0; 3]; size * size],
            heat: vec![0.0; size * size],
            labels: vec![0; size * size],
            reflect: vec![0.0; size * size],
        };
        for y in 0..n {
            for x in 0..n {
                let i = (y * n + x) as usize;
                if y < horizon {
                    let t = y as f64 / horizon as f64;
                    canvas.rgb[i] = [0.5 + 0.1 * t, 0.62 + 0.08 * t, 0.85 - 0.05 * t];
                    canvas.heat[i] = SKY_HEAT;
                } else {
                    let g = rng.gen_range(-0.02..0.02);
                    canvas.rgb[i] = [0.38 + g, 0.38 + g, 0.4 + g];
                    canvas.heat[i] = ROAD_HEAT + 0.05 * (y - horizon) as f64 / (n - horizon) as f64;
                }
            }
        }
        let count = rng.gen_range(1..=4);
        let mut classes = TargetClass::ALL.to_vec();
        classes.shuffle(&mut rng);
        for &class in &classes[..count] {
            draw_object(&mut canvas, &mut rng, class, horizon);
        }
        if canvas.labels.iter().any(|&l| l != 0) {
            let noise = Normal::new(0.0, 0.01).expect("valid sigma");
            for h in &mut canvas.heat {
                *h = (*h + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            return canvas;
        }
    }
}

fn add_noise(rgb: &mut [[f64; 3]], rng: &mut ChaCha8Rng, sigma: f64) {
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    for px in rgb.iter_mut() {
        for v in px.iter_mut() {
            *v += noise.sample(rng);
        }
    }
}

fn degrade(canvas: &Canvas, condition: SceneCondition, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = canvas.size;
    let mut rgb = canvas.rgb.clone();
    match condition {
        SceneCondition::WellLit => {}
        SceneCondition::Overcast => {
            for px in &mut rgb {
                *px = px.map(|v| 0.55 * v + 0.2);
            }
            add_noise(&mut rgb, rng, 0.02);
        }
        SceneCondition::Twilight => {
            let tint = [1.1, 0.9, 0.75];
            for px in &mut rgb {
                for (v, t) in px.iter_mut().zip(tint) {
                    *v *= 0.4 * t;
                }
            }
            add_noise(&mut rgb, rng, 0.04);
        }
        SceneCondition::Glare => {
            for px in &mut rgb {
                *px = px.map(|v| 0.8 * v + 0.25);
            }
            add_noise(&mut rgb, rng, 0.02);
            let target = (0.12 * (n * n) as f64).ceil() as usize;
            let mut saturated = vec![false; n * n];
            while saturated.iter().filter(|&&s| s).count() < target {
                let r = rng.gen_range(0.12..0.22) * n as f64;
                let cx = rng.gen_range(0.0..n as f64);
                let cy = rng.gen_range(0.0..n as f64 * 0.8);
                for y in 0..n {
                    for x in 0..n {
                        let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                        let i = y * n + x;
                        if d <= r {
                            saturated[i] = true;
                        } else if d <= 1.6 * r {
                            let halo = 1.0 - (d - r) / (0.6 * r);
                            rgb[i] = rgb[i].map(|v| v + (1.0 - v) * 0.8 * halo);
                        }
                    }
                }
            }
            for (px, &s) in rgb.iter_mut().zip(&saturated) {
                if s {
                    *px = [1.0; 3];
                }
            }
        }
        SceneCondition::TotalDarkness => {
            for (px, &keep) in rgb.iter_mut().zip(&canvas.reflect) {
                let k = 0.06f64.max(keep);
                *px = px.map(|v| v * k);
            }
            add_noise(&mut rgb, rng, 0.07);
        }
    }
    for px in &mut rgb {
        *px = px.map(|v| v.clamp(0.0, 1.0));
    }
    rgb
}

/// Renders the scene for `seed` under `condition` at `size x size`.
pub fn synth_generate(seed: u64, condition: SceneCondition, size: usize) -> Result<SyntheticScene> {
    if !SIZES.contains(&size) {
        return param_err("synth_generate", format!("size must be one of {SIZES:?}, got {size}"));
    }
    let canvas = layout(seed, size);
    let mut deg_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd3e9_a1b7_0000_0000 ^ condition.index() as u64);
    let rgb = degrade(&canvas, condition, &mut deg_rng);
    let plane = size * size;
    let mut rgb_data = vec![0f32; 3 * plane];
    for (i, px) in rgb.iter().enumerate() {
        for c in 0..3 {
            rgb_data[c * plane + i] = px[c] as f32;
        }
    }
    let thermal: Vec<f32> = canvas.heat.iter().map(|&h| h as f32).collect();
    let edges = derive_edges(&canvas.labels, size, size)?;
    Ok(SyntheticScene {
        rgb: Tensor::new(vec![3, size, size], rgb_data)?,
        thermal: Tensor::new(vec![1, size, size], thermal)?,
        labels: canvas.labels,
        edges,
        condition,
        seed,
        size,
    })
}
