//! Scene collections, the stratified synthetic split and the on-disk layout
//! (`<root>/<split>/<scene>/{rgb,thermal,labels}.cltf` plus `condition.txt`).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{SceneCondition, TargetClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::metrics::derive_edges;
use crate::synth::{present_objects, synth_generate, SyntheticScene};
use crate::tensor::Tensor;

pub const SPLITS: [&str; 2] = ["train", "test"];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub rgb: Tensor<f32>,
    pub thermal: Tensor<f32>,
    pub labels: Vec<usize>,
    pub edges: Vec<bool>,
    pub condition: SceneCondition,
}

impl Sample {
    pub fn from_scene(name: impl Into<String>, scene: SyntheticScene) -> Self {
        Self {
            name: name.into(),
            rgb: scene.rgb,
            thermal: scene.thermal,
            labels: scene.labels,
            edges: scene.edges,
            condition: scene.condition,
        }
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn objects(&self) -> Vec<TargetClass> {
        present_objects(&self.labels)
    }

    /// Mirror image about the vertical axis.
    pub fn hflip(&self) -> Sample {
        let (h, w) = (self.height(), self.width());
        let flip_plane = |data: &[f32], c: usize| -> Vec<f32> {
            let mut out = vec![0f32; data.len()];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[(ch * h + y) * w + x] = data[(ch * h + y) * w + (w - 1 - x)];
                    }
                }
            }
            out
        };
        let flip_map = |data: &[usize]| -> Vec<usize> {
            (0..h * w).map(|i| data[(i / w) * w + (w - 1 - i % w)]).collect()
        };
        let labels = flip_map(&self.labels);
        Sample {
            name: self.name.clone(),
            rgb: Tensor::from_parts(self.rgb.shape().to_vec(), flip_plane(self.rgb.data(), 3)),
            thermal: Tensor::from_parts(self.thermal.shape().to_vec(), flip_plane(self.thermal.data(), 1)),
            edges: derive_edges(&labels, h, w).expect("shape preserved"),
            labels,
            condition: self.condition,
        }
    }

    /// Pixel count per class.
    pub fn class_counts(&self) -> [u64; NUM_CLASSES] {
        let mut counts = [0u64; NUM_CLASSES];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn train_class_counts(&self) -> [u64; NUM_CLASSES] {
        let mut total = [0u64; NUM_CLASSES];
        for s in &self.train {
            for (t, c) in total.iter_mut().zip(s.class_counts()) {
                *t += c;
            }
        }
        total
    }
}

/// `count` scenes cycling through the five conditions, so each condition
/// receives `count / 5` when divisible.
pub fn synth_scenes(count: usize, size: usize, seed: u64) -> Result<Vec<SyntheticScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let scene_seed: u64 = rng.gen();
            synth_generate(scene_seed, SceneCondition::ALL[i % SceneCondition::ALL.len()], size)
        })
        .collect()
}

/// Holds out the last `round(test_fraction * n_c)` scenes of every condition.
pub fn split_stratified(samples: Vec<Sample>, test_fraction: f64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Contract(format!("test fraction {test_fraction} outside [0,1)")));
    }
    let mut per_condition = [0usize; 5];
    for s in &samples {
        per_condition[s.condition.index()] += 1;
    }
    let mut seen = [0usize; 5];
    let mut ds = Dataset {
        train: Vec::new(),
        test: Vec::new(),
    };
    for s in samples {
        let c = s.condition.index();
        let keep = per_condition[c] - (test_fraction * per_condition[c] as f64).round() as usize;
        seen[c] += 1;
        if seen[c] <= keep {
            ds.train.push(s);
        } else {
            ds.test.push(s);
        }
    }
    Ok(ds)
}

pub fn synth_dataset(count: usize, size: usize, seed: u64, test_fraction: f64) -> Result<Dataset> {
    let samples = synth_scenes(count, size, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| Sample::from_scene(format!("scene_{i:05}"), s))
        .collect();
    split_stratified(samples, test_fraction)
}

fn labels_tensor(s: &Sample) -> Tensor<f32> {
    Tensor::from_parts(
        vec![s.height(), s.width()],
        s.labels.iter().map(|&l| l as f32).collect(),
    )
}

pub fn write_sample(dir: &Path, s: &Sample) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tensor(dir.join("rgb.cltf"), &s.rgb)?;
    write_tensor(dir.join("thermal.cltf"), &s.thermal)?;
    write_tensor(dir.join("labels.cltf"), &labels_tensor(s))?;
    fs::write(dir.join("condition.txt"), format!("{}\n", s.condition.surface()))?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<Sample> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let rgb = read_tensor(dir.join("rgb.cltf"))?.into_real::<f32>();
    let thermal = read_tensor(dir.join("thermal.cltf"))?.into_real::<f32>();
    let raw = read_tensor(dir.join("labels.cltf"))?.into_real::<f64>();
    let (c, h, w) = rgb.chw()?;
    if c != 3 || thermal.shape() != [1, h, w] || raw.numel() != h * w {
        return Err(Error::Format(format!("inconsistent raster shapes in {}", dir.display())));
    }
    let mut labels = Vec::with_capacity(h * w);
    for &v in raw.data() {
        if v < 0.0 || v.fract() != 0.0 || v as usize >= NUM_CLASSES {
            return Err(Error::Format(format!("label value {v} in {}", dir.display())));
        }
        labels.push(v as usize);
    }
    let text = fs::read_to_string(dir.join("condition.txt"))?;
    let condition = SceneCondition::from_surface(text.trim())
        .ok_or_else(|| Error::Format(format!("unknown condition {:?} in {}", text.trim(), dir.display())))?;
    let edges = derive_edges(&labels, h, w)?;
    Ok(Sample {
        name,
        rgb,
        thermal,
        labels,
        edges,
        condition,
    })
}

pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    for (split, samples) in SPLITS.iter().zip([&ds.train, &ds.test]) {
        for s in samples {
            write_sample(&root.join(split).join(&s.name), s)?;
        }
    }
    Ok(())
}

fn read_split(dir: &Path) -> Result<Vec<Sample>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut entries: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    entries.iter().map(|p| read_sample(p)).collect()
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Contract(format!("dataset directory {} does not exist", root.display())));
    }
    let ds = Dataset {
        train: read_split(&root.join("train"))?,
        test: read_split(&root.join("test"))?,
    };
    if ds.train.is_empty() && ds.test.is_empty() {
        return Err(Error::Contract(format!("no scenes found under {}", root.display())));
    }
    Ok(ds)
}
