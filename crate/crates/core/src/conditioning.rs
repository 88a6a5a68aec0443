//! Constrained scene captions and their embeddings.
//!
//! A caption pairs one illumination condition with the detected object
//! classes. The condition phrase alone yields the gating vector `P_cond`; the
//! whole caption yields the scene vector `P_emb`. Text vectors come from a
//! frozen, seeded table of unit vectors followed by two trainable MLPs.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SceneCondition {
    Glare,
    WellLit,
    Overcast,
    Twilight,
    TotalDarkness,
}

impl SceneCondition {
    pub const ALL: [SceneCondition; 5] = [
        SceneCondition::Glare,
        SceneCondition::WellLit,
        SceneCondition::Overcast,
        SceneCondition::Twilight,
        SceneCondition::TotalDarkness,
    ];

    pub fn surface(self) -> &'static str {
        match self {
            SceneCondition::Glare => "Glare",
            SceneCondition::WellLit => "Well-lit",
            SceneCondition::Overcast => "Overcast",
            SceneCondition::Twilight => "Twilight",
            SceneCondition::TotalDarkness => "Total Darkness",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_surface(text: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.surface() == text.trim())
    }
}

impl fmt::Display for SceneCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.surface())
    }
}

/// Object classes. Label index is `index() + 1`; label 0 is background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TargetClass {
    Car,
    Person,
    Bike,
    Curve,
    CarStop,
    Guardrail,
    ColorCone,
    Bump,
}

pub const NUM_CLASSES: usize = 9;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Background",
    "Car",
    "Person",
    "Bike",
    "Curve",
    "Car Stop",
    "Guardrail",
    "Color Cone",
    "Bump",
];

impl TargetClass {
    pub const ALL: [TargetClass; 8] = [
        TargetClass::Car,
        TargetClass::Person,
        TargetClass::Bike,
        TargetClass::Curve,
        TargetClass::CarStop,
        TargetClass::Guardrail,
        TargetClass::ColorCone,
        TargetClass::Bump,
    ];

    pub fn surface(self) -> &'static str {
        CLASS_NAMES[self.label()]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Index in the 9-way label space.
    pub fn label(self) -> usize {
        self as usize + 1
    }

    pub fn from_label(label: usize) -> Option<Self> {
        label.checked_sub(1).and_then(|i| Self::ALL.get(i).copied())
    }
}

/// How finely the illumination condition is named in the caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptGranularity {
    None,
    Binary,
    Ternary,
    FiveWay,
}

impl PromptGranularity {
    pub const ALL: [PromptGranularity; 4] = [
        PromptGranularity::None,
        PromptGranularity::Binary,
        PromptGranularity::Ternary,
        PromptGranularity::FiveWay,
    ];

    pub fn key(self) -> &'static str {
        match self {
            PromptGranularity::None => "none",
            PromptGranularity::Binary => "binary",
            PromptGranularity::Ternary => "ternary",
            PromptGranularity::FiveWay => "five",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.key() == key)
    }

    /// Condition phrase rendered into the caption, if any.
    pub fn phrase(self, condition: SceneCondition) -> Option<&'static str> {
        use SceneCondition::*;
        match self {
            PromptGranularity::None => None,
            PromptGranularity::Binary => Some(match condition {
                WellLit | Overcast => "Day",
                Glare | Twilight | TotalDarkness => "Night",
            }),
            PromptGranularity::Ternary => Some(match condition {
                WellLit => "Day",
                Overcast => "Overcast",
                Glare | Twilight | TotalDarkness => "Night",
            }),
            PromptGranularity::FiveWay => Some(condition.surface()),
        }
    }

    pub fn label_set(self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for c in SceneCondition::ALL {
            if let Some(p) = self.phrase(c) {
                if !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        out
    }
}

/// Table key used when the caption carries no condition phrase.
pub const NEUTRAL_TOKEN: &str = "driving scene";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub condition: SceneCondition,
    pub phrase: Option<&'static str>,
    pub objects: Vec<TargetClass>,
    pub text: String,
}

impl Caption {
    /// The condition prefix `T_i`, e.g. "A Total Darkness driving scene".
    pub fn condition_text(&self) -> String {
        match self.phrase {
            Some(p) => format!("A {p} driving scene"),
            None => "A driving scene".to_string(),
        }
    }

    pub fn condition_token(&self) -> &'static str {
        self.phrase.unwrap_or(NEUTRAL_TOKEN)
    }
}

fn render(phrase: Option<&str>, objects: &[TargetClass]) -> String {
    let names: Vec<&str> = objects.iter().map(|o| o.surface()).collect();
    let list = match names.as_slice() {
        [only] => only.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
        [] => String::new(),
    };
    match phrase {
        Some(p) => format!("A {p} driving scene containing {list}"),
        None => format!("A driving scene containing {list}"),
    }
}

/// Renders the five-way caption "A <condition> driving scene containing ...".
pub fn build_prompt(condition: SceneCondition, objects: &[TargetClass]) -> Result<Caption> {
    build_caption(PromptGranularity::FiveWay, condition, objects)
}

pub fn build_caption(
    granularity: PromptGranularity,
    condition: SceneCondition,
    objects: &[TargetClass],
) -> Result<Caption> {
    if objects.is_empty() {
        return Err(Error::Contract("caption needs at least one object".into()));
    }
    for (i, o) in objects.iter().enumerate() {
        if objects[..i].contains(o) {
            return Err(Error::Contract(format!("duplicate object {o:?} in caption")));
        }
    }
    let phrase = granularity.phrase(condition);
    Ok(Caption {
        condition,
        phrase,
        objects: objects.to_vec(),
        text: render(phrase, objects),
    })
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn random_unit(seed: u64, token: &str, attempt: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(token) ^ attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Largest cosine tolerated between two condition-token vectors.
pub const MAX_CONDITION_COSINE: f64 = 0.5;

/// Frozen token -> unit vector table standing in for a pretrained text
/// encoder. Vectors depend only on `(seed, token)`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    seed: u64,
    dim: usize,
    vectors: BTreeMap<&'static str, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut condition_tokens: Vec<&'static str> = SceneCondition::ALL.iter().map(|c| c.surface()).collect();
        condition_tokens.extend(["Day", "Night", NEUTRAL_TOKEN]);

        let mut vectors = BTreeMap::new();
        let mut accepted: Vec<Vec<f64>> = Vec::new();
        for token in condition_tokens {
            let mut attempt = 0;
            let v = loop {
                let v = random_unit(seed, token, attempt, dim);
                if accepted.iter().all(|a| cosine(a, &v) < MAX_CONDITION_COSINE) {
                    break v;
                }
                attempt += 1;
            };
            accepted.push(v.clone());
            vectors.insert(token, v);
        }
        for class in TargetClass::ALL {
            vectors.insert(class.surface(), random_unit(seed, class.surface(), 0, dim));
        }
        Self { seed, dim, vectors }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, token: &str) -> Result<&[f64]> {
        self.vectors
            .get(token)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("token {token:?} is outside the closed vocabulary")))
    }

    /// Text vector for `T_i`.
    pub fn condition_vector(&self, caption: &Caption) -> Result<Vec<f64>> {
        Ok(self.get(caption.condition_token())?.to_vec())
    }

    /// Renormalised mean of the condition and object vectors, summed in
    /// class order so the result does not depend on caption order.
    pub fn scene_vector(&self, caption: &Caption) -> Result<Vec<f64>> {
        let mut objects = caption.objects.clone();
        objects.sort();
        let mut acc = self.get(caption.condition_token())?.to_vec();
        for o in &objects {
            for (a, b) in acc.iter_mut().zip(self.get(o.surface())?) {
                *a += b;
            }
        }
        let n = (objects.len() + 1) as f64;
        for a in &mut acc {
            *a /= n;
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(acc.into_iter().map(|x| x / norm).collect())
    }
}

/// `text_dim -> 2C -> C` perceptron with a tanh hidden layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut ChaCha8Rng, name: &str, input: usize, width: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), input, 2 * width)?,
            out: Linear::new(store, rng, &format!("{name}.out"), 2 * width, width)?,
        })
    }

    /// Maps a `[D]` vector to `[C]`.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let d = tape.value(x).numel();
        let row = tape.reshape(x, &[1, d])?;
        let h = self.hidden.forward(tape, store, row)?;
        let h = tape.tanh(h)?;
        let y = self.out.forward(tape, store, h)?;
        let c = tape.value(y).numel();
        tape.reshape(y, &[c])
    }
}

/// Frozen table plus the two trainable projections producing `P_cond` and
/// `P_emb`.
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    pub table: EmbeddingTable,
    pub condition_mlp: Mlp,
    pub scene_mlp: Mlp,
}

impl SemanticEncoder {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut ChaCha8Rng,
        table: EmbeddingTable,
        channels: usize,
    ) -> Result<Self> {
        let dim = table.dim();
        Ok(Self {
            condition_mlp: Mlp::new(store, rng, "text.condition_mlp", dim, channels)?,
            scene_mlp: Mlp::new(store, rng, "text.scene_mlp", dim, channels)?,
            table,
        })
    }

    fn table_leaf<R: Real>(tape: &mut Tape<R>, v: &[f64]) -> Result<Var> {
        tape.constant(Tensor::from_f64(&[v.len()], v)?)
    }

    /// `P_cond = MLP(table[T_i])`.
    pub fn encode_condition<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, caption: &Caption) -> Result<Var> {
        let v = self.table.condition_vector(caption)?;
        let x = Self::table_leaf(tape, &v)?;
        self.condition_mlp.forward(tape, store, x)
    }

    /// `P_emb = MLP(normalised mean of the caption's token vectors)`.
    pub fn encode_scene<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, caption: &Caption) -> Result<Var> {
        let v = self.table.scene_vector(caption)?;
        let x = Self::table_leaf(tape, &v)?;
        self.scene_mlp.forward(tape, store, x)
    }
}

/// Stand-in for the vision-language model's condition call: returns the
/// generator's label, optionally corrupting an exact seeded fraction.
#[derive(Debug, Clone, Copy)]
pub struct ConditionOracle {
    pub corruption: f64,
    pub seed: u64,
}

impl ConditionOracle {
    pub fn perfect() -> Self {
        Self {
            corruption: 0.0,
            seed: 0,
        }
    }

    pub fn classify(&self, truth: SceneCondition) -> SceneCondition {
        truth
    }

    /// Labels for a whole split. Exactly `round(corruption * n)` entries are
    /// replaced by a uniformly drawn different condition.
    pub fn classify_all(&self, truth: &[SceneCondition]) -> Vec<SceneCondition> {
        let mut out = truth.to_vec();
        let n_bad = (self.corruption.clamp(0.0, 1.0) * truth.len() as f64).round() as usize;
        if n_bad == 0 {
            return out;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0c0d);
        let mut order: Vec<usize> = (0..truth.len()).collect();
        order.shuffle(&mut rng);
        for &i in &order[..n_bad] {
            let others: Vec<SceneCondition> = SceneCondition::ALL.into_iter().filter(|&c| c != truth[i]).collect();
            out[i] = others[rng.gen_range(0..others.len())];
        }
        out
    }
}
