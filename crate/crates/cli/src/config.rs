//! Flat `key = value` run configuration.

use std::fmt;
use std::path::PathBuf;

use clarity_core::attention::GatingMode;
use clarity_core::conditioning::PromptGranularity;
use clarity_core::moe::{MoeConfig, RouterMode};
use clarity_core::network::ModelConfig;
use clarity_core::train::TrainConfig;

use crate::error::CliError;

/// Attention prior selector; the hard-cut threshold lives in its own key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatingKind {
    None,
    Hard,
    Soft,
}

impl GatingKind {
    pub fn key(self) -> &'static str {
        match self {
            GatingKind::None => "none",
            GatingKind::Hard => "hard",
            GatingKind::Soft => "soft",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        match key {
            "none" => Some(GatingKind::None),
            "hard" => Some(GatingKind::Hard),
            "soft" => Some(GatingKind::Soft),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub synth_count: usize,
    pub synth_size: usize,
    pub synth_seed: u64,
    pub test_fraction: f64,
    pub channels: usize,
    pub decoder_channels: usize,
    pub experts: usize,
    pub top_k: usize,
    pub renormalize: bool,
    pub router: RouterMode,
    pub gating: GatingKind,
    pub hard_threshold: f64,
    pub lambda_init: f64,
    pub calibrator: bool,
    pub scene_embedding: bool,
    pub prompts: PromptGranularity,
    pub oracle_corruption: f64,
    pub text_dim: usize,
    pub embedding_seed: u64,
    pub attention_dim: usize,
    pub context_dim: usize,
    pub window: usize,
    pub decoder_stages: usize,
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hflip: bool,
    pub exclude_background: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            dataset: None,
            synth_count: 600,
            synth_size: 32,
            synth_seed: 5,
            test_fraction: 0.2,
            channels: 4,
            decoder_channels: 16,
            experts: m.moe.experts,
            top_k: m.moe.top_k,
            renormalize: m.moe.renormalize,
            router: m.moe.router,
            gating: GatingKind::Soft,
            hard_threshold: clarity_core::attention::DEFAULT_HARD_THRESHOLD,
            lambda_init: m.lambda_init,
            calibrator: m.calibrator,
            scene_embedding: m.scene_embedding,
            prompts: m.prompts,
            oracle_corruption: 0.0,
            text_dim: m.text_dim,
            embedding_seed: m.embedding_seed,
            attention_dim: m.attention_dim,
            context_dim: m.context_dim,
            window: m.window,
            decoder_stages: m.decoder_stages,
            beta: t.beta,
            gamma: t.gamma,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            hflip: t.hflip,
            exclude_background: false,
        }
    }
}

/// Every recognised key, in serialisation order.
pub const KEYS: [&str; 33] = [
    "dataset",
    "synth_count",
    "synth_size",
    "synth_seed",
    "test_fraction",
    "channels",
    "decoder_channels",
    "experts",
    "top_k",
    "renormalize",
    "router",
    "gating",
    "hard_threshold",
    "lambda_init",
    "calibrator",
    "scene_embedding",
    "prompts",
    "oracle_corruption",
    "text_dim",
    "embedding_seed",
    "attention_dim",
    "context_dim",
    "window",
    "decoder_stages",
    "beta",
    "gamma",
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "hflip",
    "exclude_background",
];

const BLOCK_START: &str = "[config]";
const BLOCK_END: &str = "[end config]";

fn bad(key: &str, value: &str, expected: &str) -> CliError {
    CliError::Usage(format!("config key `{key}`: cannot parse {value:?} as {expected}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad(key, value, expected))
}

fn parse_f64(key: &str, value: &str) -> Result<f64, CliError> {
    let v: f64 = parse_num(key, value, "a number")?;
    if !v.is_finite() {
        return Err(bad(key, value, "a finite number"));
    }
    Ok(v)
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

impl RunConfig {
    /// Parses a config file. A report file is accepted too: only its embedded
    /// config block is read.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let lines: Vec<&str> = text.lines().collect();
        let body: &[&str] = match lines.iter().position(|l| l.trim() == BLOCK_START) {
            Some(start) => {
                let rest = &lines[start + 1..];
                let end = rest
                    .iter()
                    .position(|l| l.trim() == BLOCK_END)
                    .ok_or_else(|| CliError::Usage("config block is not terminated".into()))?;
                &rest[..end]
            }
            None => &lines,
        };
        let mut cfg = RunConfig::default();
        for (n, raw) in body.iter().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`, got {line:?}", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "synth_count" => self.synth_count = parse_num(key, value, "a count")?,
            "synth_size" => self.synth_size = parse_num(key, value, "a size")?,
            "synth_seed" => self.synth_seed = parse_num(key, value, "a seed")?,
            "test_fraction" => self.test_fraction = parse_f64(key, value)?,
            "channels" => self.channels = parse_num(key, value, "a count")?,
            "decoder_channels" => self.decoder_channels = parse_num(key, value, "a count")?,
            "experts" => self.experts = parse_num(key, value, "a count")?,
            "top_k" => self.top_k = parse_num(key, value, "a count")?,
            "renormalize" => self.renormalize = parse_bool(key, value)?,
            "router" => {
                self.router = RouterMode::from_key(value).ok_or_else(|| bad(key, value, "static, random or condition"))?
            }
            "gating" => self.gating = GatingKind::from_key(value).ok_or_else(|| bad(key, value, "none, hard or soft"))?,
            "hard_threshold" => self.hard_threshold = parse_f64(key, value)?,
            "lambda_init" => self.lambda_init = parse_f64(key, value)?,
            "calibrator" => self.calibrator = parse_bool(key, value)?,
            "scene_embedding" => self.scene_embedding = parse_bool(key, value)?,
            "prompts" => {
                self.prompts =
                    PromptGranularity::from_key(value).ok_or_else(|| bad(key, value, "none, binary, ternary or five"))?
            }
            "oracle_corruption" => self.oracle_corruption = parse_f64(key, value)?,
            "text_dim" => self.text_dim = parse_num(key, value, "a count")?,
            "embedding_seed" => self.embedding_seed = parse_num(key, value, "a seed")?,
            "attention_dim" => self.attention_dim = parse_num(key, value, "a count")?,
            "context_dim" => self.context_dim = parse_num(key, value, "a count")?,
            "window" => self.window = parse_num(key, value, "an odd window")?,
            "decoder_stages" => self.decoder_stages = parse_num(key, value, "a count")?,
            "beta" => self.beta = parse_f64(key, value)?,
            "gamma" => self.gamma = parse_f64(key, value)?,
            "lr" => self.lr = parse_f64(key, value)?,
            "weight_decay" => self.weight_decay = parse_f64(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value, "a count")?,
            "epochs" => self.epochs = parse_num(key, value, "a count")?,
            "seed" => self.seed = parse_num(key, value, "a seed")?,
            "hflip" => self.hflip = parse_bool(key, value)?,
            "exclude_background" => self.exclude_background = parse_bool(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Textual value of `key` as it would be serialised.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "dataset" => self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "synth_count" => self.synth_count.to_string(),
            "synth_size" => self.synth_size.to_string(),
            "synth_seed" => self.synth_seed.to_string(),
            "test_fraction" => self.test_fraction.to_string(),
            "channels" => self.channels.to_string(),
            "decoder_channels" => self.decoder_channels.to_string(),
            "experts" => self.experts.to_string(),
            "top_k" => self.top_k.to_string(),
            "renormalize" => self.renormalize.to_string(),
            "router" => self.router.key().to_string(),
            "gating" => self.gating.key().to_string(),
            "hard_threshold" => self.hard_threshold.to_string(),
            "lambda_init" => self.lambda_init.to_string(),
            "calibrator" => self.calibrator.to_string(),
            "scene_embedding" => self.scene_embedding.to_string(),
            "prompts" => self.prompts.key().to_string(),
            "oracle_corruption" => self.oracle_corruption.to_string(),
            "text_dim" => self.text_dim.to_string(),
            "embedding_seed" => self.embedding_seed.to_string(),
            "attention_dim" => self.attention_dim.to_string(),
            "context_dim" => self.context_dim.to_string(),
            "window" => self.window.to_string(),
            "decoder_stages" => self.decoder_stages.to_string(),
            "beta" => self.beta.to_string(),
            "gamma" => self.gamma.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "hflip" => self.hflip.to_string(),
            "exclude_background" => self.exclude_background.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::Usage(msg));
        if self.channels == 0 || self.decoder_channels == 0 || self.batch_size == 0 || self.text_dim == 0 || self.attention_dim == 0 {
            return fail("channels, decoder_channels, batch_size, text_dim and attention_dim must be positive".into());
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return fail(format!("top_k = {} must lie in 1..={}", self.top_k, self.experts));
        }
        if self.synth_size != 32 && self.synth_size != 64 {
            return fail(format!("synth_size must be 32 or 64, got {}", self.synth_size));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return fail(format!("test_fraction {} outside [0,1)", self.test_fraction));
        }
        if !(0.0..=1.0).contains(&self.oracle_corruption) {
            return fail(format!("oracle_corruption {} outside [0,1]", self.oracle_corruption));
        }
        if self.window % 2 == 0 {
            return fail(format!("window must be odd, got {}", self.window));
        }
        if self.decoder_stages == 0 || self.decoder_stages > 4 {
            return fail(format!("decoder_stages must lie in 1..=4, got {}", self.decoder_stages));
        }
        if self.lr <= 0.0 || self.beta < 0.0 || self.gamma < 0.0 || self.weight_decay < 0.0 {
            return fail("lr must be positive; beta, gamma and weight_decay non-negative".into());
        }
        Ok(())
    }

    /// Keys whose serialised values differ.
    pub fn diff(&self, other: &RunConfig) -> Vec<&'static str> {
        KEYS.into_iter().filter(|k| self.get(k) != other.get(k)).collect()
    }

    pub fn gating_mode(&self) -> GatingMode {
        match self.gating {
            GatingKind::None => GatingMode::NoPrior,
            GatingKind::Hard => GatingMode::HardCut {
                threshold: self.hard_threshold,
            },
            GatingKind::Soft => GatingMode::SoftTanh,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            base_channels: self.channels,
            decoder_channels: self.decoder_channels,
            text_dim: self.text_dim,
            embedding_seed: self.embedding_seed,
            prompts: self.prompts,
            moe: MoeConfig {
                experts: self.experts,
                top_k: self.top_k,
                renormalize: self.renormalize,
                router: self.router,
            },
            scene_embedding: self.scene_embedding,
            context_dim: self.context_dim,
            gating: self.gating_mode(),
            lambda_init: self.lambda_init,
            attention_dim: self.attention_dim,
            window: self.window,
            calibrator: self.calibrator,
            decoder_stages: self.decoder_stages,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            beta: self.beta,
            gamma: self.gamma,
            hflip: self.hflip,
        }
    }

    /// The config wrapped in the block markers embedded in reports.
    pub fn to_block(&self) -> String {
        format!("{BLOCK_START}\n{self}{BLOCK_END}\n")
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in KEYS {
            writeln!(f, "{key} = {}", self.get(key).expect("known key"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.gating = GatingKind::Hard;
        cfg.prompts = PromptGranularity::Binary;
        cfg.dataset = Some(PathBuf::from("/data/x"));
        cfg.lr = 1.25e-3;
        assert_eq!(RunConfig::parse(&cfg.to_string()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&format!("junk\n{}tail\n", cfg.to_block())).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("epochs = 3\nlearning_rate = 0.1\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn bad_values_rejected() {
        for text in ["top_k = 9", "router = greedy", "hflip = yes", "synth_size = 48", "window = 4", "lr = nan"] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn every_key_serialised() {
        let text = RunConfig::default().to_string();
        assert_eq!(text.lines().count(), KEYS.len());
        let mut a = RunConfig::default();
        for key in KEYS {
            let v = a.get(key).unwrap();
            a.set(key, &v).unwrap();
        }
        assert_eq!(a, RunConfig::default());
    }

    #[test]
    fn diff_names_keys() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.router = RouterMode::Random;
        assert_eq!(a.diff(&b), vec!["router"]);
    }
}
