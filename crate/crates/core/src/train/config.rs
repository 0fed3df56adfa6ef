use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::losses::LossWeights;
use crate::model::{ModelConfig, Variant};

use super::adam::AdamConfig;

/// Largest supported step count (steps are stored exactly as f32 in checkpoints).
pub const MAX_STEPS: usize = 1 << 24;

/// Every recognized config key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("steps", "5000", "training iterations"),
    ("batch_size", "8", "items per step"),
    ("lr", "0.0002", "Adam learning rate"),
    ("adam_beta1", "0.5", "Adam first-moment decay"),
    ("adam_beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam denominator epsilon"),
    ("seed", "0", "seed for initialization and batch sampling"),
    ("variant", "full", "full | no_hae | no_csh"),
    ("data_dir", "", "dataset directory (required)"),
    ("out_dir", "", "output directory for checkpoints and loss log (required)"),
    ("n_style_refs", "4", "reference glyphs per style"),
    ("checkpoint_every", "500", "steps between checkpoints"),
    ("lambda_adv", "1", "adversarial weight"),
    ("lambda_l1", "10", "reconstruction weight"),
    ("lambda_style", "1", "style classification weight"),
    ("lambda_content", "1", "component classification weight"),
    ("lambda_csh", "1", "content-style homogeneity weight"),
    ("experts", "3", "number of experts k"),
    ("channels", "16", "feature channels per expert"),
    ("blocks_per_expert", "2", "encoder blocks per expert"),
    ("pool", "2", "key/value pooling factor of the spatial attention"),
    ("ffn_mult", "2", "feed-forward width multiplier"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    pub variant: Variant,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub n_style_refs: usize,
    pub checkpoint_every: usize,
    pub experts: usize,
    pub channels: usize,
    pub blocks_per_expert: usize,
    pub pool: usize,
    pub ffn_mult: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut cfg = TrainConfig {
            steps: 0,
            batch_size: 0,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            variant: Variant::Full,
            data_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            n_style_refs: 0,
            checkpoint_every: 0,
            experts: 0,
            channels: 0,
            blocks_per_expert: 0,
            pool: 0,
            ffn_mult: 0,
        };
        for (k, v, _) in KEYS {
            if !v.is_empty() {
                cfg.set(k, v).expect("default values parse");
            }
        }
        cfg
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    /// Assign one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "n_style_refs" => self.n_style_refs = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "lambda_adv" => self.weights.adv = parse(key, value)?,
            "lambda_l1" => self.weights.l1 = parse(key, value)?,
            "lambda_style" => self.weights.style = parse(key, value)?,
            "lambda_content" => self.weights.content = parse(key, value)?,
            "lambda_csh" => self.weights.csh = parse(key, value)?,
            "experts" => self.experts = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "blocks_per_expert" => self.blocks_per_expert = parse(key, value)?,
            "pool" => self.pool = parse(key, value)?,
            "ffn_mult" => self.ffn_mult = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let a = &self.adam;
        let w = &self.weights;
        let rows: Vec<(&str, String)> = vec![
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", a.lr.to_string()),
            ("adam_beta1", a.beta1.to_string()),
            ("adam_beta2", a.beta2.to_string()),
            ("adam_eps", a.eps.to_string()),
            ("seed", self.seed.to_string()),
            ("variant", self.variant.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("n_style_refs", self.n_style_refs.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("lambda_adv", w.adv.to_string()),
            ("lambda_l1", w.l1.to_string()),
            ("lambda_style", w.style.to_string()),
            ("lambda_content", w.content.to_string()),
            ("lambda_csh", w.csh.to_string()),
            ("experts", self.experts.to_string()),
            ("channels", self.channels.to_string()),
            ("blocks_per_expert", self.blocks_per_expert.to_string()),
            ("pool", self.pool.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Loss weights actually used: `no_csh` forces the homogeneity weight to zero.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.variant == Variant::NoCsh {
            w.csh = 0.0;
        }
        w
    }

    pub fn model_config(&self, n_train_fonts: usize) -> ModelConfig {
        ModelConfig {
            k: self.experts,
            c_bar: self.channels,
            blocks_per_expert: self.blocks_per_expert,
            pool: self.pool,
            ffn_mult: self.ffn_mult,
            n_train_fonts,
            variant: self.variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps > MAX_STEPS {
            return Err(Error::Config(format!("steps must be in 1..={MAX_STEPS}, got {}", self.steps)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.n_style_refs == 0 {
            return Err(Error::Config("n_style_refs must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config("Adam needs lr > 0 and betas in [0, 1)".into()));
        }
        if a.eps.is_nan() || a.eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        let w = &self.weights;
        if [w.adv, w.l1, w.style, w.content, w.csh].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.data_dir.as_os_str().is_empty() {
            return Err(Error::Config("data_dir is required".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir is required".into()));
        }
        self.model_config(1).validate()
    }
}
