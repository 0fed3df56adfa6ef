//! Network definition: attention blocks, expert encoder, classifiers,
//! generator, discriminator and losses.

pub mod assignment;
pub mod encoder;
pub mod haa;
pub mod heads;
pub mod losses;
pub mod params;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::glyph::{IMAGE_SIZE, NUM_COMPONENTS};
use crate::tensor::Tensor;

pub use encoder::{encode, mean_bundles, pool_content, pool_style, stem_forward, ExpertBundle};
pub use haa::HaaConfig;
pub use params::{Bound, ParamStore};

/// Stem output resolution for a 32×32 glyph (two stride-2 convolutions).
pub const FEATURE_SIZE: usize = IMAGE_SIZE / 4;
pub const STEM_CHANNELS: usize = 8;
pub const GEN_CHANNELS: usize = 8;
pub const DISC_CHANNELS: [usize; 3] = [8, 16, 32];
/// Component classes plus the null label.
pub const CONTENT_CLASSES: usize = NUM_COMPONENTS + 1;
pub const NULL_COMPONENT: usize = NUM_COMPONENTS;

/// Ablation variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Each attention block replaced by a 3×3 convolution + GELU.
    NoHae,
    /// Homogeneity loss weight forced to zero.
    NoCsh,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoHae, Variant::NoCsh];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoHae => "no_hae",
            Variant::NoCsh => "no_csh",
        }
    }

    pub fn uses_attention(self) -> bool {
        self != Variant::NoHae
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected full, no_hae or no_csh)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub k: usize,
    pub c_bar: usize,
    pub blocks_per_expert: usize,
    pub pool: usize,
    pub ffn_mult: usize,
    pub n_train_fonts: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 3,
            c_bar: 16,
            blocks_per_expert: 2,
            pool: 2,
            ffn_mult: 2,
            n_train_fonts: 12,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn haa(&self) -> HaaConfig {
        HaaConfig { c_bar: self.c_bar, h_bar: FEATURE_SIZE, w_bar: FEATURE_SIZE, s: self.pool, ffn_mult: self.ffn_mult }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("expert count k={} must be at least 2", self.k)));
        }
        if self.blocks_per_expert == 0 {
            return Err(Error::Config("blocks_per_expert must be at least 1".into()));
        }
        if self.n_train_fonts == 0 {
            return Err(Error::Config("at least one training font is required".into()));
        }
        self.haa().validate()
    }

    pub fn to_text(&self) -> String {
        format!(
            "k = {}\nc_bar = {}\nblocks_per_expert = {}\npool = {}\nffn_mult = {}\nn_train_fonts = {}\nvariant = {}\n",
            self.k, self.c_bar, self.blocks_per_expert, self.pool, self.ffn_mult, self.n_train_fonts, self.variant
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("bad model line {line:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let num = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("model description lacks {k}")))?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {k}")))
        };
        let cfg = ModelConfig {
            k: num("k")?,
            c_bar: num("c_bar")?,
            blocks_per_expert: num("blocks_per_expert")?,
            pool: num("pool")?,
            ffn_mult: num("ffn_mult")?,
            n_train_fonts: num("n_train_fonts")?,
            variant: kv
                .get("variant")
                .ok_or_else(|| Error::Format("model description lacks variant".into()))?
                .parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn expert_prefix(i: usize) -> String {
        format!("enc.expert{i}")
    }

    pub fn block_prefix(i: usize, j: usize) -> String {
        format!("enc.expert{i}.block{j}")
    }
}

/// Freshly initialized weights for every component of the model.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let c = cfg.c_bar;
    let conv = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_out: usize, c_in: usize, k: usize| {
        p.insert(format!("{name}.w"), params::normal(rng, &[c_out, c_in, k, k], c_in * k * k));
        p.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
    };

    conv(&mut p, &mut rng, "enc.stem.conv1", STEM_CHANNELS, 1, 3);
    conv(&mut p, &mut rng, "enc.stem.conv2", c, STEM_CHANNELS, 3);

    let haa = cfg.haa();
    for i in 0..cfg.k {
        for j in 0..cfg.blocks_per_expert {
            let prefix = ModelConfig::block_prefix(i, j);
            if cfg.variant.uses_attention() {
                for (name, shape) in haa.block_shapes() {
                    let full = format!("{prefix}.{name}");
                    let t = match name {
                        "ln1.g" | "ln2.g" => Tensor::full(&shape, 1.0),
                        n if n.starts_with("ln") || n.starts_with("ffn.b") => Tensor::zeros(&shape),
                        _ => params::normal(&mut rng, &shape, shape[1]),
                    };
                    p.insert(full, t);
                }
            } else {
                conv(&mut p, &mut rng, &format!("{prefix}.conv"), c, c, 3);
            }
        }
        let e = ModelConfig::expert_prefix(i);
        p.insert(format!("{e}.head_c"), params::normal(&mut rng, &[c, c], c));
        p.insert(format!("{e}.head_s"), params::normal(&mut rng, &[c, c], c));
    }

    let kc = cfg.k * c;
    p.insert("cls.style.w", params::normal(&mut rng, &[cfg.n_train_fonts, kc], kc));
    p.insert("cls.style.b", Tensor::zeros(&[cfg.n_train_fonts]));
    p.insert("cls.content.w", params::normal(&mut rng, &[CONTENT_CLASSES, c], c));
    p.insert("cls.content.b", Tensor::zeros(&[CONTENT_CLASSES]));

    p.insert("gen.fuse.w", params::normal(&mut rng, &[c, 2 * kc], 2 * kc));
    p.insert("gen.fuse.b", Tensor::zeros(&[c]));
    conv(&mut p, &mut rng, "gen.up1", GEN_CHANNELS, c, 3);
    conv(&mut p, &mut rng, "gen.up2", 1, GEN_CHANNELS, 3);

    let [d1, d2, d3] = DISC_CHANNELS;
    conv(&mut p, &mut rng, "disc.conv1", d1, 1, 3);
    conv(&mut p, &mut rng, "disc.conv2", d2, d1, 3);
    conv(&mut p, &mut rng, "disc.conv3", d3, d2, 3);
    conv(&mut p, &mut rng, "disc.patch", 1, d3, 1);
    p.insert("disc.embed", params::normal(&mut rng, &[cfg.n_train_fonts, d3], d3));
    Ok(p)
}

/// Whether a parameter belongs to the discriminator.
pub fn is_discriminator(name: &str) -> bool {
    name.starts_with("disc.")
}

/// Whether a parameter lives inside an attention block.
pub fn is_attention(name: &str) -> bool {
    name.contains(".spat.") || name.contains(".chan.")
}


#[cfg(test)]
mod config_tests {
    use super::*;

    #[test]
    fn config_text_round_trip() {
        let cfg = ModelConfig { variant: Variant::NoHae, n_train_fonts: 7, ..Default::default() };
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_single_expert() {
        let cfg = ModelConfig { k: 1, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(init_params(&cfg, 0).is_err());
    }

    #[test]
    fn variants_parse() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("half".parse::<Variant>().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        assert_eq!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 3).unwrap());
        assert_ne!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 4).unwrap());
    }
}
