//! Shared convolutional stem followed by `k` independent experts, each with
//! its own content and style projection heads.

use super::haa::{hae_block_forward, HaeBlockParams};
use super::params::Bound;
use super::{ModelConfig, FEATURE_SIZE};
use crate::error::{Error, Result};
use crate::glyph::IMAGE_SIZE;
use crate::tensor::{Scalar, Tape, Var};

/// Per-expert features of one image, each `[C̄×H̄×W̄]`.
#[derive(Clone, Copy, Debug)]
pub struct ExpertBundle {
    pub f: Var,
    pub f_c: Var,
    pub f_s: Var,
}

pub(crate) fn conv_layer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    b: &Bound,
    name: &str,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let y = tape.conv2d(x, b.get(&format!("{name}.w"))?, stride, pad)?;
    tape.add_channel_bias(y, b.get(&format!("{name}.b"))?)
}

/// Two stride-2 3×3 convolutions with GELU: `[1×32×32] → [C̄×8×8]`.
pub fn stem_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, b: &Bound) -> Result<Var> {
    if tape.shape(x) != [1, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::dim("stem", format!("expected [1, {IMAGE_SIZE}, {IMAGE_SIZE}], got {:?}", tape.shape(x))));
    }
    let h = conv_layer(tape, x, b, "enc.stem.conv1", 2, 1)?;
    let h = tape.gelu(h)?;
    let h = conv_layer(tape, h, b, "enc.stem.conv2", 2, 1)?;
    tape.gelu(h)
}

/// 1×1 channel-linear map `W·f` over a `[C×H×W]` map.
fn head<T: Scalar>(tape: &mut Tape<T>, w: Var, f: Var, cfg: &ModelConfig) -> Result<Var> {
    let x = tape.reshape(f, &[cfg.c_bar, FEATURE_SIZE * FEATURE_SIZE])?;
    let y = tape.matmul(w, x)?;
    tape.reshape(y, &[cfg.c_bar, FEATURE_SIZE, FEATURE_SIZE])
}

fn expert_forward<T: Scalar>(tape: &mut Tape<T>, z: Var, b: &Bound, cfg: &ModelConfig, i: usize) -> Result<Var> {
    let haa = cfg.haa();
    let mut h = z;
    for j in 0..cfg.blocks_per_expert {
        let prefix = ModelConfig::block_prefix(i, j);
        h = if cfg.variant.uses_attention() {
            let p = HaeBlockParams::bind(b, &prefix)?;
            hae_block_forward(tape, h, &p, &haa)?
        } else {
            let y = conv_layer(tape, h, b, &format!("{prefix}.conv"), 1, 1)?;
            tape.gelu(y)?
        };
    }
    Ok(h)
}

/// Encode one image with every expert. The stem runs once and is shared.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, x: Var, b: &Bound, cfg: &ModelConfig) -> Result<Vec<ExpertBundle>> {
    let z = stem_forward(tape, x, b)?;
    (0..cfg.k)
        .map(|i| {
            let f = expert_forward(tape, z, b, cfg, i)?;
            let e = ModelConfig::expert_prefix(i);
            let f_c = head(tape, b.get(&format!("{e}.head_c"))?, f, cfg)?;
            let f_s = head(tape, b.get(&format!("{e}.head_s"))?, f, cfg)?;
            Ok(ExpertBundle { f, f_c, f_s })
        })
        .collect()
}

/// Spatial mean of each selected map, concatenated in expert order.
fn pool<T: Scalar>(tape: &mut Tape<T>, maps: impl Iterator<Item = Var>) -> Result<Var> {
    let parts = maps.map(|m| tape.mean_inner(m)).collect::<Result<Vec<_>>>()?;
    tape.concat_channels(&parts)
}

/// `[k·C̄]` style vector.
pub fn pool_style<T: Scalar>(tape: &mut Tape<T>, bundles: &[ExpertBundle]) -> Result<Var> {
    pool(tape, bundles.iter().map(|b| b.f_s))
}

/// `[k·C̄]` content vector.
pub fn pool_content<T: Scalar>(tape: &mut Tape<T>, bundles: &[ExpertBundle]) -> Result<Var> {
    pool(tape, bundles.iter().map(|b| b.f_c))
}

/// Element-wise mean of several images' bundles, expert by expert.
pub fn mean_bundles<T: Scalar>(tape: &mut Tape<T>, refs: &[Vec<ExpertBundle>]) -> Result<Vec<ExpertBundle>> {
    let first = refs.first().ok_or_else(|| Error::Config("at least one reference glyph is required".into()))?;
    if refs.len() == 1 {
        return Ok(first.clone());
    }
    let inv = 1.0 / refs.len() as f64;
    let k = first.len();
    if refs.iter().any(|r| r.len() != k) {
        return Err(Error::dim("mean_bundles", "reference bundles have different expert counts"));
    }
    let avg = |pick: fn(&ExpertBundle) -> Var, i: usize, tape: &mut Tape<T>| -> Result<Var> {
        let parts: Vec<Var> = refs.iter().map(|r| pick(&r[i])).collect();
        let s = tape.add_all(&parts)?;
        tape.scale(s, inv)
    };
    (0..k)
        .map(|i| {
            Ok(ExpertBundle { f: avg(|b| b.f, i, tape)?, f_c: avg(|b| b.f_c, i, tape)?, f_s: avg(|b| b.f_s, i, tape)? })
        })
        .collect()
}
