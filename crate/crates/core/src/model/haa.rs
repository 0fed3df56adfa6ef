//! Dual-branch attention (spatial + channel) and the pre-norm encoder block
//! built around it.
//!
//! Feature maps are `[C×H×W]`. The spatial branch treats each of the `H·W`
//! positions as a token with `C/2` features and attends to keys/values taken
//! from an `s×s` mean-pooled copy of its input. The channel branch treats each
//! of its `C/2` channels as a token of length `H·W`.

use super::params::Bound;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HaaConfig {
    pub c_bar: usize,
    pub h_bar: usize,
    pub w_bar: usize,
    /// Pooling factor for spatial keys and values.
    pub s: usize,
    pub ffn_mult: usize,
}

impl HaaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_bar == 0 || !self.c_bar.is_multiple_of(2) {
            return Err(Error::Config(format!("channel count {} must be even and positive", self.c_bar)));
        }
        if self.s == 0 || !self.h_bar.is_multiple_of(self.s) || !self.w_bar.is_multiple_of(self.s) {
            return Err(Error::Config(format!("pool factor {} must divide {}×{}", self.s, self.h_bar, self.w_bar)));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be at least 1".into()));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.c_bar / 2
    }

    pub fn tokens(&self) -> usize {
        self.h_bar * self.w_bar
    }

    pub fn pooled_tokens(&self) -> usize {
        self.tokens() / (self.s * self.s)
    }

    /// Names and shapes of one block's tensors, relative to its prefix.
    pub fn block_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, h) = (self.c_bar, self.half());
        let f = self.ffn_mult * c;
        vec![
            ("ln1.g", vec![c]),
            ("ln1.b", vec![c]),
            ("ln2.g", vec![c]),
            ("ln2.b", vec![c]),
            ("spat.q", vec![h, h]),
            ("spat.k", vec![h, h]),
            ("spat.v", vec![h, h]),
            ("spat.o", vec![h, h]),
            ("chan.q", vec![h, h]),
            ("chan.k", vec![h, h]),
            ("chan.v", vec![h, h]),
            ("chan.o", vec![h, h]),
            ("ffn.w1", vec![f, c]),
            ("ffn.b1", vec![f]),
            ("ffn.w2", vec![c, f]),
            ("ffn.b2", vec![c]),
        ]
    }
}

/// Query/key/value/output projections of one branch, each `[C/2 × C/2]`.
#[derive(Clone, Copy, Debug)]
pub struct BranchParams {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

impl BranchParams {
    pub fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        Ok(BranchParams {
            q: b.get(&format!("{prefix}.q"))?,
            k: b.get(&format!("{prefix}.k"))?,
            v: b.get(&format!("{prefix}.v"))?,
            o: b.get(&format!("{prefix}.o"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HaeBlockParams {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub spatial: BranchParams,
    pub channel: BranchParams,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

impl HaeBlockParams {
    pub fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        let g = |n: &str| b.get(&format!("{prefix}.{n}"));
        Ok(HaeBlockParams {
            ln1_g: g("ln1.g")?,
            ln1_b: g("ln1.b")?,
            ln2_g: g("ln2.g")?,
            ln2_b: g("ln2.b")?,
            spatial: BranchParams::bind(b, &format!("{prefix}.spat"))?,
            channel: BranchParams::bind(b, &format!("{prefix}.chan"))?,
            ffn_w1: g("ffn.w1")?,
            ffn_b1: g("ffn.b1")?,
            ffn_w2: g("ffn.w2")?,
            ffn_b2: g("ffn.b2")?,
        })
    }
}

/// Branch output together with its attention map.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub out: Var,
    pub attn: Var,
}

fn check_branch_input<T: Scalar>(tape: &Tape<T>, op: &'static str, z: Var, cfg: &HaaConfig) -> Result<()> {
    let want = [cfg.half(), cfg.h_bar, cfg.w_bar];
    if tape.shape(z) != want {
        return Err(Error::dim(op, format!("expected {want:?}, got {:?}", tape.shape(z))));
    }
    Ok(())
}

/// Self-attention across channels: `A_c` is `[C/2 × C/2]`.
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<T>,
    z_c: Var,
    p: &BranchParams,
    cfg: &HaaConfig,
) -> Result<Attended> {
    check_branch_input(tape, "channel_attention", z_c, cfg)?;
    let (h, n) = (cfg.half(), cfg.tokens());
    let x = tape.reshape(z_c, &[h, n])?;
    let q = tape.matmul(p.q, x)?;
    let k = tape.matmul(p.k, x)?;
    let v = tape.matmul(p.v, x)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (n as f64).sqrt())?;
    let attn = tape.softmax(logits, 1)?;
    let mixed = tape.matmul(attn, v)?;
    let out = tape.matmul(p.o, mixed)?;
    let out = tape.reshape(out, &[h, cfg.h_bar, cfg.w_bar])?;
    Ok(Attended { out, attn })
}

/// Self-attention across positions with pooled keys and values:
/// `A_s` is `[H·W × H·W/s²]`.
pub fn spatial_attention<T: Scalar>(
    tape: &mut Tape<T>,
    z_s: Var,
    p: &BranchParams,
    cfg: &HaaConfig,
) -> Result<Attended> {
    check_branch_input(tape, "spatial_attention", z_s, cfg)?;
    let (h, n, m) = (cfg.half(), cfg.tokens(), cfg.pooled_tokens());
    let x = tape.reshape(z_s, &[h, n])?;
    let pooled = tape.avg_pool2d(z_s, cfg.s)?;
    let pooled = tape.reshape(pooled, &[h, m])?;
    let q = tape.matmul(p.q, x)?;
    let k = tape.matmul(p.k, pooled)?;
    let v = tape.matmul(p.v, pooled)?;
    let qt = tape.transpose(q)?;
    let logits = tape.matmul(qt, k)?;
    let logits = tape.scale(logits, 1.0 / (h as f64).sqrt())?;
    let attn = tape.softmax(logits, 1)?;
    let at = tape.transpose(attn)?;
    let mixed = tape.matmul(v, at)?;
    let out = tape.matmul(p.o, mixed)?;
    let out = tape.reshape(out, &[h, cfg.h_bar, cfg.w_bar])?;
    Ok(Attended { out, attn })
}

/// Chunk into (spatial, channel) halves, attend, and concatenate in that order.
pub fn haa_forward<T: Scalar>(tape: &mut Tape<T>, z: Var, p: &HaeBlockParams, cfg: &HaaConfig) -> Result<Var> {
    let (z_s, z_c) = tape.chunk_channels(z)?;
    let s = spatial_attention(tape, z_s, &p.spatial, cfg)?;
    let c = channel_attention(tape, z_c, &p.channel, cfg)?;
    tape.concat_channels(&[s.out, c.out])
}

/// Layer norm over channels at every position of a `[C×H×W]` map.
fn norm_channels<T: Scalar>(tape: &mut Tape<T>, z: Var, g: Var, b: Var, cfg: &HaaConfig) -> Result<Var> {
    let x = tape.reshape(z, &[cfg.c_bar, cfg.tokens()])?;
    let xt = tape.transpose(x)?;
    let y = tape.layer_norm(xt, g, b, LN_EPS)?;
    let y = tape.transpose(y)?;
    tape.reshape(y, &[cfg.c_bar, cfg.h_bar, cfg.w_bar])
}

/// Position-wise two-layer perceptron with a GELU in between.
fn ffn<T: Scalar>(tape: &mut Tape<T>, z: Var, p: &HaeBlockParams, cfg: &HaaConfig) -> Result<Var> {
    let x = tape.reshape(z, &[cfg.c_bar, cfg.tokens()])?;
    let h = tape.matmul(p.ffn_w1, x)?;
    let h = tape.add_channel_bias(h, p.ffn_b1)?;
    let h = tape.gelu(h)?;
    let y = tape.matmul(p.ffn_w2, h)?;
    let y = tape.add_channel_bias(y, p.ffn_b2)?;
    tape.reshape(y, &[cfg.c_bar, cfg.h_bar, cfg.w_bar])
}

/// `z' = z + HAA(LN(z))`, then `f = z' + FFN(LN(z'))`.
pub fn hae_block_forward<T: Scalar>(tape: &mut Tape<T>, z: Var, p: &HaeBlockParams, cfg: &HaaConfig) -> Result<Var> {
    let want = [cfg.c_bar, cfg.h_bar, cfg.w_bar];
    if tape.shape(z) != want {
        return Err(Error::dim("hae_block", format!("expected {want:?}, got {:?}", tape.shape(z))));
    }
    let n1 = norm_channels(tape, z, p.ln1_g, p.ln1_b, cfg)?;
    let a = haa_forward(tape, n1, p, cfg)?;
    let z1 = tape.add(z, a)?;
    let n2 = norm_channels(tape, z1, p.ln2_g, p.ln2_b, cfg)?;
    let f = ffn(tape, n2, p, cfg)?;
    tape.add(z1, f)
}
