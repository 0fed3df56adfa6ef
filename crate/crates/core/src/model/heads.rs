//! Classifiers, component matching, homogeneity loss, generator and
//! discriminator.

use std::collections::BTreeSet;

use super::assignment::min_cost_assignment;
use super::encoder::{conv_layer, ExpertBundle};
use super::params::Bound;
use super::{ModelConfig, CONTENT_CLASSES, FEATURE_SIZE, NULL_COMPONENT};
use crate::error::{Error, Result};
use crate::glyph::ComponentId;
use crate::tensor::{Scalar, Tape, Var};

/// Norm below which the homogeneity loss is treated as undefined.
pub const CSH_MIN_NORM: f64 = 1e-8;

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, b: &Bound, name: &str, width: usize) -> Result<Var> {
    if tape.shape(x) != [width] {
        return Err(Error::dim("classifier", format!("expected a length-{width} vector, got {:?}", tape.shape(x))));
    }
    let w = b.get(&format!("{name}.w"))?;
    let col = tape.reshape(x, &[width, 1])?;
    let y = tape.matmul(w, col)?;
    let n = tape.shape(y)[0];
    let y = tape.reshape(y, &[n])?;
    tape.add(y, b.get(&format!("{name}.b"))?)
}

/// Font logits from a pooled `[k·C̄]` style vector.
pub fn style_classify<T: Scalar>(tape: &mut Tape<T>, f_s: Var, b: &Bound, cfg: &ModelConfig) -> Result<Var> {
    linear(tape, f_s, b, "cls.style", cfg.k * cfg.c_bar)
}

/// Component logits (`P` components + null) from one expert's pooled `[C̄]` content vector.
pub fn content_classify<T: Scalar>(tape: &mut Tape<T>, f_c: Var, b: &Bound, cfg: &ModelConfig) -> Result<Var> {
    linear(tape, f_c, b, "cls.content", cfg.c_bar)
}

/// Softmax cross-entropy of rank-1 `logits` against class `target`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: usize) -> Result<Var> {
    let logp = tape.log_softmax(logits, 0)?;
    let picked = tape.gather(logp, &[target])?;
    let picked = tape.reshape(picked, &[])?;
    tape.scale(picked, -1.0)
}

/// Outcome of matching expert predictions to ground-truth components.
#[derive(Clone, Debug)]
pub struct Matching {
    /// `labels[i]` is the component (or [`NULL_COMPONENT`]) assigned to expert `i`.
    pub labels: Vec<usize>,
    /// Mean cross-entropy of the optimal assignment.
    pub loss: Var,
}

/// Ground-truth labels padded with the null class to `k` entries.
pub fn padded_labels(comp_gt: &BTreeSet<ComponentId>, k: usize) -> Result<Vec<usize>> {
    if comp_gt.len() > k {
        return Err(Error::Config(format!("character has {} components but only {k} experts", comp_gt.len())));
    }
    let mut labels: Vec<usize> = comp_gt.iter().map(|c| c.index()).collect();
    labels.resize(k, NULL_COMPONENT);
    Ok(labels)
}

/// Assign each expert to one padded ground-truth label so that the summed
/// cross-entropy is minimal; the loss is that minimum divided by `k`.
pub fn match_components<T: Scalar>(
    tape: &mut Tape<T>,
    per_expert_logits: &[Var],
    comp_gt: &BTreeSet<ComponentId>,
) -> Result<Matching> {
    let k = per_expert_logits.len();
    let labels = padded_labels(comp_gt, k)?;
    let logps = per_expert_logits
        .iter()
        .map(|&l| {
            if tape.shape(l) != [CONTENT_CLASSES] {
                return Err(Error::dim("match_components", format!("logits {:?}", tape.shape(l))));
            }
            tape.log_softmax(l, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    let cost: Vec<Vec<f64>> = logps
        .iter()
        .map(|&lp| {
            let v = tape.value(lp).data();
            labels.iter().map(|&c| -v[c].as_f64()).collect()
        })
        .collect();
    let assign = min_cost_assignment(&cost);
    let assigned: Vec<usize> = assign.iter().map(|&j| labels[j]).collect();

    let stacked = tape.concat_channels(&logps)?;
    let idx: Vec<usize> = assigned.iter().enumerate().map(|(i, &c)| i * CONTENT_CLASSES + c).collect();
    let picked = tape.gather(stacked, &idx)?;
    let total = tape.sum(picked)?;
    let loss = tape.scale(total, -1.0 / k as f64)?;
    Ok(Matching { labels: assigned, loss })
}

/// `(cos(f_s, f_c) + 1) / 2`. Degenerate (near-zero) inputs yield a constant 0.5.
pub fn csh_loss<T: Scalar>(tape: &mut Tape<T>, f_s: Var, f_c: Var) -> Result<Var> {
    if tape.shape(f_s) != tape.shape(f_c) {
        return Err(Error::dim("csh_loss", format!("{:?} vs {:?}", tape.shape(f_s), tape.shape(f_c))));
    }
    let norm = |t: &Tape<T>, v: Var| t.value(v).data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm(tape, f_s) < CSH_MIN_NORM || norm(tape, f_c) < CSH_MIN_NORM {
        return tape.constant(crate::tensor::Tensor::scalar(T::of(0.5)));
    }
    let prod = tape.mul(f_s, f_c)?;
    let dot = tape.sum(prod)?;
    let ss = tape.mul(f_s, f_s)?;
    let ss = tape.sum(ss)?;
    let ns = tape.sqrt(ss)?;
    let cc = tape.mul(f_c, f_c)?;
    let cc = tape.sum(cc)?;
    let nc = tape.sqrt(cc)?;
    let denom = tape.mul(ns, nc)?;
    let cos = tape.div(dot, denom)?;
    let shifted = tape.add_scalar(cos, 1.0)?;
    tape.scale(shifted, 0.5)
}

/// Decode style features of one glyph and content features of another into a
/// `[1×32×32]` image in `[0,1]`.
///
/// Per expert the style and content maps are stacked `(f_s, f_c)`, the `k`
/// stacks are concatenated, fused by a 1×1 map and upsampled twice.
pub fn generate<T: Scalar>(
    tape: &mut Tape<T>,
    content: &[ExpertBundle],
    style: &[ExpertBundle],
    b: &Bound,
    cfg: &ModelConfig,
) -> Result<Var> {
    if content.len() != cfg.k || style.len() != cfg.k {
        return Err(Error::dim(
            "generate",
            format!("expected {} bundles, got {} content / {} style", cfg.k, content.len(), style.len()),
        ));
    }
    let mut parts = Vec::with_capacity(2 * cfg.k);
    for (c, s) in content.iter().zip(style) {
        parts.push(s.f_s);
        parts.push(c.f_c);
    }
    let stacked = tape.concat_channels(&parts)?;
    let n = FEATURE_SIZE * FEATURE_SIZE;
    let x = tape.reshape(stacked, &[2 * cfg.k * cfg.c_bar, n])?;
    let h = tape.matmul(b.get("gen.fuse.w")?, x)?;
    let h = tape.add_channel_bias(h, b.get("gen.fuse.b")?)?;
    let h = tape.gelu(h)?;
    let h = tape.reshape(h, &[cfg.c_bar, FEATURE_SIZE, FEATURE_SIZE])?;
    let h = tape.upsample(h, 2)?;
    let h = conv_layer(tape, h, b, "gen.up1", 1, 1)?;
    let h = tape.gelu(h)?;
    let h = tape.upsample(h, 2)?;
    let h = conv_layer(tape, h, b, "gen.up2", 1, 1)?;
    tape.sigmoid(h)
}

/// Conditional realness score: mean patch realness plus the projection of
/// the pooled trunk feature onto the font embedding.
pub fn discriminate<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    font_id: usize,
    b: &Bound,
    cfg: &ModelConfig,
) -> Result<Var> {
    if font_id >= cfg.n_train_fonts {
        return Err(Error::UnknownId { kind: "training font", id: font_id });
    }
    let mut h = image;
    for name in ["disc.conv1", "disc.conv2", "disc.conv3"] {
        h = conv_layer(tape, h, b, name, 2, 1)?;
        h = tape.gelu(h)?;
    }
    let patch = conv_layer(tape, h, b, "disc.patch", 1, 0)?;
    let realness = tape.mean(patch)?;
    let pooled = tape.mean_inner(h)?;
    let emb = tape.select_row(b.get("disc.embed")?, font_id)?;
    let proj = tape.mul(emb, pooled)?;
    let proj = tape.sum(proj)?;
    tape.add(realness, proj)
}
