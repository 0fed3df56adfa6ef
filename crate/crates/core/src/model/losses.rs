use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Weights of the generator objective terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub l1: f64,
    pub style: f64,
    pub content: f64,
    pub csh: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { adv: 1.0, l1: 10.0, style: 1.0, content: 1.0, csh: 1.0 }
    }
}

/// Unweighted generator-side loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub adv_g: f64,
    pub recon_l1: f64,
    pub style_ce: f64,
    pub content_ce: f64,
    pub csh: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub adv_g: f64,
    pub adv_d: f64,
    pub recon_l1: f64,
    pub style_ce: f64,
    pub content_ce: f64,
    pub csh: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub const FIELDS: [&'static str; 7] = ["adv_g", "adv_d", "recon_l1", "style_ce", "content_ce", "csh", "total"];

    pub fn values(&self) -> [f64; 7] {
        [self.adv_g, self.adv_d, self.recon_l1, self.style_ce, self.content_ce, self.csh, self.total]
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, v)) in Self::FIELDS.iter().zip(self.values()).enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{name}={v:.4}")?;
        }
        Ok(())
    }
}

/// Weighted generator objective with its components. `adv_d` is carried
/// along for reporting and is not part of the total.
pub fn total_loss(parts: LossParts, adv_d: f64, weights: LossWeights) -> Result<LossReport> {
    let named = [
        ("adv_g", parts.adv_g),
        ("adv_d", adv_d),
        ("recon_l1", parts.recon_l1),
        ("style_ce", parts.style_ce),
        ("content_ce", parts.content_ce),
        ("csh", parts.csh),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { op: format!("loss term {name}") });
    }
    let total = weights.adv * parts.adv_g
        + weights.l1 * parts.recon_l1
        + weights.style * parts.style_ce
        + weights.content * parts.content_ce
        + weights.csh * parts.csh;
    Ok(LossReport {
        adv_g: parts.adv_g,
        adv_d,
        recon_l1: parts.recon_l1,
        style_ce: parts.style_ce,
        content_ce: parts.content_ce,
        csh: parts.csh,
        total,
        weights,
    })
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let s = tape.add_all(vars)?;
    tape.scale(s, 1.0 / vars.len() as f64)
}

/// `mean(relu(1 − D(real)) + relu(1 + D(fake)))`
pub fn d_hinge<T: Scalar>(tape: &mut Tape<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::dim("d_hinge", "need matching non-empty real/fake score lists"));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (&r, &f) in real.iter().zip(fake) {
        let r = tape.scale(r, -1.0)?;
        let r = tape.add_scalar(r, 1.0)?;
        let r = tape.relu(r)?;
        let f = tape.add_scalar(f, 1.0)?;
        let f = tape.relu(f)?;
        terms.push(tape.add(r, f)?);
    }
    mean_of(tape, &terms)
}

/// `−mean(D(fake))`
pub fn g_adversarial<T: Scalar>(tape: &mut Tape<T>, fake: &[Var]) -> Result<Var> {
    let m = mean_of(tape, fake)?;
    tape.scale(m, -1.0)
}

/// Mean absolute pixel difference.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}
