//! Central-difference verification of tape gradients (64-bit only).

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so that vanishing gradients
/// are judged on absolute error instead of blowing up.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many coordinates per parameter block (all when `None`).
    pub max_per_block: Option<usize>,
    pub seed: u64,
    pub sabotage: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, tol: 1e-4, max_per_block: None, seed: 0, sabotage: None }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub tol: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err < self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(move |b| b.max_rel_err >= self.tol)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            let mark = if b.max_rel_err < self.tol { "ok  " } else { "FAIL" };
            writeln!(f, "{mark} {:<40} n={:<5} max_rel_err={:.3e}", b.name, b.checked, b.max_rel_err)?;
        }
        Ok(())
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[(String, Tensor<f64>)], sabotage: Option<OpKind>) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = sabotage {
        tape.sabotage(kind);
    }
    let vars = params.iter().map(|(_, t)| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Compare tape gradients of the scalar `f(params)` with central differences
/// `(f(p+h) − f(p−h)) / 2h`, reporting the worst relative error per block.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, loss) = evaluate(&f, params, opts.sabotage)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    let mut blocks = Vec::with_capacity(params.len());
    for b in 0..params.len() {
        let n = params[b].1.len();
        let coords: Vec<usize> = match opts.max_per_block {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = params[b].1.data()[i];
            work[b].1.data_mut()[i] = orig + opts.h;
            let (t, _, l) = evaluate(&f, &work, None)?;
            let up = t.value(l).item();
            work[b].1.data_mut()[i] = orig - opts.h;
            let (t, _, l) = evaluate(&f, &work, None)?;
            let down = t.value(l).item();
            work[b].1.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            worst = worst.max(rel_err(analytic[b][i], numeric));
        }
        blocks.push(BlockReport { name: params[b].0.clone(), checked: coords.len(), max_rel_err: worst });
    }
    Ok(GradReport { tol: opts.tol, blocks })
}
