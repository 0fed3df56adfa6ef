//! Variant × seed comparison runs on the unseen-font/unseen-character split.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, Split};
use crate::model::Variant;
use crate::train::{checkpoint_name, train, Checkpoint, RunOptions, TrainConfig};

pub const ABLATION_FILE: &str = "ablation.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub l1: f64,
    pub rmse: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantMean {
    pub variant: Variant,
    pub l1: f64,
    pub rmse: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub means: Vec<VariantMean>,
}

/// Ordering of one ablation against the full model.
#[derive(Clone, Debug, PartialEq)]
pub struct Ordering {
    pub ablation: Variant,
    pub l1_ok: bool,
    pub ssim_ok: bool,
}

impl AblationReport {
    pub fn from_rows(rows: Vec<AblationRow>) -> Self {
        let means = Variant::ALL
            .into_iter()
            .filter_map(|v| {
                let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
                if sel.is_empty() {
                    return None;
                }
                let n = sel.len() as f64;
                Some(VariantMean {
                    variant: v,
                    l1: sel.iter().map(|r| r.l1).sum::<f64>() / n,
                    rmse: sel.iter().map(|r| r.rmse).sum::<f64>() / n,
                    ssim: sel.iter().map(|r| r.ssim).sum::<f64>() / n,
                })
            })
            .collect();
        AblationReport { rows, means }
    }

    pub fn mean(&self, v: Variant) -> Option<&VariantMean> {
        self.means.iter().find(|m| m.variant == v)
    }

    /// Seed-averaged comparison of each ablation against `full`:
    /// lower-or-equal L1 and higher-or-equal SSIM for the full model.
    pub fn orderings(&self) -> Vec<Ordering> {
        let Some(full) = self.mean(Variant::Full) else { return Vec::new() };
        self.means
            .iter()
            .filter(|m| m.variant != Variant::Full)
            .map(|m| Ordering { ablation: m.variant, l1_ok: full.l1 <= m.l1, ssim_ok: full.ssim >= m.ssim })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\tseed\tufuc_l1\tufuc_rmse\tufuc_ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}\t{:.6}", r.variant, r.seed, r.l1, r.rmse, r.ssim);
        }
        for m in &self.means {
            let _ = writeln!(s, "{}\tmean\t{:.6}\t{:.6}\t{:.6}", m.variant, m.l1, m.rmse, m.ssim);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub eval: EvalOptions,
    pub force: bool,
    pub progress_every: usize,
}

impl Default for AblationOptions {
    fn default() -> Self {
        AblationOptions {
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
            eval: EvalOptions::default(),
            force: false,
            progress_every: 0,
        }
    }
}

pub fn run_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join(format!("{variant}_seed{seed}"))
}

/// A finished run with exactly this config, if one is on disk.
fn finished_run(cfg: &TrainConfig) -> Option<PathBuf> {
    let ckpt = cfg.out_dir.join(checkpoint_name(cfg.steps));
    let saved = fs::read_to_string(cfg.out_dir.join("config.txt")).ok()?;
    (saved == cfg.to_text() && ckpt.exists()).then_some(ckpt)
}

/// Train every variant for every seed under `base.out_dir`, then evaluate
/// each final checkpoint on the unseen/unseen split. Runs already completed
/// with an identical config are reused unless `force` is set.
pub fn run_ablation(base: &TrainConfig, opts: &AblationOptions) -> Result<AblationReport> {
    if opts.seeds.is_empty() || opts.variants.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one variant".into()));
    }
    let report_path = base.out_dir.join(ABLATION_FILE);
    if report_path.exists() && !opts.force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", report_path.display())));
    }
    let mut rows = Vec::new();
    for &variant in &opts.variants {
        for &seed in &opts.seeds {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.seed = seed;
            cfg.out_dir = run_dir(&base.out_dir, variant, seed);
            let ckpt = match finished_run(&cfg) {
                Some(p) if !opts.force => p,
                _ => {
                    let run = RunOptions { resume: None, force: true, progress_every: opts.progress_every };
                    train(&cfg, &run)?.checkpoint
                }
            };
            let ck = Checkpoint::load(&ckpt)?;
            let ev = evaluate(&ck, &cfg.data_dir, Split::Ufuc, &opts.eval)?;
            ev.write(&cfg.out_dir.join("eval_ufuc"), true)?;
            if opts.progress_every > 0 {
                eprintln!("{variant} seed {seed}: ufuc l1={:.4} ssim={:.4}", ev.mean_l1, ev.mean_ssim);
            }
            rows.push(AblationRow { variant, seed, l1: ev.mean_l1, rmse: ev.mean_rmse, ssim: ev.mean_ssim });
        }
    }
    let report = AblationReport::from_rows(rows);
    fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    fs::write(&report_path, report.to_tsv()).map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}
