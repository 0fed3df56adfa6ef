//! Held-out evaluation: generate every (font, char) pair of a split from a
//! base-font content glyph and a few reference glyphs, then score it.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::glyph::{write_pgm, Dataset, DatasetSplit, IMAGE_SIZE};
use crate::metrics;
use crate::model::encoder::{encode, mean_bundles};
use crate::model::heads::generate;
use crate::model::{Bound, ModelConfig, ParamStore};
use crate::tensor::{Tape, Tensor};
use crate::train::Checkpoint;

pub const PAIRS_FILE: &str = "pairs.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const GRID_FILE: &str = "grid.pgm";
/// Rows shown in the sample grid.
pub const GRID_ROWS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    /// Unseen fonts × training characters.
    Ufsc,
    /// Unseen fonts × unseen characters.
    Ufuc,
    /// Training fonts × training characters (fit diagnostics only).
    Train,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Ufsc => "ufsc",
            Split::Ufuc => "ufuc",
            Split::Train => "train",
        }
    }

    /// Pairs to score, in row order.
    pub fn pairs(self, s: &DatasetSplit) -> Vec<(usize, usize)> {
        match self {
            Split::Ufsc => s.ufsc_pairs(),
            Split::Ufuc => s.ufuc_pairs(),
            Split::Train => s.train_pairs(),
        }
    }

    /// Characters that reference glyphs may be drawn from.
    pub fn reference_chars(self, s: &DatasetSplit) -> &[usize] {
        match self {
            Split::Ufsc | Split::Train => &s.train_chars,
            Split::Ufuc => &s.unseen_chars,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ufsc" => Ok(Split::Ufsc),
            "ufuc" => Ok(Split::Ufuc),
            "train" => Ok(Split::Train),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected ufsc or ufuc)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub n_style_refs: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { n_style_refs: 4, seed: 0 }
    }
}

/// What one pair needs: the content glyph, references and target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPlan {
    pub font: usize,
    pub char_id: usize,
    pub content: (usize, usize),
    pub refs: Vec<(usize, usize)>,
    pub target: (usize, usize),
}

/// Glyphs an evaluation reads, grouped by role.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessLog {
    pub content: BTreeSet<(usize, usize)>,
    pub style: BTreeSet<(usize, usize)>,
    pub target: BTreeSet<(usize, usize)>,
}

impl AccessLog {
    pub fn all(&self) -> BTreeSet<(usize, usize)> {
        self.content.iter().chain(&self.style).chain(&self.target).copied().collect()
    }
}

/// Outcome of checking an evaluation's reads against the training split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeakageAudit {
    /// Reference or target glyphs that are training pairs.
    pub style_or_target_leaks: Vec<(usize, usize)>,
    /// Content glyphs that are not in the base font.
    pub foreign_content: Vec<(usize, usize)>,
    /// Base-font content glyphs that are training pairs (seen characters).
    pub base_font_train_pairs: Vec<(usize, usize)>,
}

impl LeakageAudit {
    /// No reference or target glyph is a training pair and all content
    /// comes from the base font.
    pub fn passed(&self) -> bool {
        self.style_or_target_leaks.is_empty() && self.foreign_content.is_empty()
    }

    /// Stronger: not a single glyph read is a training pair.
    pub fn touches_no_train_pair(&self) -> bool {
        self.passed() && self.base_font_train_pairs.is_empty()
    }
}

pub fn audit(log: &AccessLog, split: &DatasetSplit) -> LeakageAudit {
    fn leaks<'a>(
        set: &'a BTreeSet<(usize, usize)>,
        split: &'a DatasetSplit,
    ) -> impl Iterator<Item = (usize, usize)> + 'a {
        set.iter().copied().filter(|&(f, c)| split.is_train_pair(f, c))
    }
    LeakageAudit {
        style_or_target_leaks: leaks(&log.style, split).chain(leaks(&log.target, split)).collect(),
        foreign_content: log.content.iter().copied().filter(|&(f, _)| f != split.base_font).collect(),
        base_font_train_pairs: leaks(&log.content, split).collect(),
    }
}

/// Decide every read up front, before any glyph file is opened.
pub fn plan(split: &DatasetSplit, which: Split, opts: &EvalOptions) -> Result<Vec<PairPlan>> {
    if opts.n_style_refs == 0 {
        return Err(Error::Config("n_style_refs must be at least 1".into()));
    }
    let pairs = which.pairs(split);
    if pairs.is_empty() {
        return Err(Error::Config(format!("split {which} has no pairs")));
    }
    let allowed = which.reference_chars(split);
    pairs
        .into_iter()
        .map(|(font, char_id)| {
            let pool: Vec<usize> = allowed.iter().copied().filter(|&c| c != char_id).collect();
            if pool.is_empty() {
                return Err(Error::Config(format!(
                    "split {which}: no reference characters available for character {char_id}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(((font as u64) << 32) | char_id as u64);
            let refs = pool.choose_multiple(&mut rng, opts.n_style_refs.min(pool.len())).map(|&c| (font, c)).collect();
            Ok(PairPlan { font, char_id, content: (split.base_font, char_id), refs, target: (font, char_id) })
        })
        .collect()
}

pub fn access_log(plans: &[PairPlan]) -> AccessLog {
    let mut log = AccessLog::default();
    for p in plans {
        log.content.insert(p.content);
        log.style.extend(p.refs.iter().copied());
        log.target.insert(p.target);
    }
    log
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairResult {
    pub font: usize,
    pub char_id: usize,
    pub l1: f64,
    pub rmse: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub split: Split,
    pub n_style_refs: usize,
    pub rows: Vec<PairResult>,
    pub mean_l1: f64,
    pub mean_rmse: f64,
    pub mean_ssim: f64,
    pub access: AccessLog,
    pub audit: LeakageAudit,
    /// `(content, first reference, generated, target)` for the first rows.
    pub samples: Vec<[Tensor<f32>; 4]>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Produce one glyph from a content image and reference images.
pub fn synthesize(
    params: &ParamStore,
    model: &ModelConfig,
    content: &Tensor<f32>,
    refs: &[Tensor<f32>],
) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let b = Bound::bind(&mut tape, params, false)?;
    synthesize_on(&mut tape, &b, model, content, refs)
}

fn synthesize_on(
    tape: &mut Tape<f32>,
    b: &Bound,
    model: &ModelConfig,
    content: &Tensor<f32>,
    refs: &[Tensor<f32>],
) -> Result<Tensor<f32>> {
    let xc = tape.constant(content.clone())?;
    let cb = encode(tape, xc, b, model)?;
    let rb = refs
        .iter()
        .map(|r| {
            let x = tape.constant(r.clone())?;
            encode(tape, x, b, model)
        })
        .collect::<Result<Vec<_>>>()?;
    let sb = mean_bundles(tape, &rb)?;
    let out = generate(tape, &cb, &sb, b, model)?;
    Ok(tape.value(out).clone())
}

/// Generator used by [`evaluate_with`]: maps (content, references) to an image.
pub trait GlyphSource {
    fn produce(&mut self, plan: &PairPlan, content: &Tensor<f32>, refs: &[Tensor<f32>]) -> Result<Tensor<f32>>;
}

/// The trained model.
pub struct ModelSource<'a> {
    pub checkpoint: &'a Checkpoint,
}

impl GlyphSource for ModelSource<'_> {
    fn produce(&mut self, _: &PairPlan, content: &Tensor<f32>, refs: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        synthesize(&self.checkpoint.params, &self.checkpoint.model, content, refs)
    }
}

/// Returns the ground truth itself (sanity check of the harness).
pub struct OracleSource<'a> {
    pub data: &'a Dataset,
}

impl GlyphSource for OracleSource<'_> {
    fn produce(&mut self, plan: &PairPlan, _: &Tensor<f32>, _: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        Ok(self.data.image(plan.target.0, plan.target.1)?.clone())
    }
}

/// Generate characters `chars` in the style of `font`, with references drawn
/// from the training characters (never the generated one) of that font.
pub fn generate_for_font(
    checkpoint: &Checkpoint,
    root: &Path,
    font: usize,
    chars: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<(usize, Tensor<f32>)>> {
    if opts.n_style_refs == 0 {
        return Err(Error::Config("n_style_refs must be at least 1".into()));
    }
    let probe = Dataset::load_where(root, |_, _| false)?;
    let split = &probe.split;
    if !split.train_fonts.contains(&font) && !split.unseen_fonts.contains(&font) {
        return Err(Error::UnknownId { kind: "font", id: font });
    }
    let mut plans = Vec::with_capacity(chars.len());
    for &c in chars {
        if !split.train_chars.contains(&c) && !split.unseen_chars.contains(&c) {
            return Err(Error::UnknownId { kind: "character", id: c });
        }
        let pool: Vec<usize> = split.train_chars.iter().copied().filter(|&r| r != c).collect();
        if pool.is_empty() {
            return Err(Error::Config(format!("no reference characters available for character {c}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(((font as u64) << 32) | c as u64);
        let refs: Vec<usize> = pool.choose_multiple(&mut rng, opts.n_style_refs.min(pool.len())).copied().collect();
        plans.push((c, refs));
    }
    let base = split.base_font;
    let data = Dataset::load_where(root, |f, c| {
        (f == base && chars.contains(&c)) || (f == font && plans.iter().any(|(_, r)| r.contains(&c)))
    })?;
    plans
        .iter()
        .map(|(c, refs)| {
            let content = data.image(base, *c)?;
            let refs = refs.iter().map(|&r| data.image(font, r).cloned()).collect::<Result<Vec<_>>>()?;
            Ok((*c, synthesize(&checkpoint.params, &checkpoint.model, content, &refs)?))
        })
        .collect()
}

/// Load only the glyphs the evaluation needs.
pub fn load_for(root: &Path, which: Split, opts: &EvalOptions) -> Result<(Dataset, Vec<PairPlan>, AccessLog)> {
    let probe = Dataset::load_where(root, |_, _| false)?;
    let plans = plan(&probe.split, which, opts)?;
    let log = access_log(&plans);
    let needed = log.all();
    let data = Dataset::load_where(root, |f, c| needed.contains(&(f, c)))?;
    Ok((data, plans, log))
}

pub fn evaluate_with(
    source: &mut dyn GlyphSource,
    data: &Dataset,
    plans: &[PairPlan],
    which: Split,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(plans.len());
    let mut samples = Vec::new();
    for p in plans {
        let content = data.image(p.content.0, p.content.1)?;
        let refs = p.refs.iter().map(|&(f, c)| data.image(f, c).cloned()).collect::<Result<Vec<_>>>()?;
        let target = data.image(p.target.0, p.target.1)?;
        let out = source.produce(p, content, &refs)?;
        rows.push(PairResult {
            font: p.font,
            char_id: p.char_id,
            l1: metrics::l1(&out, target)?,
            rmse: metrics::rmse(&out, target)?,
            ssim: metrics::ssim(&out, target)?,
        });
        if samples.len() < GRID_ROWS {
            samples.push([content.clone(), refs[0].clone(), out, target.clone()]);
        }
    }
    let access = access_log(plans);
    let audit = audit(&access, &data.split);
    Ok(EvalReport {
        split: which,
        n_style_refs: opts.n_style_refs,
        mean_l1: mean(rows.iter().map(|r| r.l1)),
        mean_rmse: mean(rows.iter().map(|r| r.rmse)),
        mean_ssim: mean(rows.iter().map(|r| r.ssim)),
        rows,
        access,
        audit,
        samples,
    })
}

/// Evaluate a checkpoint on a split of the dataset at `root`.
pub fn evaluate(checkpoint: &Checkpoint, root: &Path, which: Split, opts: &EvalOptions) -> Result<EvalReport> {
    let (data, plans, _) = load_for(root, which, opts)?;
    if checkpoint.model.n_train_fonts != data.split.n_train_fonts() {
        return Err(Error::Config(format!(
            "checkpoint was trained with {} fonts but the dataset has {}",
            checkpoint.model.n_train_fonts,
            data.split.n_train_fonts()
        )));
    }
    evaluate_with(&mut ModelSource { checkpoint }, &data, &plans, which, opts)
}

/// Tile `[1×32×32]` images into rows of equal length.
pub fn tile(rows: &[Vec<&Tensor<f32>>]) -> Result<Tensor<f32>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config("grid needs equally long, non-empty rows".into()));
    }
    let s = IMAGE_SIZE;
    let (h, w) = (rows.len() * s, cols * s);
    let mut out = Tensor::full(&[1, h, w], 1.0f32);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.shape() != [1, s, s] {
                return Err(Error::dim("tile", format!("expected [1, {s}, {s}], got {:?}", img.shape())));
            }
            for y in 0..s {
                let dst = (r * s + y) * w + c * s;
                out.data_mut()[dst..dst + s].copy_from_slice(&img.data()[y * s..(y + 1) * s]);
            }
        }
    }
    Ok(out)
}

impl EvalReport {
    pub fn summary_text(&self) -> String {
        format!(
            "split={}\npairs={}\nn_style_refs={}\nmean_l1={:.9}\nmean_rmse={:.9}\nmean_ssim={:.9}\nleakage_audit={}\n",
            self.split,
            self.rows.len(),
            self.n_style_refs,
            self.mean_l1,
            self.mean_rmse,
            self.mean_ssim,
            if self.audit.passed() { "pass" } else { "fail" },
        )
    }

    pub fn pairs_text(&self) -> String {
        let mut s = String::from("font_id\tchar_id\tl1\trmse\tssim\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{:.9}\t{:.9}\t{:.9}\n", r.font, r.char_id, r.l1, r.rmse, r.ssim));
        }
        s
    }

    /// Write the per-pair table, summary and sample grid into `out`.
    pub fn write(&self, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
        let files = [out.join(PAIRS_FILE), out.join(SUMMARY_FILE), out.join(GRID_FILE)];
        if !force {
            if let Some(f) = files.iter().find(|f| f.exists()) {
                return Err(Error::Config(format!("{} exists; pass --force to overwrite", f.display())));
            }
        }
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        fs::write(&files[0], self.pairs_text()).map_err(|e| Error::io(&files[0], e))?;
        fs::write(&files[1], self.summary_text()).map_err(|e| Error::io(&files[1], e))?;
        let rows: Vec<Vec<&Tensor<f32>>> = self.samples.iter().map(|s| s.iter().collect()).collect();
        write_pgm(&files[2], &tile(&rows)?)?;
        Ok(files.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyph::{make_dataset, DatasetOptions};

    fn data() -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let opts =
            DatasetOptions { n_fonts: 4, n_unseen_fonts: 2, n_chars: 8, n_unseen_chars: 3, seed: 1, force: false };
        make_dataset(dir.path(), &opts).unwrap();
        let d = Dataset::load(dir.path()).unwrap();
        (dir, d)
    }

    #[test]
    fn plans_exclude_the_evaluated_character() {
        let (_dir, d) = data();
        let opts = EvalOptions { n_style_refs: 2, seed: 3 };
        let plans = plan(&d.split, Split::Ufuc, &opts).unwrap();
        assert_eq!(plans.len(), 2 * 3);
        for p in &plans {
            assert_eq!(p.refs.len(), 2);
            assert!(p.refs.iter().all(|&(f, c)| f == p.font && c != p.char_id && d.split.unseen_chars.contains(&c)));
            assert_eq!(p.content, (0, p.char_id));
        }
        assert_eq!(plans, plan(&d.split, Split::Ufuc, &opts).unwrap());
    }

    #[test]
    fn oracle_source_scores_perfectly() {
        let (dir, _) = data();
        let opts = EvalOptions::default();
        let (d, plans, log) = load_for(dir.path(), Split::Ufsc, &opts).unwrap();
        let r = evaluate_with(&mut OracleSource { data: &d }, &d, &plans, Split::Ufsc, &opts).unwrap();
        assert_eq!(r.rows.len(), 2 * 5);
        assert_eq!((r.mean_l1, r.mean_rmse), (0.0, 0.0));
        assert!((r.mean_ssim - 1.0).abs() < 1e-12);
        assert_eq!(d.loaded_pairs().collect::<BTreeSet<_>>(), log.all());
        assert!(r.audit.passed());
    }

    #[test]
    fn unseen_unseen_reads_no_training_glyph() {
        let (dir, _) = data();
        let (d, _, log) = load_for(dir.path(), Split::Ufuc, &EvalOptions::default()).unwrap();
        assert!(audit(&log, &d.split).touches_no_train_pair());
        assert!(d.loaded_pairs().all(|(f, c)| !d.split.is_train_pair(f, c)));
    }

    #[test]
    fn audit_flags_training_references() {
        let (_dir, d) = data();
        let mut log = AccessLog::default();
        log.style.insert((1, d.split.train_chars[0]));
        log.content.insert((2, d.split.unseen_chars[0]));
        let a = audit(&log, &d.split);
        assert!(!a.passed());
        assert_eq!(a.style_or_target_leaks.len(), 1);
        assert_eq!(a.foreign_content.len(), 1);
    }

    #[test]
    fn split_names_parse() {
        for s in [Split::Ufsc, Split::Ufuc, Split::Train] {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("seen".parse::<Split>().is_err());
    }
}
