use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pgm::{self, read_pgm};
use super::{build_charset, render_glyph, ComponentId, FontParams, COVERAGE_PREFIX, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SPLIT_FILE: &str = "split.txt";
const GLYPH_DIR: &str = "glyphs";

#[derive(Clone, Debug)]
pub struct DatasetOptions {
    pub n_fonts: usize,
    pub n_unseen_fonts: usize,
    pub n_chars: usize,
    pub n_unseen_chars: usize,
    pub seed: u64,
    pub force: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions { n_fonts: 16, n_unseen_fonts: 4, n_chars: 80, n_unseen_chars: 20, seed: 0, force: false }
    }
}

impl DatasetOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_fonts == 0 || self.n_chars == 0 {
            return Err(Error::Config("font and character counts must be positive".into()));
        }
        if self.n_unseen_fonts >= self.n_fonts {
            return Err(Error::Config(format!(
                "unseen fonts ({}) must be fewer than fonts ({})",
                self.n_unseen_fonts, self.n_fonts
            )));
        }
        if self.n_unseen_chars >= self.n_chars {
            return Err(Error::Config(format!(
                "unseen characters ({}) must be fewer than characters ({})",
                self.n_unseen_chars, self.n_chars
            )));
        }
        if self.n_chars - self.n_unseen_chars < COVERAGE_PREFIX {
            return Err(Error::Config(format!(
                "need at least {COVERAGE_PREFIX} training characters to cover every component"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub font_id: usize,
    pub char_id: usize,
    pub comp_ids: BTreeSet<ComponentId>,
}

/// Font/character partition plus the sample manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub seed: u64,
    pub base_font: usize,
    pub train_fonts: Vec<usize>,
    pub unseen_fonts: Vec<usize>,
    pub train_chars: Vec<usize>,
    pub unseen_chars: Vec<usize>,
    pub samples: Vec<ManifestEntry>,
}

fn cross(fonts: &[usize], chars: &[usize]) -> Vec<(usize, usize)> {
    fonts.iter().flat_map(|&f| chars.iter().map(move |&c| (f, c))).collect()
}

impl DatasetSplit {
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        cross(&self.train_fonts, &self.train_chars)
    }

    /// Unseen fonts × training characters.
    pub fn ufsc_pairs(&self) -> Vec<(usize, usize)> {
        cross(&self.unseen_fonts, &self.train_chars)
    }

    /// Unseen fonts × unseen characters.
    pub fn ufuc_pairs(&self) -> Vec<(usize, usize)> {
        cross(&self.unseen_fonts, &self.unseen_chars)
    }

    pub fn is_train_pair(&self, font: usize, ch: usize) -> bool {
        self.train_fonts.contains(&font) && self.train_chars.contains(&ch)
    }

    pub fn n_train_fonts(&self) -> usize {
        self.train_fonts.len()
    }

    fn check_disjoint(&self) -> Result<()> {
        let overlap = |a: &[usize], b: &[usize]| a.iter().any(|x| b.contains(x));
        if overlap(&self.train_fonts, &self.unseen_fonts) || overlap(&self.train_chars, &self.unseen_chars) {
            return Err(Error::Format("train and unseen id lists overlap".into()));
        }
        if !self.train_fonts.contains(&self.base_font) {
            return Err(Error::Format(format!("base font {} is not a training font", self.base_font)));
        }
        // Class indices of the style classifier are the training font ids.
        if self.train_fonts.iter().enumerate().any(|(i, &f)| i != f) {
            return Err(Error::Format("training fonts must be 0..n_train_fonts".into()));
        }
        Ok(())
    }

    fn split_text(&self) -> String {
        let mut s = String::from("# dataset split; ranges are inclusive\n");
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "base_font={}", self.base_font);
        let _ = writeln!(s, "train_fonts={}", fmt_ids(&self.train_fonts));
        let _ = writeln!(s, "unseen_fonts={}", fmt_ids(&self.unseen_fonts));
        let _ = writeln!(s, "train_chars={}", fmt_ids(&self.train_chars));
        let _ = writeln!(s, "unseen_chars={}", fmt_ids(&self.unseen_chars));
        s
    }

    fn manifest_text(&self) -> String {
        let mut s = String::from("# path\tfont_id\tchar_id\tcomp_ids\n");
        for e in &self.samples {
            let comps: Vec<String> = e.comp_ids.iter().map(|c| c.index().to_string()).collect();
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.path, e.font_id, e.char_id, comps.join(","));
        }
        s
    }
}

/// Compact `a-b` ranges joined by commas.
fn fmt_ids(ids: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        let mut j = i;
        while j + 1 < ids.len() && ids[j + 1] == ids[j] + 1 {
            j += 1;
        }
        parts.push(if i == j { ids[i].to_string() } else { format!("{}-{}", ids[i], ids[j]) });
        i = j + 1;
    }
    parts.join(",")
}

fn parse_ids(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Format(format!("bad id list {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

fn glyph_path(font: usize, ch: usize) -> String {
    format!("{GLYPH_DIR}/f{font:03}_c{ch:03}.pgm")
}

/// Render every font × character image and write the corpus to `out`.
pub fn make_dataset(out: &Path, opts: &DatasetOptions) -> Result<DatasetSplit> {
    opts.validate()?;
    if out.join(MANIFEST_FILE).exists() && !opts.force {
        return Err(Error::Config(format!("{} already holds a dataset; pass --force to overwrite", out.display())));
    }
    let charset = build_charset(opts.n_chars, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xF0_17);
    let fonts: Vec<FontParams> = (0..opts.n_fonts)
        .map(|id| if id == 0 { FontParams::base(0) } else { FontParams::sample(id, &mut rng) })
        .collect();

    let n_train_fonts = opts.n_fonts - opts.n_unseen_fonts;
    let n_train_chars = opts.n_chars - opts.n_unseen_chars;
    let mut split = DatasetSplit {
        seed: opts.seed,
        base_font: 0,
        train_fonts: (0..n_train_fonts).collect(),
        unseen_fonts: (n_train_fonts..opts.n_fonts).collect(),
        train_chars: (0..n_train_chars).collect(),
        unseen_chars: (n_train_chars..opts.n_chars).collect(),
        samples: Vec::with_capacity(opts.n_fonts * opts.n_chars),
    };

    let glyph_dir = out.join(GLYPH_DIR);
    fs::create_dir_all(&glyph_dir).map_err(|e| Error::io(&glyph_dir, e))?;
    for font in &fonts {
        for ch in &charset {
            let sample = render_glyph(ch, font);
            let rel = glyph_path(font.font_id, ch.char_id);
            let path = out.join(&rel);
            let bytes = pgm::encode(IMAGE_SIZE, IMAGE_SIZE, sample.image.data());
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            split.samples.push(ManifestEntry {
                path: rel,
                font_id: font.font_id,
                char_id: ch.char_id,
                comp_ids: sample.comp_gt,
            });
        }
    }
    let manifest = out.join(MANIFEST_FILE);
    fs::write(&manifest, split.manifest_text()).map_err(|e| Error::io(&manifest, e))?;
    let split_path = out.join(SPLIT_FILE);
    fs::write(&split_path, split.split_text()).map_err(|e| Error::io(&split_path, e))?;
    Ok(split)
}

fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", lineno + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let font_id = cols[1].parse().map_err(|_| bad("bad font_id"))?;
        let char_id = cols[2].parse().map_err(|_| bad("bad char_id"))?;
        let comp_ids = cols[3]
            .split(',')
            .map(|c| c.parse::<usize>().map_err(|_| bad("bad component id")).and_then(ComponentId::new))
            .collect::<Result<BTreeSet<_>>>()?;
        out.push(ManifestEntry { path: cols[0].to_string(), font_id, char_id, comp_ids });
    }
    Ok(out)
}

fn parse_split(text: &str, samples: Vec<ManifestEntry>) -> Result<DatasetSplit> {
    let mut kv = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("split line without '=': {line:?}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("split file lacks {k}")));
    let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::Format(format!("bad {k}"))) };
    let split = DatasetSplit {
        seed: num("seed")?,
        base_font: num("base_font")? as usize,
        train_fonts: parse_ids(get("train_fonts")?)?,
        unseen_fonts: parse_ids(get("unseen_fonts")?)?,
        train_chars: parse_ids(get("train_chars")?)?,
        unseen_chars: parse_ids(get("unseen_chars")?)?,
        samples,
    };
    split.check_disjoint()?;
    Ok(split)
}

/// A corpus loaded from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: DatasetSplit,
    images: BTreeMap<(usize, usize), Tensor<f32>>,
    components: BTreeMap<usize, BTreeSet<ComponentId>>,
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        Self::load_where(root, |_, _| true)
    }

    /// Load the manifest and split, but read only the glyph files whose
    /// `(font, char)` satisfies `keep`.
    pub fn load_where(root: impl AsRef<Path>, keep: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let read = |name: &str| {
            let p = root.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let samples = parse_manifest(&read(MANIFEST_FILE)?)?;
        let split = parse_split(&read(SPLIT_FILE)?, samples)?;
        let mut images = BTreeMap::new();
        let mut components: BTreeMap<usize, BTreeSet<ComponentId>> = BTreeMap::new();
        for e in &split.samples {
            if let Some(prev) = components.insert(e.char_id, e.comp_ids.clone()) {
                if prev != e.comp_ids {
                    return Err(Error::Format(format!("character {} has inconsistent labels", e.char_id)));
                }
            }
            if !keep(e.font_id, e.char_id) {
                continue;
            }
            let img = read_pgm(root.join(&e.path))?;
            if img.shape() != [1, IMAGE_SIZE, IMAGE_SIZE] {
                return Err(Error::Format(format!("{}: expected a {IMAGE_SIZE}×{IMAGE_SIZE} glyph", e.path)));
            }
            images.insert((e.font_id, e.char_id), img);
        }
        Ok(Dataset { root, split, images, components })
    }

    pub fn image(&self, font: usize, ch: usize) -> Result<&Tensor<f32>> {
        self.images.get(&(font, ch)).ok_or(Error::UnknownId { kind: "glyph (font, char)", id: font * 10_000 + ch })
    }

    /// Every `(font, char)` whose glyph file was read.
    pub fn loaded_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.images.keys().copied()
    }

    pub fn comp_gt(&self, ch: usize) -> Result<&BTreeSet<ComponentId>> {
        self.components.get(&ch).ok_or(Error::UnknownId { kind: "character", id: ch })
    }

    pub fn has_font(&self, font: usize) -> bool {
        self.split.train_fonts.contains(&font) || self.split.unseen_fonts.contains(&font)
    }
}
