//! Procedural glyph corpus: stroke primitives composed into characters and
//! rendered under parametric font styles, with exact component labels.

mod dataset;
mod pgm;
mod render;

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use dataset::{make_dataset, Dataset, DatasetOptions, DatasetSplit, ManifestEntry, MANIFEST_FILE, SPLIT_FILE};
pub use pgm::{read_pgm, write_pgm};
pub use render::render_glyph;

/// Size of the component alphabet.
pub const NUM_COMPONENTS: usize = 10;
/// Glyph images are `IMAGE_SIZE × IMAGE_SIZE`.
pub const IMAGE_SIZE: usize = 32;
/// Characters with at most this many components.
pub const MAX_COMPONENTS_PER_CHAR: usize = 3;

const COMPONENT_NAMES: [&str; NUM_COMPONENTS] =
    ["bar_h", "bar_v", "diag", "anti_diag", "cross", "box", "left_hook", "arc", "dot", "t_junction"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComponentId(u8);

impl ComponentId {
    pub const BAR_H: ComponentId = ComponentId(0);
    pub const BAR_V: ComponentId = ComponentId(1);
    pub const DIAG: ComponentId = ComponentId(2);
    pub const ANTI_DIAG: ComponentId = ComponentId(3);
    pub const CROSS: ComponentId = ComponentId(4);
    pub const BOX: ComponentId = ComponentId(5);
    pub const LEFT_HOOK: ComponentId = ComponentId(6);
    pub const ARC: ComponentId = ComponentId(7);
    pub const DOT: ComponentId = ComponentId(8);
    pub const T_JUNCTION: ComponentId = ComponentId(9);

    pub fn new(id: usize) -> Result<Self> {
        if id < NUM_COMPONENTS {
            Ok(ComponentId(id as u8))
        } else {
            Err(Error::UnknownId { kind: "component", id })
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        COMPONENT_NAMES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = ComponentId> {
        (0..NUM_COMPONENTS as u8).map(ComponentId)
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Arrangement of component slots inside the glyph box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layout {
    Full,
    LeftRight,
    TopBottom,
    /// Left half, right-top quarter, right-bottom quarter.
    ThreeSlot,
}

/// Axis-aligned box in unit glyph coordinates (y grows downward).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slot {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

const fn slot(x0: f64, y0: f64, x1: f64, y1: f64) -> Slot {
    Slot { x0, y0, x1, y1 }
}

impl Layout {
    pub fn slots(self) -> &'static [Slot] {
        const FULL: [Slot; 1] = [slot(0.0, 0.0, 1.0, 1.0)];
        const LR: [Slot; 2] = [slot(0.0, 0.0, 0.5, 1.0), slot(0.5, 0.0, 1.0, 1.0)];
        const TB: [Slot; 2] = [slot(0.0, 0.0, 1.0, 0.5), slot(0.0, 0.5, 1.0, 1.0)];
        const THREE: [Slot; 3] = [slot(0.0, 0.0, 0.5, 1.0), slot(0.5, 0.0, 1.0, 0.5), slot(0.5, 0.5, 1.0, 1.0)];
        match self {
            Layout::Full => &FULL,
            Layout::LeftRight => &LR,
            Layout::TopBottom => &TB,
            Layout::ThreeSlot => &THREE,
        }
    }

    pub fn slot_count(self) -> usize {
        self.slots().len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharDef {
    pub char_id: usize,
    pub components: Vec<ComponentId>,
    pub layout: Layout,
}

impl CharDef {
    pub fn new(char_id: usize, components: Vec<ComponentId>, layout: Layout) -> Result<Self> {
        if components.is_empty() || components.len() > MAX_COMPONENTS_PER_CHAR {
            return Err(Error::Config(format!(
                "character {char_id} needs 1..={MAX_COMPONENTS_PER_CHAR} components, got {}",
                components.len()
            )));
        }
        if layout.slot_count() != components.len() {
            return Err(Error::Config(format!(
                "character {char_id}: layout {layout:?} has {} slots for {} components",
                layout.slot_count(),
                components.len()
            )));
        }
        let distinct: BTreeSet<_> = components.iter().collect();
        if distinct.len() != components.len() {
            return Err(Error::Config(format!("character {char_id} repeats a component")));
        }
        Ok(CharDef { char_id, components, layout })
    }

    pub fn component_set(&self) -> BTreeSet<ComponentId> {
        self.components.iter().copied().collect()
    }
}

/// Parametric style of a synthetic font.
#[derive(Clone, Debug, PartialEq)]
pub struct FontParams {
    pub font_id: usize,
    /// Stroke width in pixels, 1..=3.
    pub stroke_width: u8,
    /// Horizontal slant per unit of downward offset, within ±0.4.
    pub shear: f64,
    /// Glyph scale about the canvas centre, within [0.8, 1.0].
    pub scale: f64,
    pub jitter_seed: u64,
    /// Ink darkness, within [0.7, 1.0].
    pub contrast: f64,
}

impl FontParams {
    /// The canonical upright font used as the content source.
    pub fn base(font_id: usize) -> Self {
        FontParams { font_id, stroke_width: 2, shear: 0.0, scale: 0.9, jitter_seed: 0, contrast: 1.0 }
    }

    pub fn sample(font_id: usize, rng: &mut impl Rng) -> Self {
        FontParams {
            font_id,
            stroke_width: rng.gen_range(1..=3),
            shear: rng.gen_range(-0.4..=0.4),
            scale: rng.gen_range(0.8..=1.0),
            jitter_seed: rng.gen(),
            contrast: rng.gen_range(0.7..=1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (1..=3).contains(&self.stroke_width)
            && (-0.4..=0.4).contains(&self.shear)
            && (0.8..=1.0).contains(&self.scale)
            && (0.7..=1.0).contains(&self.contrast);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("font parameters out of range: {self:?}")))
        }
    }
}

/// One rendered glyph with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSample {
    /// `[1×32×32]`, ink = 0, background = 1.
    pub image: Tensor<f32>,
    pub font_id: usize,
    pub char_id: usize,
    pub comp_gt: BTreeSet<ComponentId>,
}

/// Every distinct (ordered components, layout) combination.
fn all_combinations() -> Vec<(Vec<ComponentId>, Layout)> {
    let ids: Vec<ComponentId> = ComponentId::all().collect();
    let mut out = Vec::new();
    for &a in &ids {
        out.push((vec![a], Layout::Full));
    }
    for &a in &ids {
        for &b in &ids {
            if a != b {
                out.push((vec![a, b], Layout::LeftRight));
                out.push((vec![a, b], Layout::TopBottom));
            }
        }
    }
    for &a in &ids {
        for &b in &ids {
            for &c in &ids {
                if a != b && b != c && a != c {
                    out.push((vec![a, b, c], Layout::ThreeSlot));
                }
            }
        }
    }
    out
}

/// Number of characters needed up front so that every component appears.
pub const COVERAGE_PREFIX: usize = NUM_COMPONENTS.div_ceil(MAX_COMPONENTS_PER_CHAR);

/// Deterministically sample `n_chars` distinct characters.
///
/// The first [`COVERAGE_PREFIX`] characters jointly use every component, so
/// any training subset taken from the front of the list covers the alphabet.
pub fn build_charset(n_chars: usize, seed: u64) -> Result<Vec<CharDef>> {
    let mut pool = all_combinations();
    if n_chars > pool.len() {
        return Err(Error::Config(format!(
            "{n_chars} characters requested but only {} distinct combinations exist",
            pool.len()
        )));
    }
    if n_chars < COVERAGE_PREFIX {
        return Err(Error::Config(format!(
            "at least {COVERAGE_PREFIX} characters are needed to cover all {NUM_COMPONENTS} components"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<ComponentId> = ComponentId::all().collect();
    order.shuffle(&mut rng);

    let mut chosen: Vec<(Vec<ComponentId>, Layout)> = Vec::with_capacity(n_chars);
    for chunk in order.chunks(MAX_COMPONENTS_PER_CHAR) {
        let mut comps = chunk.to_vec();
        while comps.len() < MAX_COMPONENTS_PER_CHAR {
            let extra = *order.choose(&mut rng).expect("non-empty alphabet");
            if !comps.contains(&extra) {
                comps.push(extra);
            }
        }
        chosen.push((comps, Layout::ThreeSlot));
    }
    pool.retain(|c| !chosen.contains(c));
    pool.shuffle(&mut rng);
    chosen.extend(pool.into_iter().take(n_chars - COVERAGE_PREFIX));

    chosen.into_iter().enumerate().map(|(id, (comps, layout))| CharDef::new(id, comps, layout)).collect()
}

/// Ground-truth component set of `char_id`.
pub fn component_set(char_id: usize, charset: &[CharDef]) -> Result<BTreeSet<ComponentId>> {
    charset
        .iter()
        .find(|c| c.char_id == char_id)
        .map(CharDef::component_set)
        .ok_or(Error::UnknownId { kind: "character", id: char_id })
}
