use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::glyph::ComponentId;
use crate::glyph::Dataset;
use crate::tensor::{Scalar, Tensor};

/// One supervised example: render `char_id` in the style of `font_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem<T = f32> {
    pub char_id: usize,
    pub font_id: usize,
    /// Index of `font_id` among the training fonts (classifier target).
    pub font_class: usize,
    pub ref_chars: Vec<usize>,
    /// `char_id` in the base font.
    pub content: Tensor<T>,
    /// `ref_chars` in `font_id`.
    pub refs: Vec<Tensor<T>>,
    /// `char_id` in `font_id`.
    pub target: Tensor<T>,
    pub comp_gt: BTreeSet<ComponentId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T = f32> {
    pub items: Vec<BatchItem<T>>,
}

impl Batch<f32> {
    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch {
            items: self
                .items
                .iter()
                .map(|it| BatchItem {
                    char_id: it.char_id,
                    font_id: it.font_id,
                    font_class: it.font_class,
                    ref_chars: it.ref_chars.clone(),
                    content: it.content.cast(),
                    refs: it.refs.iter().map(Tensor::cast).collect(),
                    target: it.target.cast(),
                    comp_gt: it.comp_gt.clone(),
                })
                .collect(),
        }
    }
}

/// Random stream for `step`, independent of every other step.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Draw the batch for `step`. Depends only on `(dataset, seed, step)`, so a
/// resumed run sees exactly the batches of an uninterrupted one.
pub fn make_batch(data: &Dataset, seed: u64, step: usize, batch_size: usize, n_refs: usize) -> Result<Batch> {
    let split = &data.split;
    if split.train_fonts.is_empty() || split.train_chars.len() < 2 {
        return Err(Error::Config("training needs at least one font and two characters".into()));
    }
    let mut rng = step_rng(seed, step);
    let mut items = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let font_class = rng.gen_range(0..split.train_fonts.len());
        let font_id = split.train_fonts[font_class];
        let char_id = split.train_chars[rng.gen_range(0..split.train_chars.len())];
        let others: Vec<usize> = split.train_chars.iter().copied().filter(|&c| c != char_id).collect();
        let ref_chars: Vec<usize> = others.choose_multiple(&mut rng, n_refs.min(others.len())).copied().collect();
        items.push(BatchItem {
            char_id,
            font_id,
            font_class,
            content: data.image(split.base_font, char_id)?.clone(),
            refs: ref_chars.iter().map(|&c| data.image(font_id, c).cloned()).collect::<Result<_>>()?,
            target: data.image(font_id, char_id)?.clone(),
            comp_gt: data.comp_gt(char_id)?.clone(),
            ref_chars,
        });
    }
    Ok(Batch { items })
}
