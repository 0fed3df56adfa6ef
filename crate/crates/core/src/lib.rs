//! Few-shot glyph generation with a mixture of heterogeneous-attention experts.
//!
//! The crate is organized bottom-up: [`tensor`] provides a small reverse-mode
//! autodiff engine, [`glyph`] renders a synthetic corpus with known component
//! labels, [`model`] holds the attention blocks, encoder, heads and losses,
//! [`train`] runs the optimizer loop and checkpointing, and [`eval`] scores
//! generated glyphs on the held-out splits.

pub mod ablation;
pub mod error;
pub mod eval;
pub mod glyph;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
