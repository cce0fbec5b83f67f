//! Desk-scale masked diffusion language modeling.
//!
//! The pipeline runs in five stages, each backed by a module here:
//!
//! 1. [`vocab`] — char/word tokenization with reserved specials, including
//!    the absorbing `<mask>` state and the instruction scaffold markers.
//! 2. [`corpus`] — length filtering, merge/shuffle/sample curation.
//! 3. [`model`] + [`lora`] — a bidirectional encoder with exact hand-written
//!    backprop, plus low-rank adapters over a frozen base.
//! 4. [`diffusion`] + [`trainer`] — absorbing-state corruption, masked
//!    cross-entropy, AdamW with cosine schedule and gradient accumulation.
//! 5. [`generator`] + [`eval`] — blockwise low-confidence-remasking sampling
//!    and pseudo-perplexity.
//!
//! Checkpoints use the binary format in [`checkpoint`] (`MDLM` magic, text
//! header, raw little-endian f32 tensors).

pub mod checkpoint;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod generator;
pub mod lora;
pub mod model;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
