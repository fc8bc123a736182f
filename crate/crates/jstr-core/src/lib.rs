//! JSTR: a scene-text recognizer that also judges whether an (image, text)
//! pair matches, trained on its own harvested misrecognitions.
//!
//! The crate is organized as a thin stack:
//!
//! * [`tensor`] — dense f32 tensors with reverse-mode autodiff
//! * [`vocab`] — the fixed 41-token character vocabulary
//! * [`render`] — deterministic synthetic word-image generation
//! * [`model`] — patch embedding + causal decoder, greedy decoding, pair scoring
//! * [`data`] — the four training patterns, misrecognition harvesting, mixing
//! * [`train`] — AdamW, warmup/cosine schedule, two-stage training, checkpoints
//! * [`eval`] — word accuracy, judgment metrics, the four-arm ablation runner
//!
//! Data-parallel loops (batch gradients, rendering, harvesting, evaluation)
//! go through [`exec`], which uses rayon when the default `parallel` feature
//! is enabled and plain iterators otherwise. Results are bit-identical in
//! both modes: work is split per sample and reduced in canonical order.

pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod eval;
pub mod exec;
pub mod font;
pub mod lexicon;
pub mod model;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vocab;
