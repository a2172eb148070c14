//! Core library for the Phantom architecture: a decoder-only transformer whose
//! attention temporarily doubles its latent dimension with features derived
//! from the start-of-sequence token ("phantom dimension"), trained with a
//! two-step schedule that combines supervised fine-tuning with a
//! reference-free preference objective ("phantom optimization").
//!
//! The crate is self-contained and deterministic: all math runs in `f64` on
//! the CPU, gradients come from a reverse-mode tape, and every random choice
//! flows from an explicit seed.
//!
//! Layout:
//! - [`tensor`]: dense tensors, the autodiff tape, and a finite-difference
//!   gradient checker.
//! - [`attention`]: grouped-query causal self-attention with rotary positions.
//! - [`phantom`]: the phantom-dimension attention path (starred-feature
//!   extraction, single-token cross-attention expansion, doubled-width
//!   attention, gated compression).
//! - [`model`]: model configuration, presets, the parameter store, and the
//!   full forward pass.
//! - [`checkpoint`]: the binary named-tensor checkpoint format.
//! - [`data`]: preference triples, the byte tokenizer, synthetic corpus
//!   generation, and batch collation.
//! - [`loss`]: the combined SFT + preference objective.
//! - [`train`]: AdamW, cosine schedule, the two-step driver, and the ablation
//!   matrix runner.
//! - [`infer`]: KV-cached incremental decoding, beam search, and a small
//!   throughput harness.

pub mod attention;
pub mod checkpoint;
pub mod data;
mod error;
pub mod infer;
pub mod loss;
pub mod model;
pub mod phantom;
pub mod tensor;
pub mod train;

pub use error::{PhantomError, Result};
pub use tensor::{Tape, Tensor};
