//! Int2Int: transformers trained to translate integer-mathematics problems
//! into their solutions.
//!
//! The crate covers the whole pipeline: tokenizers and the vocabulary,
//! synthetic task generators with exact solvers, the corpus file format and
//! batching, a sequence-to-sequence transformer with hand-written reverse
//! mode gradients, optimizers and the training loop, and the evaluator.

pub mod cli;
pub mod dataset;
pub mod evaluator;
pub mod generators;
pub mod model;
pub mod scalar;
pub mod tokenizer;
pub mod trainer;

pub use scalar::{DType, Scalar};

/// Exact fractions over 64-bit integers.
pub type Fraction = generators::Fraction<i64>;
/// Integer matrices over 64-bit integers.
pub type IntMatrix = generators::IntMatrix<i64>;
/// Double-precision model, the default.
pub type Transformer64 = model::Transformer<f64>;
/// Single-precision model.
pub type Transformer32 = model::Transformer<f32>;
