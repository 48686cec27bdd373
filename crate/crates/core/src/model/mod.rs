//! Transformer encoder/decoder with hand-written reverse-mode gradients.

pub mod config;
pub mod ops;
pub mod params;
pub mod transformer;

use thiserror::Error;

pub use config::{Architecture, InitScheme, ModelConfig, Positional, StackConfig};
pub use ops::Activation;
pub use params::{Init, ParamId, ParamMeta, ParamStore};
pub use transformer::{DecodeState, Encoded, LossStats, Transformer};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("position {position} exceeds max_positions {max_positions}")]
    PositionOverflow {
        position: usize,
        max_positions: usize,
    },
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(u32),
    #[error("output of {output} tokens does not fit an input of {input} tokens")]
    OutputTooLong { output: usize, input: usize },
    #[error("{0}")]
    Unsupported(String),
}
