use std::fmt;
use std::str::FromStr;

use super::ops::Activation;
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    EncoderDecoder,
    EncoderOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positional {
    Learned,
    Sinusoidal,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    KaimingUniform,
    Xavier,
}

/// Layer norm placement. Only post-norm is implemented.
pub const POST_NORM: bool = true;

/// Standard deviation of the uniform init used for token and positional
/// embeddings and for an unshared output projection: 0.02, capped at
/// `1 / dim`. After the embedding layer norm a tied output head scores the
/// input token about `dim * std / sqrt(2)` above the rest; the cap keeps that
/// offset below 0.71 so initial logits stay close to uniform at any width.
pub fn embedding_init_std(dim: usize) -> f64 {
    0.02f64.min(1.0 / dim as f64)
}

/// Loop index value meaning "no shared layer".
pub const LOOP_NONE: i64 = -1;
/// Loop index value meaning "the whole stack is iterated".
pub const LOOP_ALL: i64 = -2;

/// Hyper-parameters of one transformer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StackConfig {
    pub n_layers: usize,
    pub emb_dim: usize,
    pub n_heads: usize,
    pub n_hidden_layers: usize,
    pub positional: Positional,
    pub loop_idx: i64,
    pub loops: usize,
}

impl StackConfig {
    pub fn new(n_layers: usize, emb_dim: usize, n_heads: usize) -> Self {
        Self {
            n_layers,
            emb_dim,
            n_heads,
            n_hidden_layers: 1,
            positional: Positional::Learned,
            loop_idx: LOOP_NONE,
            loops: 1,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.emb_dim
    }

    /// Order in which stored layers are applied.
    pub fn schedule(&self) -> Vec<usize> {
        let n = self.n_layers;
        match self.loop_idx {
            LOOP_ALL => (0..self.loops).flat_map(|_| 0..n).collect(),
            k if k >= 0 => {
                let k = k as usize;
                let mut s = Vec::with_capacity(n + self.loops);
                for i in 0..n {
                    if i == k {
                        s.extend(std::iter::repeat(k).take(self.loops));
                    } else {
                        s.push(i);
                    }
                }
                s
            }
            _ => (0..n).collect(),
        }
    }

    fn validate(&self, which: &str) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(format!("{which}: {m}")));
        if self.n_layers == 0 {
            return err("at least one layer is required".into());
        }
        if self.emb_dim == 0 || self.n_heads == 0 || self.emb_dim % self.n_heads != 0 {
            return err(format!(
                "embedding dimension {} must be divisible by the number of heads {}",
                self.emb_dim, self.n_heads
            ));
        }
        if self.positional == Positional::Sinusoidal && self.emb_dim % 2 != 0 {
            return err("sinusoidal embeddings need an even dimension".into());
        }
        if self.n_hidden_layers == 0 {
            return err("feed-forward depth must be at least 1".into());
        }
        if self.loop_idx < LOOP_ALL || self.loop_idx >= self.n_layers as i64 {
            return err(format!("loop index {} out of range", self.loop_idx));
        }
        if self.loop_idx != LOOP_NONE && self.loops == 0 {
            return err("loops must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub encoder: StackConfig,
    /// Ignored by the encoder-only architecture.
    pub decoder: StackConfig,
    pub activation: Activation,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub share_inout_emb: bool,
    pub init: InitScheme,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            architecture: Architecture::EncoderDecoder,
            encoder: StackConfig::new(4, 256, 8),
            decoder: StackConfig::new(4, 256, 8),
            activation: Activation::Relu,
            dropout: 0.0,
            attention_dropout: 0.0,
            share_inout_emb: true,
            init: InitScheme::KaimingUniform,
            max_positions: 512,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate("encoder")?;
        if self.architecture == Architecture::EncoderDecoder {
            self.decoder.validate("decoder")?;
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::Config(format!(
                    "{name} must be in [0, 1), got {p}"
                )));
            }
        }
        if self.vocab_size < 2 {
            return Err(ModelError::Config("vocabulary too small".into()));
        }
        if self.max_positions == 0 {
            return Err(ModelError::Config("max_positions must be positive".into()));
        }
        Ok(())
    }

    /// Whether the output projection reuses the decoder token embedding.
    pub fn shares_output(&self) -> bool {
        self.share_inout_emb && self.architecture == Architecture::EncoderDecoder
    }
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $ty {
            type Err = ModelError;
            fn from_str(s: &str) -> Result<Self, ModelError> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(ModelError::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), s
                    ))),
                }
            }
        }
    };
}

keyword_enum!(Architecture { EncoderDecoder => "encoder_decoder", EncoderOnly => "encoder_only" });
keyword_enum!(Positional { Learned => "learned", Sinusoidal => "sinusoidal", None => "none" });
keyword_enum!(InitScheme { KaimingUniform => "kaiming_uniform", Xavier => "xavier" });
keyword_enum!(Activation { Relu => "relu", Gelu => "gelu" });
