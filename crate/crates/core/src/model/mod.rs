//! Transformer encoder-decoder: parameters, forward pass with cached
//! activations, exact reverse-mode gradients, label-smoothed loss and
//! checkpoints.

mod checkpoint;
mod loss;
mod ops;
mod params;
mod transformer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use loss::{label_smoothed_ce, label_smoothed_ce_grad};
pub use ops::{attention_weights, multi_head_attention, positional_encoding, scaled_dot_attention};
pub use params::{
    Attention, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, ParamVisit, Projection, TransformerParams,
};
pub use transformer::{backward, decode_logits, encode, forward_logits, forward_train, ForwardCache, Memory, SeqBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Depth of both the encoder and the decoder. Zero gives a bare
    /// embedding → norm → projection model.
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Reuse the target embedding as the output projection.
    #[serde(default)]
    pub tie_output: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Tiny,
    PaperIsh,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "paper-ish" => Ok(Preset::PaperIsh),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl TransformerConfig {
    pub fn preset(preset: Preset, src_vocab: usize, tgt_vocab: usize) -> Self {
        let (d_model, n_heads, n_layers, d_ff, dropout, max_len) = match preset {
            Preset::Tiny => (64, 4, 2, 256, 0.1, 64),
            Preset::PaperIsh => (256, 4, 6, 1024, 0.3, 100),
        };
        TransformerConfig { d_model, n_heads, n_layers, d_ff, dropout, max_len, src_vocab, tgt_vocab, tie_output: false }
    }

    pub fn tiny(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self::preset(Preset::Tiny, src_vocab, tgt_vocab)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config(format!("d_model {} must be even", self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
