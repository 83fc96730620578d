//! Low-resource neural machine translation workbench: corpus cleaning,
//! word and BPE tokenization, a Transformer encoder-decoder with exact
//! reverse-mode gradients, beam decoding and corpus BLEU.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
