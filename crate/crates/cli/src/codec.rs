//! Text ↔ id conversion for one experiment, stored alongside the model.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use nmtforge::metrics::Tokenization;
use nmtforge::model::Checkpoint;
use nmtforge::tokenize::{build_vocab, decode_ids, encode_ids, learn_bpe, word_tokenize, BpeModel, Vocabulary, EOS_ID};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct Codec {
    pub mode: Tokenization,
    pub src_bpe: Option<BpeModel>,
    pub tgt_bpe: Option<BpeModel>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    mode: Tokenization,
    src_bpe: Option<String>,
    tgt_bpe: Option<String>,
    src_vocab: String,
    tgt_vocab: String,
}

fn split(bpe: Option<&BpeModel>, s: &str) -> Vec<String> {
    match bpe {
        Some(m) => m.encode(s),
        None => word_tokenize(s),
    }
}

impl Codec {
    /// Learns BPE (when `mode` is bpe) and both vocabularies from training text.
    pub fn learn(
        mode: Tokenization,
        merges: usize,
        joint: bool,
        src: &[String],
        tgt: &[String],
        min_freq: usize,
        max_size: Option<usize>,
    ) -> Result<Codec> {
        let (src_bpe, tgt_bpe) = match mode {
            Tokenization::Word => (None, None),
            Tokenization::Bpe if joint => {
                let m = learn_bpe(src.iter().chain(tgt), merges);
                (Some(m.clone()), Some(m))
            }
            Tokenization::Bpe => (Some(learn_bpe(src, merges)), Some(learn_bpe(tgt, merges))),
        };
        let src_tokens: Vec<String> = src.iter().flat_map(|s| split(src_bpe.as_ref(), s)).collect();
        let tgt_tokens: Vec<String> = tgt.iter().flat_map(|s| split(tgt_bpe.as_ref(), s)).collect();
        Ok(Codec {
            mode,
            src_vocab: build_vocab(&src_tokens, min_freq, max_size)?,
            tgt_vocab: build_vocab(&tgt_tokens, min_freq, max_size)?,
            src_bpe,
            tgt_bpe,
        })
    }

    pub fn src_tokens(&self, s: &str) -> Vec<String> {
        split(self.src_bpe.as_ref(), s)
    }

    pub fn tgt_tokens(&self, s: &str) -> Vec<String> {
        split(self.tgt_bpe.as_ref(), s)
    }

    /// Source ids with the trailing EOS, truncated to fit `max_len`.
    pub fn encode_src(&self, s: &str, max_len: usize) -> Vec<usize> {
        let mut ids = encode_ids(&self.src_vocab, &self.src_tokens(s));
        ids.truncate(max_len.saturating_sub(1));
        ids.push(EOS_ID);
        ids
    }

    pub fn encode_tgt(&self, s: &str) -> Vec<usize> {
        encode_ids(&self.tgt_vocab, &self.tgt_tokens(s))
    }

    /// Target ids (no BOS/EOS) back to text.
    pub fn decode_tgt(&self, ids: &[usize]) -> Result<String> {
        let tokens = decode_ids(&self.tgt_vocab, ids)?;
        Ok(match &self.tgt_bpe {
            Some(m) => m.decode(&tokens),
            None => tokens.join(" "),
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(Stored {
            mode: self.mode,
            src_bpe: self.src_bpe.as_ref().map(BpeModel::to_text),
            tgt_bpe: self.tgt_bpe.as_ref().map(BpeModel::to_text),
            src_vocab: self.src_vocab.to_text(),
            tgt_vocab: self.tgt_vocab.to_text(),
        })
        .expect("codec serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Codec> {
        let s: Stored = serde_json::from_value(v.clone())?;
        let bpe = |t: Option<String>| t.map(|t| BpeModel::from_text(&t)).transpose();
        Ok(Codec {
            mode: s.mode,
            src_bpe: bpe(s.src_bpe)?,
            tgt_bpe: bpe(s.tgt_bpe)?,
            src_vocab: Vocabulary::from_text(&s.src_vocab)?,
            tgt_vocab: Vocabulary::from_text(&s.tgt_vocab)?,
        })
    }

    /// Writes the BPE model(s) and vocabularies as standalone files.
    pub fn save_files(&self, dir: &Path) -> Result<()> {
        match (&self.src_bpe, &self.tgt_bpe) {
            (Some(a), Some(b)) if a.merges() == b.merges() => a.save(dir.join("bpe.model"))?,
            (Some(a), Some(b)) => {
                a.save(dir.join("bpe.src.model"))?;
                b.save(dir.join("bpe.tgt.model"))?;
            }
            _ => {}
        }
        self.src_vocab.save(dir.join("vocab.src"))?;
        self.tgt_vocab.save(dir.join("vocab.tgt"))?;
        Ok(())
    }

    pub fn attach(&self, ck: &mut Checkpoint) {
        if !ck.meta.is_object() {
            ck.meta = serde_json::json!({});
        }
        ck.meta["codec"] = self.to_json();
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Codec> {
        let v = ck.meta.get("codec").ok_or_else(|| anyhow!("checkpoint carries no tokenizer data"))?;
        Codec::from_json(v).context("reading tokenizer data from checkpoint")
    }
}
