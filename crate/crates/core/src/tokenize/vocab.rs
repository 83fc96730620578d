use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Bijective token/id map. Ids `0..4` are the reserved special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_of: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut token_of: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        token_of.extend(tokens.into_iter().map(Into::into));
        let mut id_of = HashMap::with_capacity(token_of.len());
        for (id, tok) in token_of.iter().enumerate() {
            if tok.is_empty() || tok.contains('\n') {
                return Err(Error::Invalid(format!("vocabulary token {id} is empty or multi-line")));
            }
            if id_of.insert(tok.clone(), id).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary { token_of, id_of })
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.id_of.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_of.contains_key(token)
    }

    pub fn token_of(&self, id: usize) -> Result<&str> {
        self.token_of.get(id).map(String::as_str).ok_or(Error::IdOutOfRange { id, size: self.len() })
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.token_of {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 4 || lines[..4] != SPECIALS {
            return Err(Error::Invalid("vocabulary must start with <pad>, <unk>, <bos>, <eos>".into()));
        }
        Vocabulary::from_tokens(lines[4..].iter().copied())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_text(&text)
    }
}

/// Keeps tokens seen at least `min_freq` times, most frequent first with
/// lexicographic tie-break. `max_size` bounds the total size including the
/// four specials.
pub fn build_vocab<S: AsRef<str>>(
    tokens: impl IntoIterator<Item = S>,
    min_freq: usize,
    max_size: Option<usize>,
) -> Result<Vocabulary> {
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for t in tokens {
        let t = t.as_ref();
        if !SPECIALS.contains(&t) {
            *freq.entry(t.to_string()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(max) = max_size {
        ranked.truncate(max.saturating_sub(SPECIALS.len()));
    }
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

pub fn encode_ids<S: AsRef<str>>(vocab: &Vocabulary, tokens: &[S]) -> Vec<usize> {
    tokens.iter().map(|t| vocab.id_of(t.as_ref())).collect()
}

pub fn decode_ids(vocab: &Vocabulary, ids: &[usize]) -> Result<Vec<String>> {
    ids.iter().map(|&id| vocab.token_of(id).map(str::to_string)).collect()
}
