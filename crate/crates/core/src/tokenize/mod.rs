//! Word-level and BPE subword tokenization plus vocabularies.

mod bpe;
mod vocab;

pub use bpe::{bpe_decode, bpe_encode, learn_bpe, learn_bpe_with_marker, BpeModel, DEFAULT_EOW};
pub use vocab::{build_vocab, decode_ids, encode_ids, Vocabulary, BOS_ID, EOS_ID, PAD_ID, SPECIALS, UNK_ID};

/// Splits normalized text on whitespace. JW300 text already has punctuation
/// space-separated, so punctuation comes out as its own tokens.
pub fn word_tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_split() {
        assert_eq!(word_tokenize("Ghele na , eme unu - uwou"), vec!["Ghele", "na", ",", "eme", "unu", "-", "uwou"]);
        assert!(word_tokenize("").is_empty());
        assert_eq!(word_tokenize("a  b"), vec!["a", "b"]);
    }
}
