//! Byte-pair-encoding subword codec over Unicode scalar values.
//!
//! Each word is split into characters followed by a separate end-of-word
//! symbol, and learned merges are applied in rank order. Any literal
//! occurrence of the end-of-word marker inside raw text is escaped first so
//! that decoding is an exact inverse.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_EOW: &str = "</w>";
const ESCAPE: char = '\\';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    eow: String,
    /// Merges requested at training time; larger than `num_merges()` when
    /// the corpus ran out of pairs occurring at least twice.
    requested: usize,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>, eow: impl Into<String>) -> Result<Self> {
        let eow = eow.into();
        check_marker(&eow)?;
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, pair) in merges.iter().enumerate() {
            if pair.0.is_empty() || pair.1.is_empty() {
                return Err(Error::Invalid(format!("merge {rank} has an empty symbol")));
            }
            if ranks.insert(pair.clone(), rank).is_some() {
                return Err(Error::Invalid(format!("duplicate merge ({}, {}) at rank {rank}", pair.0, pair.1)));
            }
        }
        Ok(BpeModel { requested: merges.len(), merges, eow, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn eow(&self) -> &str {
        &self.eow
    }

    pub fn requested_merges(&self) -> usize {
        self.requested
    }

    /// True when learning stopped before the requested number of merges.
    pub fn stopped_early(&self) -> bool {
        self.requested > self.merges.len()
    }

    /// Segments a single word (no whitespace) into subwords.
    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let mut symbols = initial_symbols(&escape(word, &self.eow), &self.eow);
        loop {
            let best = symbols.windows(2).filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone()))).min().copied();
            let Some(rank) = best else { break };
            let (left, right) = &self.merges[rank];
            symbols = merge_symbols(&symbols, left, right);
        }
        symbols
    }

    pub fn encode(&self, s: &str) -> Vec<String> {
        let mut cache: HashMap<&str, Vec<String>> = HashMap::new();
        let mut out = Vec::new();
        for word in s.split_whitespace() {
            let pieces = cache.entry(word).or_insert_with(|| self.encode_word(word));
            out.extend(pieces.iter().cloned());
        }
        out
    }

    pub fn decode<S: AsRef<str>>(&self, tokens: &[S]) -> String {
        decode_with_marker(tokens, &self.eow)
    }

    /// Serializes to the line format `#bpe v1 eow=<marker>` followed by one
    /// `left right` merge per line in rank order.
    pub fn to_text(&self) -> String {
        let mut out = format!("#bpe v1 eow={}\n", self.eow);
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let eow = header.strip_prefix("#bpe v1 eow=").ok_or_else(|| Error::Invalid(format!("bad BPE header {header:?}")))?;
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => merges.push((l.to_string(), r.to_string())),
                _ => return Err(Error::Invalid(format!("BPE merge line {} is not `left right`: {line:?}", i + 2))),
            }
        }
        BpeModel::new(merges, eow)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        BpeModel::from_text(&text)
    }
}

fn check_marker(eow: &str) -> Result<()> {
    let chars: Vec<char> = eow.chars().collect();
    let ok = chars.len() >= 2
        && !chars.iter().any(|c| c.is_whitespace() || *c == ESCAPE)
        && (1..chars.len()).all(|k| chars[..k] != chars[chars.len() - k..]);
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "end-of-word marker {eow:?} must be at least two characters, \
             free of whitespace and backslashes, and not overlap itself"
        )))
    }
}

/// The escaped form of the marker: a backslash inserted after its first character.
fn escaped_marker(eow: &str) -> String {
    let mut chars = eow.chars();
    let first = chars.next().expect("marker is non-empty");
    format!("{first}{ESCAPE}{}", chars.as_str())
}

fn escape(word: &str, eow: &str) -> String {
    if !word.contains(ESCAPE) && !word.contains(eow) {
        return word.to_string();
    }
    word.replace(ESCAPE, "\\\\").replace(eow, &escaped_marker(eow))
}

fn unescape(word: &str, eow: &str) -> String {
    if !word.contains(ESCAPE) {
        return word.to_string();
    }
    let marker = escaped_marker(eow);
    let mut out = String::with_capacity(word.len());
    let mut rest = word;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with("\\\\") {
            out.push(ESCAPE);
            rest = &rest[2..];
        } else if rest.starts_with(&marker) {
            out.push_str(eow);
            rest = &rest[marker.len()..];
        } else {
            out.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    out
}

fn initial_symbols(word: &str, eow: &str) -> Vec<String> {
    word.chars().map(String::from).chain(std::iter::once(eow.to_string())).collect()
}

fn merge_symbols(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Inverse of [`BpeModel::encode`] for the default `</w>` marker.
pub fn bpe_decode<S: AsRef<str>>(tokens: &[S]) -> String {
    decode_with_marker(tokens, DEFAULT_EOW)
}

fn decode_with_marker<S: AsRef<str>>(tokens: &[S], eow: &str) -> String {
    let joined: String = tokens.iter().map(AsRef::as_ref).collect();
    joined.split(eow).filter(|w| !w.is_empty()).map(|w| unescape(w, eow)).collect::<Vec<_>>().join(" ")
}

pub fn bpe_encode(model: &BpeModel, s: &str) -> Vec<String> {
    model.encode(s)
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for Candidate {
    // Highest count first; ties go to the lexicographically smallest pair.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| other.left.cmp(&self.left)).then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Learner {
    symbols: Vec<String>,
    symbol_ids: HashMap<String, u32>,
    words: Vec<(Vec<u32>, i64)>,
    pair_counts: HashMap<(u32, u32), i64>,
    pair_words: HashMap<(u32, u32), HashSet<usize>>,
}

impl Learner {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.symbol_ids.get(s) {
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(s.to_string());
        self.symbol_ids.insert(s.to_string(), id);
        id
    }

    fn candidate(&self, pair: (u32, u32), count: i64) -> Candidate {
        Candidate { count, left: self.symbols[pair.0 as usize].clone(), right: self.symbols[pair.1 as usize].clone(), pair }
    }

    fn add_word_pairs(&mut self, w: usize, sign: i64, delta: &mut HashMap<(u32, u32), i64>) {
        let (syms, count) = &self.words[w];
        for p in syms.windows(2).map(|p| (p[0], p[1])) {
            *self.pair_counts.entry(p).or_insert(0) += sign * count;
            *delta.entry(p).or_insert(0) += sign * count;
            if sign > 0 {
                self.pair_words.entry(p).or_default().insert(w);
            } else if let Some(set) = self.pair_words.get_mut(&p) {
                set.remove(&w);
            }
        }
    }
}

/// Learns up to `num_merges` merges from a stream of words.
///
/// Each step merges the most frequent adjacent symbol pair (ties broken by
/// the lexicographically smallest `(left, right)`), stopping early once no
/// pair occurs at least twice.
pub fn learn_bpe<S: AsRef<str>>(words: impl IntoIterator<Item = S>, num_merges: usize) -> BpeModel {
    learn_bpe_with_marker(words, num_merges, DEFAULT_EOW).expect("default marker is valid")
}

pub fn learn_bpe_with_marker<S: AsRef<str>>(
    words: impl IntoIterator<Item = S>,
    num_merges: usize,
    eow: &str,
) -> Result<BpeModel> {
    check_marker(eow)?;
    let mut freq: HashMap<String, i64> = HashMap::new();
    for w in words {
        for part in w.as_ref().split_whitespace() {
            *freq.entry(escape(part, eow)).or_insert(0) += 1;
        }
    }
    let mut types: Vec<(String, i64)> = freq.into_iter().collect();
    types.sort();

    let mut learner = Learner {
        symbols: Vec::new(),
        symbol_ids: HashMap::new(),
        words: Vec::with_capacity(types.len()),
        pair_counts: HashMap::new(),
        pair_words: HashMap::new(),
    };
    for (word, count) in &types {
        let syms = initial_symbols(word, eow).iter().map(|s| learner.intern(s)).collect();
        learner.words.push((syms, *count));
    }
    let mut scratch = HashMap::new();
    for w in 0..learner.words.len() {
        learner.add_word_pairs(w, 1, &mut scratch);
    }

    let mut heap: BinaryHeap<Candidate> = learner.pair_counts.iter().map(|(&p, &c)| learner.candidate(p, c)).collect();

    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let Some(top) = heap.pop() else { break };
        let current = learner.pair_counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count {
            if current > 0 {
                heap.push(learner.candidate(top.pair, current));
            }
            continue;
        }
        if current < 2 {
            break;
        }

        let merged = format!("{}{}", top.left, top.right);
        let merged_id = learner.intern(&merged);
        let mut affected: Vec<usize> = learner.pair_words.get(&top.pair).map(|s| s.iter().copied().collect()).unwrap_or_default();
        affected.sort_unstable();

        let mut delta: HashMap<(u32, u32), i64> = HashMap::new();
        for w in affected {
            learner.add_word_pairs(w, -1, &mut delta);
            let syms = &learner.words[w].0;
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == top.pair {
                    next.push(merged_id);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            learner.words[w].0 = next;
            learner.add_word_pairs(w, 1, &mut delta);
        }
        learner.pair_counts.retain(|_, c| *c > 0);
        for (p, d) in delta {
            if d > 0 {
                if let Some(&c) = learner.pair_counts.get(&p) {
                    heap.push(learner.candidate(p, c));
                }
            }
        }
        merges.push((top.left, top.right));
    }

    let mut model = BpeModel::new(merges, eow)?;
    model.requested = num_merges;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_words() -> Vec<&'static str> {
        let mut w = vec!["ab"; 3];
        w.extend(["abc"; 2]);
        w
    }

    /// Brute-force learner: recount every pair from scratch at each step.
    fn naive_learn(words: &[&str], num_merges: usize) -> Vec<(String, String)> {
        let mut segs: Vec<Vec<String>> = words.iter().map(|w| initial_symbols(w, DEFAULT_EOW)).collect();
        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut counts: HashMap<(String, String), usize> = HashMap::new();
            for s in &segs {
                for p in s.windows(2) {
                    *counts.entry((p[0].clone(), p[1].clone())).or_default() += 1;
                }
            }
            let best = counts.into_iter().filter(|(_, c)| *c >= 2).max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((l, r), _)) = best else { break };
            segs = segs.iter().map(|s| merge_symbols(s, &l, &r)).collect();
            merges.push((l, r));
        }
        merges
    }

    #[test]
    fn toy_corpus_merges() {
        let m = learn_bpe(toy_words(), 2);
        let expected = vec![("a".to_string(), "b".to_string()), ("ab".to_string(), "</w>".to_string())];
        assert_eq!(m.merges(), expected.as_slice());
        assert_eq!(naive_learn(&toy_words(), 2), expected);
        assert_eq!(m.encode("ab"), vec!["ab</w>"]);
        assert_eq!(m.encode("abc"), vec!["ab", "c", "</w>"]);
    }

    #[test]
    fn zero_merges_is_character_split() {
        let m = learn_bpe(toy_words(), 0);
        assert_eq!(m.num_merges(), 0);
        assert_eq!(m.encode("ab"), vec!["a", "b", "</w>"]);
    }

    #[test]
    fn early_stop_is_recorded() {
        let m = learn_bpe(["xy"], 10);
        assert_eq!(m.num_merges(), 0);
        assert!(m.stopped_early());
        let m = learn_bpe(toy_words(), 2);
        assert!(!m.stopped_early());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(bpe_decode(&["ab</w>"]), "ab");
        assert_eq!(bpe_decode(&["ab", "c", "</w>"]), "abc");
        assert_eq!(bpe_decode::<&str>(&[]), "");
    }

    #[test]
    fn literal_marker_in_text_round_trips() {
        let m = learn_bpe(["a</w>b a</w>b x\\y"], 20);
        for s in ["a</w>b", "</w>", "\\</w>", "<\\/w>", "x\\\\y </w></w>"] {
            assert_eq!(m.decode(&m.encode(s)), s, "{s}");
        }
    }

    #[test]
    fn model_file_round_trip() {
        let m = learn_bpe(toy_words(), 2);
        let text = m.to_text();
        assert_eq!(text, "#bpe v1 eow=</w>\na b\nab </w>\n");
        assert_eq!(BpeModel::from_text(&text).unwrap().merges(), m.merges());
        assert!(BpeModel::from_text("#bpe v2\n").is_err());
        assert!(BpeModel::from_text("#bpe v1 eow=</w>\na b\na b\n").is_err());
        assert!(BpeModel::from_text("#bpe v1 eow=</w>\nabc\n").is_err());
    }

    #[test]
    fn rejects_bad_markers() {
        assert!(BpeModel::new(vec![], "aa").is_err());
        assert!(BpeModel::new(vec![], "a\\b").is_err());
        assert!(BpeModel::new(vec![], "@@").is_err());
        assert!(BpeModel::new(vec![], "<eow>").is_ok());
    }

    proptest! {
        #[test]
        fn heap_learner_matches_naive(words in prop::collection::vec("[abc]{1,5}", 1..25), k in 0usize..12) {
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let fast = learn_bpe(refs.iter().copied(), k);
            prop_assert_eq!(fast.merges().to_vec(), naive_learn(&refs, k));
        }

        #[test]
        fn encode_decode_round_trip(
            corpus in prop::collection::vec("[a-dẹọ<>/w\\\\]{1,6}", 1..20),
            line in prop::collection::vec("[a-eẹọ<>/w\\\\]{1,6}", 0..6),
            k in 0usize..30,
        ) {
            let model = learn_bpe(corpus.iter(), k);
            let s = line.join(" ");
            prop_assert_eq!(model.decode(&model.encode(&s)), s);
        }
    }
}
