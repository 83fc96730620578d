//! Parallel corpus handling: loading aligned files, Unicode normalization,
//! scripture-citation stripping, filtering, splitting and summary counts.
//!
//! Text is normalized to NFC so that diacritic-bearing characters (the
//! under-dots and tone marks of the Edoid orthographies) have one canonical
//! representation regardless of the keyboard or device that produced them.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Registered language codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LangCode {
    /// Ẹ̀dó
    Bin,
    /// Ésán
    Ish,
    /// Urhobo
    Urh,
    /// Isoko
    Iso,
    /// English
    Eng,
}

impl LangCode {
    pub const ALL: [LangCode; 5] = [LangCode::Bin, LangCode::Ish, LangCode::Urh, LangCode::Iso, LangCode::Eng];

    pub fn code(self) -> &'static str {
        match self {
            LangCode::Bin => "bin",
            LangCode::Ish => "ish",
            LangCode::Urh => "urh",
            LangCode::Iso => "iso",
            LangCode::Eng => "eng",
        }
    }

    /// Human-readable language name, in NFC.
    pub fn display_name(self) -> &'static str {
        match self {
            LangCode::Bin => "\u{1eb8}\u{300}d\u{f3}",
            LangCode::Ish => "\u{c9}s\u{e1}n",
            LangCode::Urh => "Urhobo",
            LangCode::Iso => "Isoko",
            LangCode::Eng => "English",
        }
    }
}

impl fmt::Display for LangCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for LangCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LangCode::ALL.into_iter().find(|l| l.code() == s).ok_or_else(|| Error::UnknownLang(s.to_string()))
    }
}

impl TryFrom<String> for LangCode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LangCode> for String {
    fn from(l: LangCode) -> String {
        l.code().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src: String,
    pub tgt: String,
    /// Ordinal of the pair in the originally loaded corpus.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src_lang: LangCode,
    pub tgt_lang: LangCode,
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(src_lang: LangCode, tgt_lang: LangCode, pairs: Vec<SentencePair>) -> Result<Self> {
        if src_lang == tgt_lang {
            return Err(Error::Invalid(format!("source and target language are both {src_lang}")));
        }
        if pairs.windows(2).any(|w| w[0].index >= w[1].index) {
            return Err(Error::Invalid("pair indices must be strictly increasing".into()));
        }
        Ok(ParallelCorpus { src_lang, tgt_lang, pairs })
    }

    /// Builds a corpus from in-memory sentence pairs, numbering them from 0.
    pub fn from_pairs<S: Into<String>, T: Into<String>>(
        src_lang: LangCode,
        tgt_lang: LangCode,
        pairs: impl IntoIterator<Item = (S, T)>,
    ) -> Result<Self> {
        let pairs = pairs
            .into_iter()
            .enumerate()
            .map(|(index, (src, tgt))| SentencePair { src: src.into(), tgt: tgt.into(), index })
            .collect();
        ParallelCorpus::new(src_lang, tgt_lang, pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Applies `f` to both sides of every pair.
    pub fn map_text(&self, f: impl Fn(&str) -> String) -> ParallelCorpus {
        ParallelCorpus {
            src_lang: self.src_lang,
            tgt_lang: self.tgt_lang,
            pairs: self.pairs.iter().map(|p| SentencePair { src: f(&p.src), tgt: f(&p.tgt), index: p.index }).collect(),
        }
    }

    pub fn normalize(&self, policy: &NormalizationPolicy) -> ParallelCorpus {
        self.map_text(|s| normalize_text(s, policy))
    }

    pub fn strip_verses(&self) -> ParallelCorpus {
        self.map_text(strip_verse_annotations)
    }

    fn with_pairs(&self, pairs: Vec<SentencePair>) -> ParallelCorpus {
        ParallelCorpus { src_lang: self.src_lang, tgt_lang: self.tgt_lang, pairs }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix(b"\r").unwrap_or(line);
            std::str::from_utf8(line).map(str::to_owned).map_err(|_| Error::Decode { path: path.to_path_buf(), line: i + 1 })
        })
        .collect()
}

/// Loads a sentence-aligned pair of files: line `i` of each forms pair `i`.
pub fn load_parallel(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
    src_lang: LangCode,
    tgt_lang: LangCode,
) -> Result<ParallelCorpus> {
    let src = read_lines(src_path.as_ref())?;
    let tgt = read_lines(tgt_path.as_ref())?;
    if src.len() != tgt.len() {
        return Err(Error::Alignment { src_lines: src.len(), tgt_lines: tgt.len() });
    }
    ParallelCorpus::from_pairs(src_lang, tgt_lang, src.into_iter().zip(tgt))
}

/// Loads `src<TAB>tgt` lines.
pub fn load_tsv(path: impl AsRef<Path>, src_lang: LangCode, tgt_lang: LangCode) -> Result<ParallelCorpus> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let mut pairs = Vec::with_capacity(lines.len());
    for (i, line) in lines.into_iter().enumerate() {
        let (src, tgt) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected a TAB between source and target".into(),
        })?;
        pairs.push((src.to_string(), tgt.to_string()));
    }
    ParallelCorpus::from_pairs(src_lang, tgt_lang, pairs)
}

/// Writes the corpus back as two line-aligned files.
pub fn write_parallel(corpus: &ParallelCorpus, src_path: impl AsRef<Path>, tgt_path: impl AsRef<Path>) -> Result<()> {
    write_lines(src_path.as_ref(), corpus.pairs.iter().map(|p| p.src.as_str()))?;
    write_lines(tgt_path.as_ref(), corpus.pairs.iter().map(|p| p.tgt.as_str()))
}

pub fn write_lines<'a>(path: &Path, lines: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut out = Vec::new();
    for line in lines {
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationPolicy {
    /// Case folding loses nothing for English but is off by default.
    #[serde(default)]
    pub lowercase: bool,
}

/// NFC, optional lowercasing, whitespace runs collapsed to one space and trimmed.
pub fn normalize_text(s: &str, policy: &NormalizationPolicy) -> String {
    let mut text: String = s.nfc().collect();
    if policy.lowercase {
        text = text.to_lowercase().nfc().collect();
    }
    collapse_whitespace(&text)
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn verse_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let book = r"[\p{L}\p{M}\p{N}'’.\-]*\p{L}[\p{L}\p{M}\p{N}'’.\-]*";
        let range = r"\d+(?:\s*[-–]\s*\d+)?";
        let verses = format!(r"\d+\s*:\s*{range}(?:\s*,\s*{range})*");
        let books = format!(r"(?:\d+\s+)?(?:{book}\s+)+");
        let pat = format!(r"\(\s*{books}{verses}(?:\s*;\s*(?:{books})?{verses})*\s*\)");
        Regex::new(&pat).expect("verse pattern compiles")
    })
}

/// Deletes parenthesized scripture citations such as `( 1 Pita 3 : 1 )` or
/// `( Jọn 3 : 16 , 17 )`, then re-collapses whitespace.
///
/// Deletion is repeated until nothing matches, so nested citations that only
/// become well-formed after an inner deletion are removed as well.
pub fn strip_verse_annotations(s: &str) -> String {
    let pattern = verse_pattern();
    let mut text = s.to_string();
    while pattern.is_match(&text) {
        text = collapse_whitespace(&pattern.replace_all(&text, " "));
    }
    text
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    /// Maximum whitespace tokens on either side.
    pub max_tokens: usize,
    /// Upper bound on longer/shorter token-count ratio.
    pub max_ratio: f64,
    pub dedup: bool,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules { max_tokens: 100, max_ratio: 9.0, dedup: true }
    }
}

/// How many pairs each rule removed. A pair is charged to the first rule it violates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub empty: usize,
    pub too_long: usize,
    pub ratio: usize,
    pub duplicate: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.empty + self.too_long + self.ratio + self.duplicate
    }
}

impl fmt::Display for DropCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "empty={}", self.empty)?;
        writeln!(f, "too_long={}", self.too_long)?;
        writeln!(f, "ratio={}", self.ratio)?;
        writeln!(f, "duplicate={}", self.duplicate)?;
        writeln!(f, "total={}", self.total())
    }
}

pub fn filter_pairs(corpus: &ParallelCorpus, rules: &FilterRules) -> (ParallelCorpus, DropCounts) {
    let mut counts = DropCounts::default();
    let mut seen: HashMap<(&str, &str), ()> = HashMap::new();
    let mut kept = Vec::with_capacity(corpus.len());
    for pair in &corpus.pairs {
        let ls = pair.src.split_whitespace().count();
        let lt = pair.tgt.split_whitespace().count();
        if ls == 0 || lt == 0 {
            counts.empty += 1;
        } else if ls > rules.max_tokens || lt > rules.max_tokens {
            counts.too_long += 1;
        } else if ls.max(lt) as f64 > rules.max_ratio * ls.min(lt) as f64 {
            counts.ratio += 1;
        } else if rules.dedup && seen.insert((&pair.src, &pair.tgt), ()).is_some() {
            counts.duplicate += 1;
        } else {
            kept.push(pair.clone());
        }
    }
    (corpus.with_pairs(kept), counts)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Whitespace tokens on the target side.
    pub tokens: usize,
    pub sentences: usize,
}

pub fn corpus_stats(corpus: &ParallelCorpus) -> CorpusStats {
    CorpusStats { tokens: corpus.pairs.iter().map(|p| p.tgt.split_whitespace().count()).sum(), sentences: corpus.len() }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

/// Random held-out split. Identical (src, tgt) pairs always land in the same
/// partition so that dev/test never leak into train. Each partition keeps the
/// original corpus order.
pub fn split_corpus(corpus: &ParallelCorpus, dev_size: usize, test_size: usize, seed: u64) -> Result<Split> {
    let n = corpus.len();
    if dev_size + test_size >= n {
        return Err(Error::SplitTooLarge { required: dev_size + test_size + 1, available: n });
    }

    let mut group_of: HashMap<(&str, &str), usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (pos, pair) in corpus.pairs.iter().enumerate() {
        let next = groups.len();
        let g = *group_of.entry((&pair.src, &pair.tgt)).or_insert(next);
        if g == next {
            groups.push(Vec::new());
        }
        groups[g].push(pos);
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut assigned = vec![false; groups.len()];
    let mut take = |want: usize, name: &str| -> Result<Vec<usize>> {
        let mut picked = Vec::new();
        for &g in &order {
            if picked.len() == want {
                break;
            }
            if !assigned[g] && picked.len() + groups[g].len() <= want {
                assigned[g] = true;
                picked.extend_from_slice(&groups[g]);
            }
        }
        if picked.len() != want {
            return Err(Error::Invalid(format!("cannot fill a {name} split of {want} pairs without separating duplicates")));
        }
        picked.sort_unstable();
        Ok(picked)
    };
    let dev = take(dev_size, "dev")?;
    let test = take(test_size, "test")?;
    let mut train: Vec<usize> = order.iter().filter(|&&g| !assigned[g]).flat_map(|&g| groups[g].iter().copied()).collect();
    train.sort_unstable();

    let gather = |idx: &[usize]| corpus.with_pairs(idx.iter().map(|&i| corpus.pairs[i].clone()).collect());
    Ok(Split { train: gather(&train), dev: gather(&dev), test: gather(&test) })
}
