//! Corpus BLEU and the BPE-versus-word comparison table.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;

use crate::corpus::{CorpusStats, LangCode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    #[default]
    None,
    /// An order with no matches counts as 0.1 matches instead of 0.
    Floor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Score in `[0, 100]`.
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    /// In `(0, 1]`, or 0 for an empty hypothesis side.
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU-4 with one reference per hypothesis: clipped n-gram
/// counts are summed over the corpus before the geometric mean, and the
/// brevity penalty uses total lengths.
pub fn bleu_corpus<H, R>(hyps: &[H], refs: &[R], smoothing: Smoothing) -> Result<BleuReport>
where
    H: AsRef<[String]>,
    R: AsRef<[String]>,
{
    if hyps.is_empty() {
        return Err(Error::Invalid("BLEU needs at least one sentence".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Shape { context: "bleu corpus", expected: refs.len().to_string(), got: hyps.len().to_string() });
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if hyp_len == 0 {
        0.0
    } else {
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 0..4 {
            let p = match smoothing {
                Smoothing::None => precisions[n],
                Smoothing::Floor if matches[n] == 0 => 0.1 / totals[n].max(1) as f64,
                Smoothing::Floor => precisions[n],
            };
            if p == 0.0 {
                zero = true;
                break;
            }
            log_sum += p.ln();
        }
        if zero {
            0.0
        } else {
            100.0 * brevity_penalty * (log_sum / 4.0).exp()
        }
    };
    Ok(BleuReport { bleu, precisions, matches, totals, brevity_penalty, hyp_len, ref_len })
}

/// Whitespace-tokenises detokenised strings before scoring.
pub fn bleu_strings(hyps: &[String], refs: &[String], smoothing: Smoothing) -> Result<BleuReport> {
    let split =
        |v: &[String]| -> Vec<Vec<String>> { v.iter().map(|s| s.split_whitespace().map(str::to_string).collect()).collect() };
    bleu_corpus(&split(hyps), &split(refs), smoothing)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenization {
    Bpe,
    Word,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Dev,
    Test,
}

impl fmt::Display for Tokenization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tokenization::Bpe => "bpe",
            Tokenization::Word => "word",
        })
    }
}

impl FromStr for Tokenization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpe" => Ok(Tokenization::Bpe),
            "word" => Ok(Tokenization::Word),
            other => Err(Error::Config(format!("unknown tokenization {other:?} (expected bpe or word)"))),
        }
    }
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSplit::Dev => "dev",
            EvalSplit::Test => "test",
        })
    }
}

impl FromStr for EvalSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dev" => Ok(EvalSplit::Dev),
            "test" => Ok(EvalSplit::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected dev or test)"))),
        }
    }
}

/// One line of the BLEU log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuRecord {
    pub language: LangCode,
    pub tokenization: Tokenization,
    pub split: EvalSplit,
    pub bleu: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuRecord {
    pub fn new(language: LangCode, tokenization: Tokenization, split: EvalSplit, r: &BleuReport) -> Self {
        let [p1, p2, p3, p4] = r.precisions;
        BleuRecord {
            language,
            tokenization,
            split,
            bleu: r.bleu,
            p1,
            p2,
            p3,
            p4,
            bp: r.brevity_penalty,
            hyp_len: r.hyp_len,
            ref_len: r.ref_len,
        }
    }
}

/// One score of the tokenization comparison grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub language: LangCode,
    pub tokenization: Tokenization,
    pub split: EvalSplit,
    pub bleu: f64,
}

impl From<&BleuRecord> for AblationCell {
    fn from(r: &BleuRecord) -> Self {
        AblationCell { language: r.language, tokenization: r.tokenization, split: r.split, bleu: r.bleu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boost {
    /// Percentage change per paired split, in input order.
    pub per_split: Vec<f64>,
    pub mean: f64,
}

/// `(bpe − word) / word` in percent for each `(bpe, word)` pair, and the mean.
/// `label` names the pairs in errors.
pub fn relative_boost(pairs: &[(f64, f64)], label: &str) -> Result<Boost> {
    if pairs.is_empty() {
        return Err(Error::MissingCell(format!("{label}: no paired scores")));
    }
    let per_split = pairs
        .iter()
        .map(
            |&(bpe, word)| {
                if word == 0.0 {
                    Err(Error::ZeroWordScore(label.to_string()))
                } else {
                    Ok((bpe - word) / word * 100.0)
                }
            },
        )
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_split.iter().sum::<f64>() / per_split.len() as f64;
    Ok(Boost { per_split, mean })
}

fn lookup(cells: &[AblationCell], lang: LangCode, tok: Tokenization, split: EvalSplit) -> Result<f64> {
    let found: Vec<f64> =
        cells.iter().filter(|c| c.language == lang && c.tokenization == tok && c.split == split).map(|c| c.bleu).collect();
    match found.as_slice() {
        [v] => Ok(*v),
        [] => Err(Error::MissingCell(format!("{} {tok}/{split}", lang.display_name()))),
        _ => Err(Error::Invalid(format!("duplicate cell {} {tok}/{split}", lang.display_name()))),
    }
}

/// Splits present anywhere in `cells`, in dev-then-test order.
fn splits_of(cells: &[AblationCell]) -> Vec<EvalSplit> {
    let mut out: Vec<EvalSplit> = cells.iter().map(|c| c.split).collect();
    out.sort();
    out.dedup();
    out
}

/// Boost of BPE over word-level scores pooled over `languages` and every
/// split present in the grid, in language-then-split order.
pub fn boost_for(cells: &[AblationCell], languages: &[LangCode]) -> Result<Boost> {
    let mut pairs = Vec::new();
    let label: Vec<&str> = languages.iter().map(|l| l.display_name()).collect();
    for &lang in languages {
        for split in splits_of(cells) {
            let bpe = lookup(cells, lang, Tokenization::Bpe, split)?;
            let word = lookup(cells, lang, Tokenization::Word, split)?;
            pairs.push((bpe, word));
        }
    }
    relative_boost(&pairs, &label.join("+"))
}

pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub language: LangCode,
    /// Scores in the order of [`AblationTable::columns`].
    pub scores: Vec<f64>,
    pub tokens: usize,
    pub sentences: usize,
}

/// A complete language × (tokenization, split) grid with corpus statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub columns: Vec<(Tokenization, EvalSplit)>,
    pub rows: Vec<AblationRow>,
}

/// Arranges `cells` into a table. Languages appear in [`LangCode::ALL`]
/// order and columns are BPE before word, dev before test. Every language
/// must have a score in every column and an entry in `stats`.
pub fn ablation_table(cells: &[AblationCell], stats: &BTreeMap<LangCode, CorpusStats>) -> Result<AblationTable> {
    let mut columns: Vec<(Tokenization, EvalSplit)> = Vec::new();
    for tok in [Tokenization::Bpe, Tokenization::Word] {
        for split in splits_of(cells) {
            columns.push((tok, split));
        }
    }
    let mut rows = Vec::new();
    for lang in LangCode::ALL {
        if !cells.iter().any(|c| c.language == lang) {
            continue;
        }
        let scores = columns.iter().map(|&(tok, split)| lookup(cells, lang, tok, split)).collect::<Result<Vec<f64>>>()?;
        let st = stats.get(&lang).ok_or_else(|| Error::MissingCell(format!("{} corpus statistics", lang.display_name())))?;
        rows.push(AblationRow { language: lang, scores, tokens: st.tokens, sentences: st.sentences });
    }
    if rows.is_empty() {
        return Err(Error::MissingCell("no scores to tabulate".into()));
    }
    Ok(AblationTable { columns, rows })
}

fn display_width(s: &str) -> usize {
    s.chars().filter(|&c| !is_combining_mark(c)).count()
}

impl AblationTable {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["Language".to_string()];
        for (tok, split) in &self.columns {
            let t = match tok {
                Tokenization::Bpe => "BPE",
                Tokenization::Word => "Word",
            };
            h.push(format!("{t} {split}"));
        }
        h.push("Tokens".into());
        h.push("Sentences".into());
        h
    }

    fn body(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut v = vec![r.language.display_name().to_string()];
                v.extend(r.scores.iter().map(|s| format!("{s:.2}")));
                v.push(thousands(r.tokens));
                v.push(thousands(r.sentences));
                v
            })
            .collect()
    }

    /// Space-aligned plain text: the language column left-aligned, numbers right-aligned.
    pub fn render_text(&self) -> String {
        let mut lines = vec![self.header()];
        lines.extend(self.body());
        let cols = lines[0].len();
        let widths: Vec<usize> = (0..cols).map(|c| lines.iter().map(|l| display_width(&l[c])).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for line in &lines {
            let mut cells = Vec::with_capacity(cols);
            for (c, cell) in line.iter().enumerate() {
                let pad = " ".repeat(widths[c] - display_width(cell));
                cells.push(if c == 0 { format!("{cell}{pad}") } else { format!("{pad}{cell}") });
            }
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn render_delimited(&self, sep: char) -> String {
        let mut out = String::new();
        for line in std::iter::once(self.header()).chain(self.body()) {
            out.push_str(&line.join(&sep.to_string()));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Aligned text rendering of [`ablation_table`].
pub fn render_ablation_table(cells: &[AblationCell], stats: &BTreeMap<LangCode, CorpusStats>) -> Result<String> {
    Ok(ablation_table(cells, stats)?.render_text())
}
