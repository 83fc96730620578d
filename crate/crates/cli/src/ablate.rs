//! BPE-vs-word comparison over per-language BLEU records.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use nmtforge::corpus::{CorpusStats, LangCode};
use nmtforge::metrics::{ablation_table, boost_for, AblationCell, AblationTable, Boost};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupBoost {
    pub languages: Vec<LangCode>,
    pub label: String,
    /// Percent change per (language, split) pair, in table order.
    pub per_split: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub table: AblationTable,
    pub boosts: Vec<GroupBoost>,
}

/// Reads JSONL lines holding at least `language`, `tokenization`, `split`
/// and `bleu`; full BLEU records qualify.
pub fn read_cells(path: &Path) -> Result<Vec<AblationCell>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

pub fn read_stats(path: &Path) -> Result<BTreeMap<LangCode, CorpusStats>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Builds the table and one boost per language group. With no groups given,
/// every language in the grid is its own group.
pub fn ablate(
    cells: &[AblationCell],
    stats: &BTreeMap<LangCode, CorpusStats>,
    groups: &[Vec<LangCode>],
) -> nmtforge::Result<AblationReport> {
    let table = ablation_table(cells, stats)?;
    let singles: Vec<Vec<LangCode>>;
    let groups = if groups.is_empty() {
        singles = table.rows.iter().map(|r| vec![r.language]).collect();
        &singles
    } else {
        groups
    };
    let boosts = groups
        .iter()
        .map(|g| {
            let Boost { per_split, mean } = boost_for(cells, g)?;
            Ok(GroupBoost {
                languages: g.clone(),
                label: g.iter().map(|l| l.display_name()).collect::<Vec<_>>().join("+"),
                per_split,
                mean,
            })
        })
        .collect::<nmtforge::Result<_>>()?;
    Ok(AblationReport { table, boosts })
}

impl AblationReport {
    pub fn render_text(&self) -> String {
        let mut out = self.table.render_text();
        out.push('\n');
        for b in &self.boosts {
            let splits: Vec<String> = b.per_split.iter().map(|p| format!("{p:+.1}%")).collect();
            out.push_str(&format!("BPE vs word, {}: {} (mean {:+.1}%)\n", b.label, splits.join(" "), b.mean));
        }
        out
    }

    pub fn render_delimited(&self, sep: char) -> String {
        let mut out = self.table.render_delimited(sep);
        out.push('\n');
        for b in &self.boosts {
            let mut fields = vec![b.label.clone()];
            fields.extend(b.per_split.iter().map(|p| format!("{p:.2}")));
            fields.push(format!("{:.2}", b.mean));
            out.push_str(&fields.join(&sep.to_string()));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
