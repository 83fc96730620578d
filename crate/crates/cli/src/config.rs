//! Experiment configuration: a TOML (or JSON) file with flag overrides on top.

use std::path::{Path, PathBuf};

use nmtforge::corpus::{FilterRules, LangCode, NormalizationPolicy};
use nmtforge::decode::BeamConfig;
use nmtforge::metrics::Tokenization;
use nmtforge::model::{Preset, TransformerConfig};
use nmtforge::train::{derive_seed, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::Invalid;

/// Seed streams of the pipeline stages.
pub const SPLIT_STREAM: u64 = 1;
pub const TRAIN_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub src_lang: LangCode,
    pub tgt_lang: LangCode,
    pub data: DataConfig,
    #[serde(default = "default_mode")]
    pub mode: Tokenization,
    #[serde(default = "default_merges")]
    pub merges: usize,
    /// One BPE model over both sides instead of one per side.
    #[serde(default = "yes")]
    pub joint_bpe: bool,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default = "yes")]
    pub strip_verses: bool,
    #[serde(default)]
    pub normalize: NormalizationPolicy,
    #[serde(default)]
    pub filter: FilterRules,
    #[serde(default)]
    pub vocab: VocabConfig,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub src: PathBuf,
    pub tgt: PathBuf,
    /// Predefined held-out sets. A set that is absent is split off
    /// `src`/`tgt` instead, with `dev_size` or `test_size` pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_src: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_tgt: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_src: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_tgt: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub dev_size: usize,
    #[serde(default = "default_split")]
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: Option<usize>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { min_freq: 1, max_size: None }
    }
}

/// Per-field overrides of the chosen preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub d_ff: Option<usize>,
    pub dropout: Option<f64>,
    pub max_len: Option<usize>,
    pub tie_output: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub alpha: f64,
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        let b = BeamConfig::default();
        DecodeConfig { beam_size: b.beam_size, alpha: b.alpha, max_len: b.max_len }
    }
}

impl DecodeConfig {
    pub fn beam(&self) -> BeamConfig {
        BeamConfig { beam_size: self.beam_size, alpha: self.alpha, max_len: self.max_len }
    }
}

fn default_mode() -> Tokenization {
    Tokenization::Bpe
}
fn default_merges() -> usize {
    4000
}
fn yes() -> bool {
    true
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}
fn default_seed() -> u64 {
    1
}
fn default_split() -> usize {
    500
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub src: Option<PathBuf>,
    pub tgt: Option<PathBuf>,
    pub src_lang: Option<LangCode>,
    pub tgt_lang: Option<LangCode>,
    pub mode: Option<Tokenization>,
    pub merges: Option<usize>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub strip_verses: Option<bool>,
    pub steps: Option<usize>,
}

impl Overrides {
    fn apply(&self, root: &mut Map<String, Value>) {
        let mut set = |path: &[&str], v: Value| {
            let mut node = &mut *root;
            for key in &path[..path.len() - 1] {
                let entry = node.entry(key.to_string()).or_insert_with(|| json!({}));
                if !entry.is_object() {
                    *entry = json!({});
                }
                node = entry.as_object_mut().expect("object inserted above");
            }
            node.insert(path[path.len() - 1].to_string(), v);
        };
        if let Some(p) = &self.src {
            set(&["data", "src"], json!(p));
        }
        if let Some(p) = &self.tgt {
            set(&["data", "tgt"], json!(p));
        }
        if let Some(l) = self.src_lang {
            set(&["src_lang"], json!(l));
        }
        if let Some(l) = self.tgt_lang {
            set(&["tgt_lang"], json!(l));
        }
        if let Some(m) = self.mode {
            set(&["mode"], json!(m));
        }
        if let Some(n) = self.merges {
            set(&["merges"], json!(n));
        }
        if let Some(p) = self.preset {
            set(&["preset"], json!(p));
        }
        if let Some(s) = self.seed {
            set(&["seed"], json!(s));
        }
        if let Some(o) = &self.out {
            set(&["out"], json!(o));
        }
        if let Some(b) = self.strip_verses {
            set(&["strip_verses"], json!(b));
        }
        if let Some(n) = self.steps {
            set(&["train", "max_steps"], json!(n));
        }
    }
}

fn read_table(path: &Path) -> Result<Map<String, Value>, Invalid> {
    let text = std::fs::read_to_string(path).map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())))?
    } else {
        let table: toml::Table = toml::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())))?;
        serde_json::to_value(table).map_err(|e| Invalid(e.to_string()))?
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(Invalid(format!("{}: expected a table at top level", path.display()))),
    }
}

impl ExperimentConfig {
    /// Reads `file` (if any), applies `overrides`, then deserializes. A
    /// relative data path in the file is taken relative to the file. The
    /// training seed is always derived from the top-level `seed`.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self, Invalid> {
        let mut root = match file {
            Some(p) => read_table(p)?,
            None => Map::new(),
        };
        if let Some(base) = file.and_then(Path::parent) {
            rebase_paths(&mut root, base);
        }
        overrides.apply(&mut root);
        let mut cfg: ExperimentConfig =
            serde_json::from_value(Value::Object(root)).map_err(|e| Invalid(format!("config: {e}")))?;
        cfg.train.seed = derive_seed(cfg.seed, TRAIN_STREAM);
        Ok(cfg)
    }

    /// Checks values and that every referenced input exists.
    pub fn validate(&self) -> Result<(), Invalid> {
        if self.src_lang == self.tgt_lang {
            return Err(Invalid(format!("source and target language are both {}", self.src_lang)));
        }
        let d = &self.data;
        let held_out = [&d.dev_src, &d.dev_tgt, &d.test_src, &d.test_tgt];
        if d.dev_src.is_some() != d.dev_tgt.is_some() || d.test_src.is_some() != d.test_tgt.is_some() {
            return Err(Invalid("dev_src/dev_tgt and test_src/test_tgt must each be given as a pair".into()));
        }
        for p in [Some(&d.src), Some(&d.tgt)].into_iter().chain(held_out.map(Option::as_ref)).flatten() {
            if !p.is_file() {
                return Err(Invalid(format!("data file {} does not exist", p.display())));
            }
        }
        if self.vocab.min_freq == 0 {
            return Err(Invalid("vocab.min_freq must be at least 1".into()));
        }
        if !(self.filter.max_ratio >= 1.0) || self.filter.max_tokens == 0 {
            return Err(Invalid("filter.max_tokens must be positive and filter.max_ratio at least 1".into()));
        }
        if self.decode.beam_size == 0 || !(self.decode.alpha >= 0.0 && self.decode.alpha.is_finite()) {
            return Err(Invalid("decode.beam_size must be positive and decode.alpha non-negative".into()));
        }
        self.train.validate().map_err(|e| Invalid(e.to_string()))?;
        self.model_config(8, 8).validate().map_err(|e| Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> TransformerConfig {
        let mut c = TransformerConfig::preset(self.preset, src_vocab, tgt_vocab);
        let m = &self.model;
        c.d_model = m.d_model.unwrap_or(c.d_model);
        c.n_heads = m.n_heads.unwrap_or(c.n_heads);
        c.n_layers = m.n_layers.unwrap_or(c.n_layers);
        c.d_ff = m.d_ff.unwrap_or(c.d_ff);
        c.dropout = m.dropout.unwrap_or(c.dropout);
        c.max_len = m.max_len.unwrap_or(c.max_len);
        c.tie_output = m.tie_output.unwrap_or(c.tie_output);
        c
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 8 hex digits of the SHA-256 of the resolved config, leaving out
    /// `out` so the stamp names the experiment rather than where it is stored.
    pub fn hash8(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is a table").remove("out");
        let digest = Sha256::digest(serde_json::to_vec(&v).expect("config serializes"));
        hex::encode(digest)[..8].to_string()
    }
}

fn rebase_paths(root: &mut Map<String, Value>, base: &Path) {
    let Some(Value::Object(data)) = root.get_mut("data") else { return };
    for key in ["src", "tgt", "dev_src", "dev_tgt", "test_src", "test_tgt"] {
        if let Some(Value::String(s)) = data.get_mut(key) {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    }
}
