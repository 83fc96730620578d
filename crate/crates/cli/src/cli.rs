//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nmtforge::corpus::{normalize_text, LangCode, NormalizationPolicy};
use nmtforge::decode::BeamConfig;
use nmtforge::metrics::{bleu_strings, BleuRecord, EvalSplit, Smoothing, Tokenization};
use nmtforge::model::Preset;
use nmtforge::tokenize::{build_vocab, learn_bpe, word_tokenize, BpeModel};

use crate::ablate::{ablate, read_cells, read_stats};
use crate::config::{ExperimentConfig, Overrides};
use crate::pipeline::{self, StageError};
use crate::Invalid;

#[derive(Parser, Debug)]
#[command(name = "nmtforge", version, about = "Low-resource NMT workbench: clean, tokenize, train, translate, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize, strip citations, filter and split a parallel corpus into --out.
    Prepare(ExperimentArgs),
    /// Learn BPE merges from one or more text files.
    LearnBpe(LearnBpeArgs),
    /// Segment text with a BPE model, or join segments back with --decode.
    ApplyBpe(ApplyBpeArgs),
    /// Build a vocabulary file from whitespace tokens.
    Vocab(VocabArgs),
    /// Learn the tokenizer and train a model on already-cleaned files.
    Train(TrainArgs),
    /// Translate a text file with a trained checkpoint.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate(EvaluateArgs),
    /// Run prepare, tokenize, train, translate and evaluate in a fresh run directory.
    Pipeline(ExperimentArgs),
    /// Compare BPE and word-level scores and print the ablation table.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Experiment file (TOML, or JSON when the name ends in .json); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source-side text, one sentence per line.
    #[arg(long)]
    src: Option<PathBuf>,
    /// Target-side text, line-aligned with --src.
    #[arg(long)]
    tgt: Option<PathBuf>,
    /// Source language code (bin, ish, urh, iso, eng).
    #[arg(long)]
    src_lang: Option<LangCode>,
    /// Target language code (bin, ish, urh, iso, eng).
    #[arg(long)]
    tgt_lang: Option<LangCode>,
    /// Tokenization mode: bpe or word.
    #[arg(long)]
    mode: Option<Tokenization>,
    /// Number of BPE merge operations [default: 4000].
    #[arg(long)]
    merges: Option<usize>,
    /// Model preset: tiny or paper-ish.
    #[arg(long)]
    preset: Option<Preset>,
    /// Top-level seed; every stage derives its own stream from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Remove parenthesized scripture citations.
    #[arg(long, value_enum)]
    strip_verses: Option<OnOff>,
    /// Maximum number of training steps.
    #[arg(long)]
    steps: Option<usize>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Invalid> {
        let o = Overrides {
            src: self.src.clone(),
            tgt: self.tgt.clone(),
            src_lang: self.src_lang,
            tgt_lang: self.tgt_lang,
            mode: self.mode,
            merges: self.merges,
            preset: self.preset,
            seed: self.seed,
            out: self.out.clone(),
            strip_verses: self.strip_verses.map(|v| matches!(v, OnOff::On)),
            steps: self.steps,
        };
        let cfg = ExperimentConfig::resolve(self.config.as_deref(), &o)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct LearnBpeArgs {
    /// Training text; may be repeated.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// Number of merge operations.
    #[arg(long, default_value_t = 4000)]
    merges: usize,
    /// Where to write the model.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct ApplyBpeArgs {
    /// BPE model file.
    #[arg(long)]
    model: PathBuf,
    /// Text to process.
    #[arg(long)]
    input: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Join space-separated subwords back into words.
    #[arg(long)]
    decode: bool,
}

#[derive(Args, Debug)]
struct VocabArgs {
    /// Text files; may be repeated.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// Segment with this BPE model before counting.
    #[arg(long)]
    bpe: Option<PathBuf>,
    /// Minimum token frequency.
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    /// Maximum vocabulary size, special tokens included.
    #[arg(long)]
    max_size: Option<usize>,
    /// Where to write the vocabulary.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Dev-set source text for BLEU-based model selection.
    #[arg(long, requires = "dev_tgt")]
    dev_src: Option<PathBuf>,
    /// Dev-set target text.
    #[arg(long, requires = "dev_src")]
    dev_tgt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    /// Checkpoint written by train or pipeline.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source text, one sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Beam width.
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Length-penalty exponent.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Maximum generated tokens per sentence [default: 1.5 × source length + 5].
    #[arg(long)]
    max_len: Option<usize>,
    /// Emit the k best hypotheses per line as `index ||| score ||| text`.
    #[arg(long)]
    nbest: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Hypotheses, one per line.
    #[arg(long)]
    hyp: PathBuf,
    /// References, line-aligned with --hyp.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Language of the references, recorded in the JSON output.
    #[arg(long)]
    language: Option<LangCode>,
    /// Tokenization of the system, recorded in the JSON output.
    #[arg(long)]
    tokenization: Option<Tokenization>,
    /// Which split is scored, recorded in the JSON output.
    #[arg(long)]
    split: Option<EvalSplit>,
    /// Count an order with no matches as 0.1 matches.
    #[arg(long)]
    smooth: bool,
    /// Append the BLEU record to this JSONL file (needs --language, --tokenization, --split).
    #[arg(long, requires_all = ["language", "tokenization", "split"])]
    record: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Tsv,
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// JSONL file of BLEU records or grid cells; may be repeated.
    #[arg(long)]
    records: Vec<PathBuf>,
    /// Pipeline run directory (reads bleu.jsonl and stats.json); may be repeated.
    #[arg(long)]
    run: Vec<PathBuf>,
    /// JSON map from language code to {tokens, sentences}; may be repeated.
    #[arg(long)]
    stats: Vec<PathBuf>,
    /// Languages pooled into one boost, joined with '+', e.g. bin+ish; may be repeated.
    #[arg(long)]
    group: Vec<String>,
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

/// Parses `args`, runs the subcommand and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() {
                1
            } else {
                2
            }
        }
    }
}

fn require(path: &Path) -> Result<(), Invalid> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Invalid(format!("input file {} does not exist", path.display())))
    }
}

fn read_text_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn joined(lines: impl IntoIterator<Item = String>) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Prepare(a) => {
            let cfg = a.resolve()?;
            fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
            let p = pipeline::prepare(&cfg, &cfg.out)?;
            println!("{}", serde_json::to_string_pretty(&p.report)?);
        }
        Command::LearnBpe(a) => {
            a.input.iter().try_for_each(|p| require(p))?;
            let mut lines = Vec::new();
            for p in &a.input {
                lines.extend(read_text_lines(p)?);
            }
            let model = learn_bpe(&lines, a.merges);
            model.save(&a.output)?;
            if model.stopped_early() {
                eprintln!("note: learned {} of {} merges; no pair occurs twice", model.num_merges(), a.merges);
            }
        }
        Command::ApplyBpe(a) => {
            require(&a.model)?;
            require(&a.input)?;
            let model = BpeModel::load(&a.model)?;
            let lines = read_text_lines(&a.input)?;
            let out = lines.iter().map(|l| if a.decode { model.decode(&word_tokenize(l)) } else { model.encode(l).join(" ") });
            emit(a.output.as_deref(), &joined(out))?;
        }
        Command::Vocab(a) => {
            a.input.iter().try_for_each(|p| require(p))?;
            if a.min_freq == 0 {
                return Err(Invalid("--min-freq must be at least 1".into()).into());
            }
            let bpe = match &a.bpe {
                Some(p) => {
                    require(p)?;
                    Some(BpeModel::load(p)?)
                }
                None => None,
            };
            let mut tokens = Vec::new();
            for p in &a.input {
                for l in read_text_lines(p)? {
                    tokens.extend(match &bpe {
                        Some(m) => m.encode(&l),
                        None => word_tokenize(&l),
                    });
                }
            }
            build_vocab(&tokens, a.min_freq, a.max_size)?.save(&a.output)?;
        }
        Command::Train(a) => {
            let mut cfg = a.exp.resolve()?;
            cfg.data.dev_src = a.dev_src;
            cfg.data.dev_tgt = a.dev_tgt;
            cfg.validate()?;
            let dir = pipeline::create_run_dir(&cfg)?;
            fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
            let load = |s: &Path, t: &Path| -> Result<nmtforge::corpus::ParallelCorpus> {
                let c = nmtforge::corpus::load_parallel(s, t, cfg.src_lang, cfg.tgt_lang)?;
                Ok(c.normalize(&cfg.normalize))
            };
            let train = load(&cfg.data.src, &cfg.data.tgt)?;
            let dev = match (&cfg.data.dev_src, &cfg.data.dev_tgt) {
                (Some(s), Some(t)) => load(s, t)?,
                _ => nmtforge::corpus::ParallelCorpus::from_pairs::<String, String>(cfg.src_lang, cfg.tgt_lang, [])?,
            };
            let codec = pipeline::learn_codec(&cfg, &train, &dir).map_err(|cause| StageError { stage: "tokenize", cause })?;
            let t = pipeline::train(&cfg, &codec, &train, &dev, &dir).map_err(|cause| StageError { stage: "train", cause })?;
            if t.skipped > 0 {
                eprintln!("note: skipped {} training pairs longer than the model's max_len", t.skipped);
            }
            println!("{}", dir.display());
        }
        Command::Translate(a) => {
            require(&a.checkpoint)?;
            require(&a.input)?;
            if a.beam == 0 || a.nbest == Some(0) || !(a.alpha >= 0.0 && a.alpha.is_finite()) {
                return Err(Invalid("--beam and --nbest must be positive and --alpha non-negative".into()).into());
            }
            let threads = pipeline::thread_cap()?;
            let (ck, codec) = pipeline::load_model(&a.checkpoint)?;
            let policy = NormalizationPolicy::default();
            let lines: Vec<String> = read_text_lines(&a.input)?.iter().map(|l| normalize_text(l, &policy)).collect();
            let beam = BeamConfig { beam_size: a.beam.max(a.nbest.unwrap_or(0)), alpha: a.alpha, max_len: a.max_len };
            let hyps = pipeline::translate_lines(&ck.params, &ck.config, &codec, &lines, &beam, threads)?;
            let mut out = Vec::new();
            for (i, list) in hyps.iter().enumerate() {
                match a.nbest {
                    None => out.push(codec.decode_tgt(list[0].tokens())?),
                    Some(k) => {
                        for h in list.iter().take(k) {
                            out.push(format!("{i} ||| {:.6} ||| {}", h.score(a.alpha), codec.decode_tgt(h.tokens())?));
                        }
                    }
                }
            }
            emit(a.output.as_deref(), &joined(out))?;
        }
        Command::Evaluate(a) => {
            require(&a.hyp)?;
            require(&a.reference)?;
            let smoothing = if a.smooth { Smoothing::Floor } else { Smoothing::None };
            let r = bleu_strings(&read_text_lines(&a.hyp)?, &read_text_lines(&a.reference)?, smoothing)?;
            println!(
                "BLEU = {:.2} {:.1}/{:.1}/{:.1}/{:.1} (BP = {:.3}, hyp_len = {}, ref_len = {})",
                r.bleu,
                100.0 * r.precisions[0],
                100.0 * r.precisions[1],
                100.0 * r.precisions[2],
                100.0 * r.precisions[3],
                r.brevity_penalty,
                r.hyp_len,
                r.ref_len
            );
            if let (Some(path), Some(l), Some(t), Some(s)) = (&a.record, a.language, a.tokenization, a.split) {
                let line = serde_json::to_string(&BleuRecord::new(l, t, s, &r))?;
                let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
                writeln!(f, "{line}")?;
            }
        }
        Command::Pipeline(a) => {
            let cfg = a.resolve()?;
            let outcome = pipeline::run_pipeline(&cfg)?;
            for r in &outcome.records {
                println!("{} {} {}: BLEU {:.2}", r.language, r.tokenization, r.split, r.bleu);
            }
            println!("{}", outcome.run_dir.display());
        }
        Command::Ablate(a) => {
            let mut cells = Vec::new();
            let mut stats = std::collections::BTreeMap::new();
            for p in &a.records {
                require(p)?;
                cells.extend(read_cells(p)?);
            }
            for dir in &a.run {
                let (b, s) = (dir.join("bleu.jsonl"), dir.join("stats.json"));
                require(&b)?;
                require(&s)?;
                cells.extend(read_cells(&b)?);
                stats.extend(read_stats(&s)?);
            }
            for p in &a.stats {
                require(p)?;
                stats.extend(read_stats(p)?);
            }
            if cells.is_empty() {
                return Err(Invalid("give at least one --records file or --run directory".into()).into());
            }
            let groups = a
                .group
                .iter()
                .map(|g| g.split('+').map(|c| c.trim().parse::<LangCode>()).collect::<nmtforge::Result<Vec<_>>>())
                .collect::<nmtforge::Result<Vec<_>>>()
                .map_err(|e| Invalid(e.to_string()))?;
            let report = ablate(&cells, &stats, &groups)?;
            let text = match a.format {
                Format::Text => report.render_text(),
                Format::Tsv => report.render_delimited('\t'),
                Format::Csv => report.render_delimited(','),
                Format::Json => report.to_json() + "\n",
            };
            print!("{text}");
        }
    }
    Ok(())
}
