//! The end-to-end experiment: prepare → tokenize → train → translate → evaluate.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nmtforge::corpus::{
    corpus_stats, filter_pairs, load_parallel, split_corpus, write_parallel, CorpusStats, DropCounts, LangCode, ParallelCorpus,
};
use nmtforge::decode::{beam_search_nbest, BeamConfig, Hypothesis};
use nmtforge::metrics::{bleu_strings, BleuRecord, EvalSplit, Smoothing};
use nmtforge::model::{Checkpoint, TransformerConfig, TransformerParams};
use nmtforge::train::{derive_seed, train_loop, Example, LogRecord, TrainHooks, TrainState};
use rayon::prelude::*;
use serde::Serialize;

use crate::codec::Codec;
use crate::config::{ExperimentConfig, SPLIT_STREAM};
use crate::Invalid;

/// A failure inside one pipeline stage.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub cause: anyhow::Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {:#}", self.stage, self.cause)
    }
}

impl std::error::Error for StageError {}

trait InStage<T> {
    fn stage(self, name: &'static str) -> Result<T, StageError>;
}

impl<T, E: Into<anyhow::Error>> InStage<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError { stage, cause: e.into() })
    }
}

/// Creates `<out>/<timestamp>-<mode>-<hash8>`, adding a numeric suffix if
/// that directory already exists.
pub fn create_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = format!("{stamp}-{}-{}", cfg.mode, cfg.hash8());
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = cfg.out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!("unbounded suffix search")
}

#[derive(Debug, Clone, Serialize)]
pub struct PrepareReport {
    pub loaded: usize,
    pub dropped: DropCounts,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub train_stats: CorpusStats,
}

pub struct Prepared {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
    pub report: PrepareReport,
}

fn clean(cfg: &ExperimentConfig, corpus: &ParallelCorpus) -> ParallelCorpus {
    let c = corpus.normalize(&cfg.normalize);
    if cfg.strip_verses {
        c.strip_verses()
    } else {
        c
    }
}

/// Loads, normalizes, optionally strips citations, filters and splits, then
/// writes `{train,dev,test}.{src,tgt}` and `prepare.json` into `dir`.
pub fn prepare(cfg: &ExperimentConfig, dir: &Path) -> Result<Prepared> {
    let d = &cfg.data;
    let raw = load_parallel(&d.src, &d.tgt, cfg.src_lang, cfg.tgt_lang)?;
    let (kept, dropped) = filter_pairs(&clean(cfg, &raw), &cfg.filter);
    let load = |s: &Option<PathBuf>, t: &Option<PathBuf>| -> Result<Option<ParallelCorpus>> {
        match (s, t) {
            (Some(s), Some(t)) => Ok(Some(clean(cfg, &load_parallel(s, t, cfg.src_lang, cfg.tgt_lang)?))),
            _ => Ok(None),
        }
    };
    let (given_dev, given_test) = (load(&d.dev_src, &d.dev_tgt)?, load(&d.test_src, &d.test_tgt)?);
    let dev_size = if given_dev.is_some() { 0 } else { d.dev_size };
    let test_size = if given_test.is_some() { 0 } else { d.test_size };
    let s = split_corpus(&kept, dev_size, test_size, derive_seed(cfg.seed, SPLIT_STREAM))?;
    let (train, dev, test) = (s.train, given_dev.unwrap_or(s.dev), given_test.unwrap_or(s.test));
    for (name, c) in [("train", &train), ("dev", &dev), ("test", &test)] {
        write_parallel(c, dir.join(format!("{name}.src")), dir.join(format!("{name}.tgt")))?;
    }
    let report = PrepareReport {
        loaded: raw.len(),
        dropped,
        train: train.len(),
        dev: dev.len(),
        test: test.len(),
        train_stats: corpus_stats(&train),
    };
    fs::write(dir.join("prepare.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let stats: BTreeMap<LangCode, CorpusStats> = [(cfg.tgt_lang, report.train_stats)].into();
    fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    Ok(Prepared { train, dev, test, report })
}

fn sides(c: &ParallelCorpus) -> (Vec<String>, Vec<String>) {
    c.pairs.iter().map(|p| (p.src.clone(), p.tgt.clone())).unzip()
}

pub fn learn_codec(cfg: &ExperimentConfig, train: &ParallelCorpus, dir: &Path) -> Result<Codec> {
    let (src, tgt) = sides(train);
    let codec = Codec::learn(cfg.mode, cfg.merges, cfg.joint_bpe, &src, &tgt, cfg.vocab.min_freq, cfg.vocab.max_size)?;
    codec.save_files(dir)?;
    Ok(codec)
}

/// Encodes pairs, dropping those whose source or target would not fit the
/// model's position table.
pub fn examples(codec: &Codec, corpus: &ParallelCorpus, max_len: usize) -> (Vec<Example>, usize) {
    let mut out = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for p in &corpus.pairs {
        let src = codec.src_tokens(&p.src);
        let tgt = codec.encode_tgt(&p.tgt);
        if src.len() + 1 > max_len || tgt.len() + 1 > max_len {
            skipped += 1;
            continue;
        }
        out.push(Example::new(nmtforge::tokenize::encode_ids(&codec.src_vocab, &src), tgt));
    }
    (out, skipped)
}

struct RunHooks<'a> {
    codec: &'a Codec,
    model_cfg: &'a TransformerConfig,
    seed: u64,
    dir: &'a Path,
    log: BufWriter<File>,
}

impl RunHooks<'_> {
    fn save(&self, state: &TrainState, name: &str) -> nmtforge::Result<()> {
        let mut ck = state.to_checkpoint(self.model_cfg, self.seed);
        self.codec.attach(&mut ck);
        ck.save(self.dir.join(name))
    }
}

fn io_err(e: std::io::Error) -> nmtforge::Error {
    nmtforge::Error::Invalid(format!("writing training log: {e}"))
}

impl TrainHooks for RunHooks<'_> {
    fn detokenize(&self, ids: &[usize]) -> String {
        self.codec.decode_tgt(ids).unwrap_or_default()
    }
    fn on_record(&mut self, record: &LogRecord) -> nmtforge::Result<()> {
        let line = serde_json::to_string(record).expect("log record serializes");
        writeln!(self.log, "{line}").map_err(io_err)
    }
    fn on_best(&mut self, state: &TrainState) -> nmtforge::Result<()> {
        self.save(state, "best.ckpt")
    }
    fn on_checkpoint(&mut self, state: &TrainState) -> nmtforge::Result<()> {
        self.log.flush().map_err(io_err)?;
        self.save(state, "last.ckpt")
    }
}

pub struct Trained {
    pub model_cfg: TransformerConfig,
    pub params: TransformerParams,
    pub skipped: usize,
}

/// Trains and writes `metrics.jsonl`, `last.ckpt` and `best.ckpt`. Without a
/// dev set the final parameters are the best ones.
pub fn train(cfg: &ExperimentConfig, codec: &Codec, train: &ParallelCorpus, dev: &ParallelCorpus, dir: &Path) -> Result<Trained> {
    let model_cfg = cfg.model_config(codec.src_vocab.len(), codec.tgt_vocab.len());
    let (train_ex, skipped) = examples(codec, train, model_cfg.max_len);
    let (dev_ex, _) = examples(codec, dev, model_cfg.max_len);
    let tcfg = &cfg.train;
    let mut hooks = RunHooks {
        codec,
        model_cfg: &model_cfg,
        seed: tcfg.seed,
        dir,
        log: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
    };
    let outcome = train_loop(&model_cfg, tcfg, &train_ex, &dev_ex, None, &mut hooks)?;
    hooks.log.flush()?;
    let params = match outcome.best_params {
        Some(p) => p,
        None => {
            hooks.save(&outcome.state, "best.ckpt")?;
            outcome.state.params
        }
    };
    Ok(Trained { model_cfg, params, skipped })
}

/// Thread count from `NMTFORGE_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>, Invalid> {
    match std::env::var("NMTFORGE_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Invalid(format!("NMTFORGE_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

/// Beam-decodes every line; output order follows input order regardless of
/// the number of threads.
pub fn translate_lines(
    params: &TransformerParams,
    model_cfg: &TransformerConfig,
    codec: &Codec,
    lines: &[String],
    beam: &BeamConfig,
    threads: Option<usize>,
) -> Result<Vec<Vec<Hypothesis>>> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    pool.install(|| {
        lines
            .par_iter()
            .map(|line| {
                let src = codec.encode_src(line, model_cfg.max_len);
                Ok(beam_search_nbest(params, model_cfg, &src, beam)?)
            })
            .collect()
    })
}

pub fn load_model(path: &Path) -> Result<(Checkpoint, Codec)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let codec = Codec::from_checkpoint(&ck)?;
    Ok((ck, codec))
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub run_dir: PathBuf,
    pub records: Vec<BleuRecord>,
    pub prepare: PrepareReport,
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Runs every stage. Artifacts produced before a failing stage stay in the
/// run directory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome, StageError> {
    let dir = create_run_dir(cfg).stage("setup")?;
    fs::write(dir.join("config.json"), cfg.to_json() + "\n").stage("setup")?;
    let threads = thread_cap().stage("setup")?;

    let data = prepare(cfg, &dir).stage("prepare")?;
    let codec = learn_codec(cfg, &data.train, &dir).stage("tokenize")?;
    let trained = train(cfg, &codec, &data.train, &data.dev, &dir).stage("train")?;

    let mut records = Vec::new();
    let mut summary = String::new();
    for (split, corpus) in [(EvalSplit::Dev, &data.dev), (EvalSplit::Test, &data.test)] {
        if corpus.is_empty() {
            continue;
        }
        let (src, refs) = sides(corpus);
        let hyps =
            translate_lines(&trained.params, &trained.model_cfg, &codec, &src, &cfg.decode.beam(), threads).stage("translate")?;
        let text: Vec<String> = hyps.iter().map(|h| codec.decode_tgt(h[0].tokens())).collect::<Result<_>>().stage("translate")?;
        write_lines(&dir.join(format!("{split}.hyp")), &text).stage("translate")?;
        let report = bleu_strings(&text, &refs, Smoothing::None).stage("evaluate")?;
        let rec = BleuRecord::new(cfg.tgt_lang, cfg.mode, split, &report);
        summary.push_str(&format!("{split}\t{:.2}\n", rec.bleu));
        records.push(rec);
    }
    let jsonl: Vec<String> = records.iter().map(|r| serde_json::to_string(r).expect("record serializes")).collect();
    write_lines(&dir.join("bleu.jsonl"), &jsonl).stage("evaluate")?;
    fs::write(dir.join("bleu.txt"), summary).stage("evaluate")?;
    Ok(PipelineOutcome { run_dir: dir, records, prepare: data.report })
}
