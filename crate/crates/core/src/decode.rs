//! Greedy and beam-search decoding.

use ndarray::ArrayView1;

use crate::error::{Error, Result};
use crate::model::{decode_logits, encode, Memory, SeqBatch, TransformerConfig, TransformerParams};
use crate::tokenize::{BOS_ID, EOS_ID, PAD_ID};

/// A (possibly partial) translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS; ends with EOS when `finished`.
    pub ids: Vec<usize>,
    /// Sum of per-token log-probabilities.
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens without BOS and EOS.
    pub fn tokens(&self) -> &[usize] {
        let end = if self.finished { self.ids.len() - 1 } else { self.ids.len() };
        &self.ids[1..end]
    }

    /// Number of generated tokens, counting the EOS.
    pub fn generated(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn score(&self, alpha: f64) -> f64 {
        self.logprob / length_penalty(self.generated(), alpha)
    }
}

/// GNMT length penalty `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Default generation budget `1.5 · src_len + 5`.
pub fn default_max_len(src_len: usize) -> usize {
    (1.5 * src_len as f64).floor() as usize + 5
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub alpha: f64,
    /// Maximum number of generated tokens, EOS included. `None` uses
    /// [`default_max_len`] of the source length.
    pub max_len: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam_size: 5, alpha: 1.0, max_len: None }
    }
}

fn log_softmax(row: ArrayView1<f64>) -> Vec<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

fn allowed(id: usize) -> bool {
    id != PAD_ID && id != BOS_ID
}

fn budget(cfg: &TransformerConfig, src_len: usize, max_len: Option<usize>) -> usize {
    max_len.unwrap_or_else(|| default_max_len(src_len)).min(cfg.max_len)
}

fn prepare(params: &TransformerParams, cfg: &TransformerConfig, src: &[usize]) -> Result<Memory> {
    if src.is_empty() {
        return Err(Error::Invalid("cannot decode an empty source sequence".into()));
    }
    encode(params, cfg, &SeqBatch::from_seqs(&[src]))
}

/// Log-probabilities of the next token for every prefix in `prefixes`.
fn next_logprobs(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    memory: &Memory,
    prefixes: &[&[usize]],
) -> Result<Vec<Vec<f64>>> {
    let batch = SeqBatch::from_seqs(prefixes);
    let mem = memory.select(&vec![0; prefixes.len()]);
    let logits = decode_logits(params, cfg, &mem, &batch)?;
    let width = batch.width();
    Ok(prefixes.iter().enumerate().map(|(i, p)| log_softmax(logits.row(i * width + p.len() - 1))).collect())
}

/// Picks the most probable allowed token at each step, lowest id on ties.
/// `src` must already carry its trailing EOS.
pub fn greedy_decode(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    src: &[usize],
    max_len: Option<usize>,
) -> Result<Hypothesis> {
    let memory = prepare(params, cfg, src)?;
    let limit = budget(cfg, src.len(), max_len);
    let mut hyp = Hypothesis { ids: vec![BOS_ID], logprob: 0.0, finished: false };
    while hyp.generated() < limit {
        let lp = next_logprobs(params, cfg, &memory, &[&hyp.ids])?.remove(0);
        let mut best: Option<usize> = None;
        for (k, &v) in lp.iter().enumerate() {
            if allowed(k) && best.is_none_or(|b| v > lp[b]) {
                best = Some(k);
            }
        }
        let k = best.ok_or_else(|| Error::Invalid("target vocabulary has no generable token".into()))?;
        hyp.ids.push(k);
        hyp.logprob += lp[k];
        if k == EOS_ID {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// All retained hypotheses, best first by length-normalised score.
///
/// Each step ranks every extension of every live hypothesis by raw
/// log-probability. EOS extensions ranked within the top `beam_size` join the
/// finished pool; the best `beam_size` non-EOS extensions stay live. Since
/// log-probabilities only fall as a hypothesis grows, a live hypothesis can
/// score at most `logprob / lp(budget)`; search stops once no live hypothesis
/// can beat the best finished one, or when the length budget is spent, in
/// which case the live hypotheses are kept unfinished.
pub fn beam_search_nbest(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    src: &[usize],
    beam: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    if beam.beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if !(beam.alpha >= 0.0 && beam.alpha.is_finite()) {
        return Err(Error::Config(format!("length penalty alpha {} must be non-negative", beam.alpha)));
    }
    let memory = prepare(params, cfg, src)?;
    let limit = budget(cfg, src.len(), beam.max_len);
    let best_possible = length_penalty(limit, beam.alpha);
    let mut alive = vec![Hypothesis { ids: vec![BOS_ID], logprob: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut best_finished = f64::NEG_INFINITY;
    let mut generated = 0;
    while generated < limit {
        let bound = alive.iter().map(|h| h.logprob / best_possible).fold(f64::NEG_INFINITY, f64::max);
        if alive.is_empty() || bound <= best_finished {
            alive.clear();
            break;
        }
        let prefixes: Vec<&[usize]> = alive.iter().map(|h| h.ids.as_slice()).collect();
        let lps = next_logprobs(params, cfg, &memory, &prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, lp) in lps.iter().enumerate() {
            for (k, &v) in lp.iter().enumerate() {
                if allowed(k) {
                    cands.push((alive[i].logprob + v, i, k));
                }
            }
        }
        if cands.is_empty() {
            return Err(Error::Invalid("target vocabulary has no generable token".into()));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam.beam_size);
        for (rank, &(score, i, k)) in cands.iter().enumerate() {
            if next.len() == beam.beam_size && rank >= beam.beam_size {
                break;
            }
            let mut ids = alive[i].ids.clone();
            ids.push(k);
            if k == EOS_ID {
                if rank < beam.beam_size {
                    let h = Hypothesis { ids, logprob: score, finished: true };
                    best_finished = best_finished.max(h.score(beam.alpha));
                    finished.push(h);
                }
            } else if next.len() < beam.beam_size {
                next.push(Hypothesis { ids, logprob: score, finished: false });
            }
        }
        alive = next;
        generated += 1;
    }
    finished.extend(alive);
    finished.sort_by(|a, b| b.score(beam.alpha).total_cmp(&a.score(beam.alpha)));
    Ok(finished)
}

/// Best hypothesis of [`beam_search_nbest`].
pub fn beam_search(params: &TransformerParams, cfg: &TransformerConfig, src: &[usize], beam: &BeamConfig) -> Result<Hypothesis> {
    Ok(beam_search_nbest(params, cfg, src, beam)?.remove(0))
}
