//! Mini-batch training with Adam, warmup and dev-BLEU early stopping.

mod batch;
mod gradcheck;
mod optim;

pub use batch::{make_batches, Batch, Example};
pub use gradcheck::{batch_loss, grad_check, grad_check_with, loss_and_grads, GradCheckReport};
pub use optim::{adam_step, clip_grad_norm, global_norm, noam_lr, AdamConfig, AdamState};

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::greedy_decode;
use crate::error::{Error, Result};
use crate::metrics::{bleu_strings, Smoothing};
use crate::model::{Checkpoint, TransformerConfig, TransformerParams};

/// Mixes a stream label into a seed (splitmix64 finaliser), so independent
/// consumers of one top-level seed never share a random stream.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const BATCH_STREAM: u64 = 0x6261_7463_6800_0000;
const DROPOUT_STREAM: u64 = 0x6472_6f70_0000_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    /// Multiplier on the warmup schedule.
    pub lr_factor: f64,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Steps between dev evaluations and [`TrainHooks::on_checkpoint`] calls.
    pub checkpoint_every: usize,
    /// Evaluations without dev-BLEU improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_steps: 20_000,
            warmup_steps: 4000,
            lr_factor: 1.0,
            adam: AdamConfig::default(),
            label_smoothing: 0.1,
            clip_norm: Some(1.0),
            checkpoint_every: 500,
            patience: 5,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_steps", self.max_steps),
            ("warmup_steps", self.warmup_steps),
            ("checkpoint_every", self.checkpoint_every),
            ("patience", self.patience),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return Err(Error::Config(format!("lr_factor {} must be positive", self.lr_factor)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.clip_norm.is_some_and(|c| c.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step { step: usize, loss: f64, lr: f64 },
    Eval { step: usize, dev_loss: f64, dev_bleu: f64 },
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: TransformerParams,
    pub adam: AdamState,
    pub step: usize,
    pub best_bleu: Option<f64>,
    pub best_step: usize,
    pub bad_evals: usize,
    pub stopped: bool,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    adam_step: u64,
    best_bleu: Option<f64>,
    best_step: usize,
    bad_evals: usize,
    stopped: bool,
}

impl TrainState {
    pub fn new(params: TransformerParams) -> Self {
        TrainState { adam: AdamState::new(&params), params, step: 0, best_bleu: None, best_step: 0, bad_evals: 0, stopped: false }
    }

    pub fn to_checkpoint(&self, config: &TransformerConfig, seed: u64) -> Checkpoint {
        let names: Vec<String> = self.params.named_shapes().into_iter().map(|(n, _)| n).collect();
        let mut extra: Vec<(String, ArrayD<f64>)> = Vec::new();
        for (n, m) in names.iter().zip(&self.adam.m) {
            extra.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&self.adam.v) {
            extra.push((format!("adam.v.{n}"), v.clone()));
        }
        let meta = StateMeta {
            adam_step: self.adam.step,
            best_bleu: self.best_bleu,
            best_step: self.best_step,
            bad_evals: self.bad_evals,
            stopped: self.stopped,
        };
        Checkpoint {
            config: config.clone(),
            params: self.params.clone(),
            seed,
            step: self.step as u64,
            extra,
            meta: serde_json::json!({ "train": meta }),
        }
    }

    /// Restores a state written by [`TrainState::to_checkpoint`]. Checkpoints
    /// without optimizer data start from fresh moments.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut state = TrainState::new(ck.params.clone());
        state.step = ck.step as usize;
        let Some(meta) = ck.meta.get("train") else {
            return Ok(state);
        };
        let meta: StateMeta = serde_json::from_value(meta.clone()).map_err(|e| Error::Checkpoint(format!("train state: {e}")))?;
        let names: Vec<String> = ck.params.named_shapes().into_iter().map(|(n, _)| n).collect();
        let find = |key: String| -> Result<ArrayD<f64>> {
            ck.extra
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, a)| a.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer array {key}")))
        };
        for (i, n) in names.iter().enumerate() {
            let m = find(format!("adam.m.{n}"))?;
            let v = find(format!("adam.v.{n}"))?;
            if m.shape() != state.adam.m[i].shape() || v.shape() != state.adam.v[i].shape() {
                return Err(Error::Checkpoint(format!("optimizer array for {n} has the wrong shape")));
            }
            state.adam.m[i] = m;
            state.adam.v[i] = v;
        }
        state.adam.step = meta.adam_step;
        state.best_bleu = meta.best_bleu;
        state.best_step = meta.best_step;
        state.bad_evals = meta.bad_evals;
        state.stopped = meta.stopped;
        Ok(state)
    }
}

/// Callbacks from [`train_loop`]; every method has a no-op default.
pub trait TrainHooks {
    /// Turns target ids into a detokenised sentence for dev BLEU.
    fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    }
    fn on_record(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }
    /// Called whenever dev BLEU improves.
    fn on_best(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<LogRecord>,
    /// Parameters at the best dev evaluation of this run.
    pub best_params: Option<TransformerParams>,
}

/// Token-weighted mean loss over `examples` with dropout off.
pub fn corpus_loss(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    examples: &[Example],
    batch_size: usize,
    label_smoothing: f64,
) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for b in make_batches(examples, batch_size, 0) {
        let t = b.target_tokens();
        sum += batch_loss(params, cfg, &b, label_smoothing, None)? * t as f64;
        n += t;
    }
    if n == 0 {
        return Err(Error::AllPadded);
    }
    Ok(sum / n as f64)
}

/// Greedy-decodes every source in `examples` and scores the detokenised
/// output against the detokenised references.
pub fn dev_bleu(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    examples: &[Example],
    detokenize: &dyn Fn(&[usize]) -> String,
) -> Result<f64> {
    let mut hyps = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    for ex in examples {
        let h = greedy_decode(params, cfg, &ex.src, None)?;
        hyps.push(detokenize(h.tokens()));
        refs.push(detokenize(&ex.tgt));
    }
    Ok(bleu_strings(&hyps, &refs, Smoothing::None)?.bleu)
}

/// Runs training from `start` (or a fresh state initialised from the seed)
/// until `max_steps`, or until dev BLEU stops improving.
///
/// The batch order of each epoch and the dropout noise of each step are
/// derived from `(seed, epoch)` and `(seed, step)`, so a run resumed from a
/// checkpoint replays the same sequence of updates as an uninterrupted one.
pub fn train_loop(
    model_cfg: &TransformerConfig,
    cfg: &TrainConfig,
    train: &[Example],
    dev: &[Example],
    start: Option<TrainState>,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut state = match start {
        Some(s) => s,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
            TrainState::new(TransformerParams::init(model_cfg, &mut rng))
        }
    };
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut epoch_batches: Option<(usize, Vec<Batch>)> = None;
    let mut records = Vec::new();
    let mut best_params = None;

    while !state.stopped && state.step < cfg.max_steps {
        let step = state.step + 1;
        let epoch = (step - 1) / per_epoch;
        if epoch_batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let seed = derive_seed(derive_seed(cfg.seed, BATCH_STREAM), epoch as u64);
            epoch_batches = Some((epoch, make_batches(train, cfg.batch_size, seed)));
        }
        let batch = &epoch_batches.as_ref().expect("filled above").1[(step - 1) % per_epoch];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, DROPOUT_STREAM), step as u64));
        let (loss, mut grads) = match loss_and_grads(&state.params, model_cfg, batch, cfg.label_smoothing, Some(&mut rng)) {
            Err(Error::NonFinite { what, .. }) => return Err(Error::NonFinite { what, step }),
            other => other?,
        };
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        let lr = cfg.lr_factor * noam_lr(step, model_cfg.d_model, cfg.warmup_steps);
        adam_step(&mut state.params, &grads, &mut state.adam, lr, &cfg.adam)?;
        state.step = step;

        let rec = LogRecord::Step { step, loss, lr };
        hooks.on_record(&rec)?;
        records.push(rec);

        let boundary = step % cfg.checkpoint_every == 0 || step == cfg.max_steps;
        if boundary && !dev.is_empty() {
            let dev_loss = corpus_loss(&state.params, model_cfg, dev, cfg.batch_size, cfg.label_smoothing)?;
            let bleu = dev_bleu(&state.params, model_cfg, dev, &|ids| hooks.detokenize(ids))?;
            let rec = LogRecord::Eval { step, dev_loss, dev_bleu: bleu };
            hooks.on_record(&rec)?;
            records.push(rec);
            if state.best_bleu.is_none_or(|b| bleu > b) {
                state.best_bleu = Some(bleu);
                state.best_step = step;
                state.bad_evals = 0;
                best_params = Some(state.params.clone());
                hooks.on_best(&state)?;
            } else {
                state.bad_evals += 1;
                if state.bad_evals >= cfg.patience {
                    state.stopped = true;
                }
            }
        }
        if boundary || state.stopped {
            hooks.on_checkpoint(&state)?;
        }
    }
    Ok(TrainOutcome { state, records, best_params })
}
