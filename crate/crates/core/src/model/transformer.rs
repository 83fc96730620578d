use ndarray::{s, Array2, Array3, Axis};
use rand::RngCore;

use super::ops::{
    attention_backward, attention_forward, dropout_backward, feed_forward_backward, feed_forward_forward, layer_norm_backward,
    layer_norm_forward, positional_encoding, AttnCache, Dropout, FfCache, Layout, NormCache,
};
use super::params::{LayerNorm, TransformerParams};
use super::TransformerConfig;
use crate::error::{Error, Result};
use crate::tokenize::PAD_ID;

/// Right-padded id matrix with explicit lengths; positions at or beyond a
/// row's length are padding regardless of the id stored there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqBatch {
    pub ids: Array2<usize>,
    pub lens: Vec<usize>,
}

impl SeqBatch {
    pub fn from_seqs<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let width = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Array2::from_elem((seqs.len(), width), PAD_ID);
        for (mut row, seq) in ids.rows_mut().into_iter().zip(seqs) {
            for (slot, &id) in row.iter_mut().zip(seq.as_ref()) {
                *slot = id;
            }
        }
        SeqBatch { ids, lens: seqs.iter().map(|s| s.as_ref().len()).collect() }
    }

    pub fn batch_size(&self) -> usize {
        self.ids.nrows()
    }

    pub fn width(&self) -> usize {
        self.ids.ncols()
    }

    /// Number of padding slots.
    pub fn pad_count(&self) -> usize {
        self.lens.iter().map(|&l| self.width() - l).sum()
    }

    fn check(&self, vocab: usize, max_len: usize, side: &'static str) -> Result<()> {
        if self.lens.len() != self.batch_size() {
            return Err(Error::Shape {
                context: side,
                expected: format!("{} lengths", self.batch_size()),
                got: self.lens.len().to_string(),
            });
        }
        if self.width() > max_len {
            return Err(Error::Invalid(format!("{side} length {} exceeds max_len {max_len}", self.width())));
        }
        for (b, &len) in self.lens.iter().enumerate() {
            if len == 0 || len > self.width() {
                return Err(Error::Invalid(format!("{side} sequence {b} has length {len}")));
            }
            for &id in self.ids.row(b).iter().take(len) {
                if id >= vocab {
                    return Err(Error::IdOutOfRange { id, size: vocab });
                }
            }
        }
        Ok(())
    }
}

/// Encoder output for a batch of source sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    states: Array2<f64>,
    lens: Vec<usize>,
    width: usize,
}

impl Memory {
    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    /// Builds a memory whose `i`-th entry is entry `rows[i]` of `self`.
    pub fn select(&self, rows: &[usize]) -> Memory {
        let d = self.states.ncols();
        let mut states = Array2::zeros((rows.len() * self.width, d));
        for (i, &r) in rows.iter().enumerate() {
            states
                .slice_mut(s![i * self.width..(i + 1) * self.width, ..])
                .assign(&self.states.slice(s![r * self.width..(r + 1) * self.width, ..]));
        }
        Memory { states, lens: rows.iter().map(|&r| self.lens[r]).collect(), width: self.width }
    }
}

struct EncoderLayerCache {
    norm1: NormCache,
    attn: AttnCache,
    drop1: Option<Array2<f64>>,
    norm2: NormCache,
    ff: FfCache,
    drop2: Option<Array2<f64>>,
}

struct DecoderLayerCache {
    norm1: NormCache,
    self_attn: AttnCache,
    drop1: Option<Array2<f64>>,
    norm2: NormCache,
    cross_attn: AttnCache,
    drop2: Option<Array2<f64>>,
    norm3: NormCache,
    ff: FfCache,
    drop3: Option<Array2<f64>>,
}

/// Activations recorded by [`forward_train`] for [`backward`].
pub struct ForwardCache {
    src: SeqBatch,
    tgt: SeqBatch,
    src_drop: Option<Array2<f64>>,
    tgt_drop: Option<Array2<f64>>,
    encoder: Vec<EncoderLayerCache>,
    enc_norm: NormCache,
    decoder: Vec<DecoderLayerCache>,
    dec_norm: NormCache,
    dec_out: Array2<f64>,
}

impl ForwardCache {
    /// On/off state of every ReLU unit in the forward pass. Two parameter
    /// settings with the same pattern lie on the same smooth piece of the loss.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let enc = self.encoder.iter().flat_map(|c| c.ff.active());
        let dec = self.decoder.iter().flat_map(|c| c.ff.active());
        enc.chain(dec).collect()
    }
}

fn embed(table: &Array2<f64>, batch: &SeqBatch) -> Result<Array2<f64>> {
    let d = table.ncols();
    let width = batch.width();
    let pe = positional_encoding(width, d)?;
    let scale = (d as f64).sqrt();
    let mut x = Array2::zeros((batch.batch_size() * width, d));
    for b in 0..batch.batch_size() {
        for t in 0..width {
            let id = batch.ids[[b, t]].min(table.nrows() - 1);
            let mut row = x.row_mut(b * width + t);
            row.assign(&table.row(id));
            row *= scale;
            row += &pe.row(t);
        }
    }
    Ok(x)
}

fn embed_backward(grad: &mut Array2<f64>, batch: &SeqBatch, dx: &Array2<f64>) {
    let scale = (grad.ncols() as f64).sqrt();
    let width = batch.width();
    for b in 0..batch.batch_size() {
        for t in 0..width {
            let id = batch.ids[[b, t]].min(grad.nrows() - 1);
            grad.row_mut(id).scaled_add(scale, &dx.row(b * width + t));
        }
    }
}

fn run_encoder(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    src: &SeqBatch,
    dropout: &mut Dropout<'_>,
) -> Result<(Array2<f64>, Option<Array2<f64>>, Vec<EncoderLayerCache>, NormCache)> {
    let mut x = embed(&params.src_embed, src)?;
    let src_drop = dropout.apply(&mut x);
    let layout = Layout { batch: src.batch_size(), q_width: src.width(), k_width: src.width(), k_lens: &src.lens, causal: false };
    let mut caches = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let (h, norm1) = layer_norm_forward(&layer.self_norm, &x);
        let (mut a, attn) = attention_forward(&layer.self_attn, cfg.n_heads, &h, &h, layout, dropout)?;
        let drop1 = dropout.apply(&mut a);
        x += &a;
        let (h, norm2) = layer_norm_forward(&layer.ff_norm, &x);
        let (mut f, ff) = feed_forward_forward(&layer.ff, &h);
        let drop2 = dropout.apply(&mut f);
        x += &f;
        caches.push(EncoderLayerCache { norm1, attn, drop1, norm2, ff, drop2 });
    }
    let (out, enc_norm) = layer_norm_forward(&params.enc_norm, &x);
    Ok((out, src_drop, caches, enc_norm))
}

struct DecoderRun {
    logits: Array2<f64>,
    tgt_drop: Option<Array2<f64>>,
    caches: Vec<DecoderLayerCache>,
    dec_norm: NormCache,
    dec_out: Array2<f64>,
}

fn output_projection(params: &TransformerParams, h: &Array2<f64>) -> Array2<f64> {
    let mut logits = match &params.out_proj {
        Some(w) => h.dot(w),
        None => h.dot(&params.tgt_embed.t()),
    };
    logits += &params.out_bias;
    logits
}

fn run_decoder(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    memory: &Memory,
    tgt: &SeqBatch,
    dropout: &mut Dropout<'_>,
) -> Result<DecoderRun> {
    let mut y = embed(&params.tgt_embed, tgt)?;
    let tgt_drop = dropout.apply(&mut y);
    let self_layout =
        Layout { batch: tgt.batch_size(), q_width: tgt.width(), k_width: tgt.width(), k_lens: &tgt.lens, causal: true };
    let cross_layout =
        Layout { batch: tgt.batch_size(), q_width: tgt.width(), k_width: memory.width, k_lens: &memory.lens, causal: false };
    let mut caches = Vec::with_capacity(params.decoder.len());
    for layer in &params.decoder {
        let (h, norm1) = layer_norm_forward(&layer.self_norm, &y);
        let (mut a, self_attn) = attention_forward(&layer.self_attn, cfg.n_heads, &h, &h, self_layout, dropout)?;
        let drop1 = dropout.apply(&mut a);
        y += &a;
        let (h, norm2) = layer_norm_forward(&layer.cross_norm, &y);
        let (mut c, cross_attn) = attention_forward(&layer.cross_attn, cfg.n_heads, &h, &memory.states, cross_layout, dropout)?;
        let drop2 = dropout.apply(&mut c);
        y += &c;
        let (h, norm3) = layer_norm_forward(&layer.ff_norm, &y);
        let (mut f, ff) = feed_forward_forward(&layer.ff, &h);
        let drop3 = dropout.apply(&mut f);
        y += &f;
        caches.push(DecoderLayerCache { norm1, self_attn, drop1, norm2, cross_attn, drop2, norm3, ff, drop3 });
    }
    let (dec_out, dec_norm) = layer_norm_forward(&params.dec_norm, &y);
    let logits = output_projection(params, &dec_out);
    Ok(DecoderRun { logits, tgt_drop, caches, dec_norm, dec_out })
}

fn check_inputs(cfg: &TransformerConfig, src: &SeqBatch, tgt: &SeqBatch) -> Result<()> {
    cfg.validate()?;
    src.check(cfg.src_vocab, cfg.max_len, "source")?;
    tgt.check(cfg.tgt_vocab, cfg.max_len, "target")?;
    if src.batch_size() != tgt.batch_size() {
        return Err(Error::Shape {
            context: "batch size",
            expected: src.batch_size().to_string(),
            got: tgt.batch_size().to_string(),
        });
    }
    Ok(())
}

/// Teacher-forced forward pass recording activations. Returns logits with
/// one row per `(sentence, target position)`, i.e. `(B·T) × tgt_vocab`.
/// Dropout is active only when `rng` is supplied.
pub fn forward_train(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    src: &SeqBatch,
    tgt_in: &SeqBatch,
    rng: Option<&mut dyn RngCore>,
) -> Result<(Array2<f64>, ForwardCache)> {
    check_inputs(cfg, src, tgt_in)?;
    let mut dropout = Dropout { p: cfg.dropout, rng };
    let (states, src_drop, encoder, enc_norm) = run_encoder(params, cfg, src, &mut dropout)?;
    let memory = Memory { states, lens: src.lens.clone(), width: src.width() };
    let run = run_decoder(params, cfg, &memory, tgt_in, &mut dropout)?;
    let cache = ForwardCache {
        src: src.clone(),
        tgt: tgt_in.clone(),
        src_drop,
        tgt_drop: run.tgt_drop,
        encoder,
        enc_norm,
        decoder: run.caches,
        dec_norm: run.dec_norm,
        dec_out: run.dec_out,
    };
    Ok((run.logits, cache))
}

/// Logits of shape `(batch, tgt_len, tgt_vocab)` with dropout disabled.
pub fn forward_logits(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    src: &SeqBatch,
    tgt_in: &SeqBatch,
) -> Result<Array3<f64>> {
    let (logits, _) = forward_train(params, cfg, src, tgt_in, None)?;
    let (b, t) = (tgt_in.batch_size(), tgt_in.width());
    Ok(logits.into_shape_with_order((b, t, cfg.tgt_vocab)).expect("row count is batch × width"))
}

pub fn encode(params: &TransformerParams, cfg: &TransformerConfig, src: &SeqBatch) -> Result<Memory> {
    cfg.validate()?;
    src.check(cfg.src_vocab, cfg.max_len, "source")?;
    let (states, ..) = run_encoder(params, cfg, src, &mut Dropout::disabled())?;
    Ok(Memory { states, lens: src.lens.clone(), width: src.width() })
}

/// Decoder logits `(B·T) × tgt_vocab` against a precomputed memory.
pub fn decode_logits(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    memory: &Memory,
    tgt_in: &SeqBatch,
) -> Result<Array2<f64>> {
    tgt_in.check(cfg.tgt_vocab, cfg.max_len, "target")?;
    if memory.batch_size() != tgt_in.batch_size() {
        return Err(Error::Shape {
            context: "memory batch",
            expected: tgt_in.batch_size().to_string(),
            got: memory.batch_size().to_string(),
        });
    }
    Ok(run_decoder(params, cfg, memory, tgt_in, &mut Dropout::disabled())?.logits)
}

fn residual_norm_backward(
    norm: &LayerNorm,
    g_norm: &mut LayerNorm,
    cache: &NormCache,
    d_sublayer_in: &Array2<f64>,
    dx: &mut Array2<f64>,
) {
    *dx += &layer_norm_backward(norm, g_norm, cache, d_sublayer_in);
}

/// Exact gradients of a scalar loss given `dlogits = ∂loss/∂logits`.
pub fn backward(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
) -> TransformerParams {
    let mut grads = params.zeros_like();

    let d_dec_out = match &params.out_proj {
        Some(w) => {
            let gw = grads.out_proj.as_mut().expect("same structure");
            ndarray::linalg::general_mat_mul(1.0, &cache.dec_out.t(), dlogits, 1.0, gw);
            dlogits.dot(&w.t())
        }
        None => {
            ndarray::linalg::general_mat_mul(1.0, &dlogits.t(), &cache.dec_out, 1.0, &mut grads.tgt_embed);
            dlogits.dot(&params.tgt_embed)
        }
    };
    grads.out_bias += &dlogits.sum_axis(Axis(0));

    let mut dy = layer_norm_backward(&params.dec_norm, &mut grads.dec_norm, &cache.dec_norm, &d_dec_out);

    let mut d_memory = Array2::zeros((cache.src.batch_size() * cache.src.width(), cfg.d_model));
    for ((layer, g), c) in params.decoder.iter().zip(grads.decoder.iter_mut()).zip(&cache.decoder).rev() {
        let d_ff = dropout_backward(&c.drop3, dy.clone());
        let dh = feed_forward_backward(&layer.ff, &mut g.ff, &c.ff, &d_ff);
        residual_norm_backward(&layer.ff_norm, &mut g.ff_norm, &c.norm3, &dh, &mut dy);

        let d_cross = dropout_backward(&c.drop2, dy.clone());
        let (dh, dmem) = attention_backward(&layer.cross_attn, &mut g.cross_attn, cfg.n_heads, &c.cross_attn, &d_cross);
        d_memory += &dmem;
        residual_norm_backward(&layer.cross_norm, &mut g.cross_norm, &c.norm2, &dh, &mut dy);

        let d_self = dropout_backward(&c.drop1, dy.clone());
        let (dq, dkv) = attention_backward(&layer.self_attn, &mut g.self_attn, cfg.n_heads, &c.self_attn, &d_self);
        residual_norm_backward(&layer.self_norm, &mut g.self_norm, &c.norm1, &(dq + dkv), &mut dy);
    }
    let dy = dropout_backward(&cache.tgt_drop, dy);
    embed_backward(&mut grads.tgt_embed, &cache.tgt, &dy);

    let mut dx = layer_norm_backward(&params.enc_norm, &mut grads.enc_norm, &cache.enc_norm, &d_memory);
    for ((layer, g), c) in params.encoder.iter().zip(grads.encoder.iter_mut()).zip(&cache.encoder).rev() {
        let d_ff = dropout_backward(&c.drop2, dx.clone());
        let dh = feed_forward_backward(&layer.ff, &mut g.ff, &c.ff, &d_ff);
        residual_norm_backward(&layer.ff_norm, &mut g.ff_norm, &c.norm2, &dh, &mut dx);

        let d_attn = dropout_backward(&c.drop1, dx.clone());
        let (dq, dkv) = attention_backward(&layer.self_attn, &mut g.self_attn, cfg.n_heads, &c.attn, &d_attn);
        residual_norm_backward(&layer.self_norm, &mut g.self_norm, &c.norm1, &(dq + dkv), &mut dx);
    }
    let dx = dropout_backward(&cache.src_drop, dx);
    embed_backward(&mut grads.src_embed, &cache.src, &dx);
    grads
}
