//! Forward and backward kernels for the building blocks of the Transformer.
//!
//! Activations are row-major matrices with one row per (sequence, position).
//! Every `*_backward` accumulates parameter gradients into the matching
//! gradient struct and returns the gradient with respect to its input.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore};

use super::params::{Attention, FeedForward, LayerNorm, Linear};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Sinusoidal position table: `(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Array2<f64>> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs an even d_model, got {d_model}")));
    }
    let mut pe = Array2::zeros((max_len, d_model));
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(pe)
}

pub(crate) fn linear_forward(p: &Linear, x: &Array2<f64>) -> Array2<f64> {
    x.dot(&p.weight) + &p.bias
}

pub(crate) fn linear_backward(p: &Linear, g: &mut Linear, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, &mut g.weight);
    g.bias += &dy.sum_axis(Axis(0));
    dy.dot(&p.weight.t())
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm_forward(p: &LayerNorm, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row *= *inv;
    }
    let y = &xhat * &p.gain + &p.bias;
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(p: &LayerNorm, g: &mut LayerNorm, cache: &NormCache, dy: &Array2<f64>) -> Array2<f64> {
    g.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    g.bias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * &p.gain;
    for ((mut row, xhat), inv) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.inv_std.iter()) {
        let mean_g = row.sum() / d;
        let mean_gx = row.dot(&xhat) / d;
        Zip::from(&mut row).and(&xhat).for_each(|v, &xh| *v = inv * (*v - mean_g - xh * mean_gx));
    }
    dx
}

/// Inverted dropout. `rng = None` disables it.
pub(crate) struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl Dropout<'_> {
    pub fn disabled() -> Dropout<'static> {
        Dropout { p: 0.0, rng: None }
    }

    /// Applies dropout in place and returns the scaling mask, if any.
    pub fn apply(&mut self, x: &mut Array2<f64>) -> Option<Array2<f64>> {
        let rng = self.rng.as_deref_mut()?;
        if self.p <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.p;
        let mask = Array2::from_shape_simple_fn(x.raw_dim(), || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        *x *= &mask;
        Some(mask)
    }
}

pub(crate) fn dropout_backward(mask: &Option<Array2<f64>>, dy: Array2<f64>) -> Array2<f64> {
    match mask {
        Some(m) => dy * m,
        None => dy,
    }
}

pub(crate) struct FfCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
}

impl FfCache {
    pub(crate) fn active(&self) -> impl Iterator<Item = bool> + '_ {
        self.hidden.iter().map(|&h| h > 0.0)
    }
}

pub(crate) fn feed_forward_forward(p: &FeedForward, x: &Array2<f64>) -> (Array2<f64>, FfCache) {
    let mut hidden = linear_forward(&p.inner, x);
    hidden.mapv_inplace(|v| v.max(0.0));
    let y = linear_forward(&p.outer, &hidden);
    (y, FfCache { input: x.clone(), hidden })
}

pub(crate) fn feed_forward_backward(p: &FeedForward, g: &mut FeedForward, cache: &FfCache, dy: &Array2<f64>) -> Array2<f64> {
    let mut dh = linear_backward(&p.outer, &mut g.outer, &cache.hidden, dy);
    Zip::from(&mut dh).and(&cache.hidden).for_each(|d, &h| {
        if h <= 0.0 {
            *d = 0.0
        }
    });
    linear_backward(&p.inner, &mut g.inner, &cache.input, &dh)
}

/// Row softmax of `scores` restricted to `allowed` entries; disallowed
/// entries get exactly zero weight.
fn masked_softmax(scores: &mut Array2<f64>, allowed: impl Fn(usize, usize) -> bool, row_offset: usize) -> Result<()> {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed(i, j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateMask { row: row_offset + i });
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if allowed(i, j) { (*v - max).exp() } else { 0.0 };
            sum += *v;
        }
        row /= sum;
    }
    Ok(())
}

/// Attention weights `softmax(Q Kᵀ / √d_k)` with `mask[i][j] = true` marking
/// disallowed positions.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>, mask: Option<&Array2<bool>>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::Shape {
            context: "attention key width",
            expected: format!("{}", q.ncols()),
            got: format!("{}", k.ncols()),
        });
    }
    if let Some(m) = mask {
        if m.dim() != (q.nrows(), k.nrows()) {
            return Err(Error::Shape {
                context: "attention mask",
                expected: format!("{}x{}", q.nrows(), k.nrows()),
                got: format!("{}x{}", m.nrows(), m.ncols()),
            });
        }
    }
    let mut scores = q.dot(&k.t()) / (q.ncols() as f64).sqrt();
    masked_softmax(&mut scores, |i, j| mask.is_none_or(|m| !m[[i, j]]), 0)?;
    Ok(scores)
}

/// `softmax(Q Kᵀ / √d_k + mask) · V`.
pub fn scaled_dot_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    mask: Option<&Array2<bool>>,
) -> Result<Array2<f64>> {
    if k.nrows() != v.nrows() {
        return Err(Error::Shape {
            context: "attention values",
            expected: format!("{} rows", k.nrows()),
            got: format!("{} rows", v.nrows()),
        });
    }
    Ok(attention_weights(q, k, mask)?.dot(&v))
}

/// Layout of a batch of padded sequences flattened to rows.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout<'a> {
    pub batch: usize,
    pub q_width: usize,
    pub k_width: usize,
    /// Valid key count per sequence; keys at or past it are padding.
    pub k_lens: &'a [usize],
    pub causal: bool,
}

pub(crate) struct AttnCache {
    x_q: Array2<f64>,
    x_kv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// One `(q_width × k_width)` weight matrix per (sequence, head), pre-dropout.
    probs: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    ctx: Array2<f64>,
    batch: usize,
    q_width: usize,
    k_width: usize,
}

pub(crate) fn attention_forward(
    p: &Attention,
    n_heads: usize,
    x_q: &Array2<f64>,
    x_kv: &Array2<f64>,
    layout: Layout<'_>,
    dropout: &mut Dropout<'_>,
) -> Result<(Array2<f64>, AttnCache)> {
    let d = x_q.ncols();
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = linear_forward(&p.query, x_q);
    let k = x_kv.dot(&p.key.weight);
    let v = linear_forward(&p.value, x_kv);
    let (tq, tk) = (layout.q_width, layout.k_width);
    let mut ctx = Array2::zeros((layout.batch * tq, d));
    let mut probs = Vec::with_capacity(layout.batch * n_heads);
    let mut masks = Vec::with_capacity(layout.batch * n_heads);
    for b in 0..layout.batch {
        let klen = layout.k_lens[b];
        let causal = layout.causal;
        let allowed = |i: usize, j: usize| j < klen && (!causal || j <= i);
        for h in 0..n_heads {
            let cols = h * dk..(h + 1) * dk;
            let qb = q.slice(s![b * tq..(b + 1) * tq, cols.clone()]);
            let kb = k.slice(s![b * tk..(b + 1) * tk, cols.clone()]);
            let vb = v.slice(s![b * tk..(b + 1) * tk, cols.clone()]);
            let mut weights = qb.dot(&kb.t()) * scale;
            masked_softmax(&mut weights, allowed, b * tq)?;
            let mut dropped = weights.clone();
            let mask = dropout.apply(&mut dropped);
            ctx.slice_mut(s![b * tq..(b + 1) * tq, cols]).assign(&dropped.dot(&vb));
            probs.push(weights);
            masks.push(mask);
        }
    }
    let out = linear_forward(&p.output, &ctx);
    Ok((
        out,
        AttnCache {
            x_q: x_q.clone(),
            x_kv: x_kv.clone(),
            q,
            k,
            v,
            probs,
            masks,
            ctx,
            batch: layout.batch,
            q_width: tq,
            k_width: tk,
        },
    ))
}

/// Returns `(d x_q, d x_kv)`.
pub(crate) fn attention_backward(
    p: &Attention,
    g: &mut Attention,
    n_heads: usize,
    cache: &AttnCache,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let d = cache.q.ncols();
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let (tq, tk) = (cache.q_width, cache.k_width);
    let dctx = linear_backward(&p.output, &mut g.output, &cache.ctx, dy);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dkm = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for b in 0..cache.batch {
        for h in 0..n_heads {
            let idx = b * n_heads + h;
            let cols = h * dk..(h + 1) * dk;
            let qrows = b * tq..(b + 1) * tq;
            let krows = b * tk..(b + 1) * tk;
            let probs = &cache.probs[idx];
            let dropped = match &cache.masks[idx] {
                Some(m) => probs * m,
                None => probs.clone(),
            };
            let dctx_b = dctx.slice(s![qrows.clone(), cols.clone()]);
            let qb = cache.q.slice(s![qrows.clone(), cols.clone()]);
            let kb = cache.k.slice(s![krows.clone(), cols.clone()]);
            let vb = cache.v.slice(s![krows.clone(), cols.clone()]);

            let mut dv_b = dv.slice_mut(s![krows.clone(), cols.clone()]);
            ndarray::linalg::general_mat_mul(1.0, &dropped.t(), &dctx_b, 1.0, &mut dv_b);

            let mut dp = dctx_b.dot(&vb.t());
            if let Some(m) = &cache.masks[idx] {
                dp *= m;
            }
            // softmax backward: dS = P ∘ (dP − rowsum(dP ∘ P))
            for (mut drow, prow) in dp.rows_mut().into_iter().zip(probs.rows()) {
                let dot = drow.dot(&prow);
                Zip::from(&mut drow).and(&prow).for_each(|dv, &pv| *dv = pv * (*dv - dot) * scale);
            }
            let mut dq_b = dq.slice_mut(s![qrows, cols.clone()]);
            ndarray::linalg::general_mat_mul(1.0, &dp, &kb, 1.0, &mut dq_b);
            let mut dk_b = dkm.slice_mut(s![krows, cols]);
            ndarray::linalg::general_mat_mul(1.0, &dp.t(), &qb, 1.0, &mut dk_b);
        }
    }
    let dx_q = linear_backward(&p.query, &mut g.query, &cache.x_q, &dq);
    ndarray::linalg::general_mat_mul(1.0, &cache.x_kv.t(), &dkm, 1.0, &mut g.key.weight);
    let mut dx_kv = dkm.dot(&p.key.weight.t());
    dx_kv += &linear_backward(&p.value, &mut g.value, &cache.x_kv, &dv);
    (dx_q, dx_kv)
}

/// Multi-head attention over a single query sequence and key/value sequence.
/// `mask[i][j] = true` forbids query `i` from attending to key `j`.
pub fn multi_head_attention(
    p: &Attention,
    n_heads: usize,
    x_q: &Array2<f64>,
    x_kv: &Array2<f64>,
    mask: Option<&Array2<bool>>,
) -> Result<Array2<f64>> {
    let d = p.query.weight.nrows();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!("{n_heads} heads do not divide width {d}")));
    }
    for (ctx, x) in [("query input width", x_q), ("key/value input width", x_kv)] {
        if x.ncols() != d {
            return Err(Error::Shape { context: ctx, expected: d.to_string(), got: x.ncols().to_string() });
        }
    }
    let dk = d / n_heads;
    let q = linear_forward(&p.query, x_q);
    let k = x_kv.dot(&p.key.weight);
    let v = linear_forward(&p.value, x_kv);
    let mut ctx = Array2::zeros((x_q.nrows(), d));
    for h in 0..n_heads {
        let cols = h * dk..(h + 1) * dk;
        let head = scaled_dot_attention(
            q.slice(s![.., cols.clone()]),
            k.slice(s![.., cols.clone()]),
            v.slice(s![.., cols.clone()]),
            mask,
        )?;
        ctx.slice_mut(s![.., cols]).assign(&head);
    }
    Ok(linear_forward(&p.output, &ctx))
}
