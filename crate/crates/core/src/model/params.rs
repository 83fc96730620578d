use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, Uniform};

use super::TransformerConfig;

/// Visits every trainable array with a stable dotted name, in a fixed order.
pub trait ParamVisit {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! leaf_visit {
    ($($field:ident),+) => {
        fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
            $( f(join(prefix, stringify!($field)), self.$field.view().into_dyn()); )+
        }
        fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
            $( f(join(prefix, stringify!($field)), self.$field.view_mut().into_dyn()); )+
        }
    };
}

macro_rules! node_visit {
    ($($field:ident),+) => {
        fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
            $( self.$field.visit(&join(prefix, stringify!($field)), f); )+
        }
        fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
            $( self.$field.visit_mut(&join(prefix, stringify!($field)), f); )+
        }
    };
}

/// Affine map `x · weight + bias` with `weight` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ParamVisit for Linear {
    leaf_visit!(weight, bias);
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl ParamVisit for LayerNorm {
    leaf_visit!(gain, bias);
}

/// Bias-free map `x · weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Array2<f64>,
}

impl ParamVisit for Projection {
    leaf_visit!(weight);
}

/// The key projection has no bias: it would add the same amount to every
/// score of a query, which the softmax cancels, so its gradient is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Projection,
    pub value: Linear,
    pub output: Linear,
}

impl ParamVisit for Attention {
    node_visit!(query, key, value, output);
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl ParamVisit for FeedForward {
    node_visit!(inner, outer);
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: Attention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl ParamVisit for EncoderLayer {
    node_visit!(self_norm, self_attn, ff_norm, ff);
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: Attention,
    pub cross_norm: LayerNorm,
    pub cross_attn: Attention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl ParamVisit for DecoderLayer {
    node_visit!(self_norm, self_attn, cross_norm, cross_attn, ff_norm, ff);
}

impl<T: ParamVisit> ParamVisit for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// All trainable arrays of the encoder-decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    /// `src_vocab × d_model`
    pub src_embed: Array2<f64>,
    /// `tgt_vocab × d_model`
    pub tgt_embed: Array2<f64>,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
    /// `d_model × tgt_vocab`; absent when tied to `tgt_embed`.
    pub out_proj: Option<Array2<f64>>,
    pub out_bias: Array1<f64>,
}

impl ParamVisit for TransformerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        f(join(prefix, "src_embed"), self.src_embed.view().into_dyn());
        f(join(prefix, "tgt_embed"), self.tgt_embed.view().into_dyn());
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.enc_norm.visit(&join(prefix, "enc_norm"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.dec_norm.visit(&join(prefix, "dec_norm"), f);
        if let Some(w) = &self.out_proj {
            f(join(prefix, "out_proj"), w.view().into_dyn());
        }
        f(join(prefix, "out_bias"), self.out_bias.view().into_dyn());
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        f(join(prefix, "src_embed"), self.src_embed.view_mut().into_dyn());
        f(join(prefix, "tgt_embed"), self.tgt_embed.view_mut().into_dyn());
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.enc_norm.visit_mut(&join(prefix, "enc_norm"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.dec_norm.visit_mut(&join(prefix, "dec_norm"), f);
        if let Some(w) = &mut self.out_proj {
            f(join(prefix, "out_proj"), w.view_mut().into_dyn());
        }
        f(join(prefix, "out_bias"), self.out_bias.view_mut().into_dyn());
    }
}

fn xavier(rng: &mut dyn RngCore, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

fn linear(rng: &mut dyn RngCore, fan_in: usize, fan_out: usize) -> Linear {
    Linear { weight: xavier(rng, fan_in, fan_out), bias: Array1::zeros(fan_out) }
}

fn layer_norm(d: usize) -> LayerNorm {
    LayerNorm { gain: Array1::ones(d), bias: Array1::zeros(d) }
}

fn attention(rng: &mut dyn RngCore, d: usize) -> Attention {
    Attention {
        query: linear(rng, d, d),
        key: Projection { weight: xavier(rng, d, d) },
        value: linear(rng, d, d),
        output: linear(rng, d, d),
    }
}

fn feed_forward(rng: &mut dyn RngCore, d: usize, d_ff: usize) -> FeedForward {
    FeedForward { inner: linear(rng, d, d_ff), outer: linear(rng, d_ff, d) }
}

impl TransformerParams {
    /// Xavier-uniform projections, `N(0, d_model^-1/2)` embeddings, unit
    /// layer-norm gains and zero biases.
    pub fn init(cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        let rng: &mut dyn RngCore = rng;
        let d = cfg.d_model;
        let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("positive std");
        let embed = |rows: usize, rng: &mut dyn RngCore| Array2::from_shape_simple_fn((rows, d), || normal.sample(rng));
        let src_embed = embed(cfg.src_vocab, rng);
        let tgt_embed = embed(cfg.tgt_vocab, rng);
        let encoder = (0..cfg.n_layers)
            .map(|_| EncoderLayer {
                self_norm: layer_norm(d),
                self_attn: attention(rng, d),
                ff_norm: layer_norm(d),
                ff: feed_forward(rng, d, cfg.d_ff),
            })
            .collect();
        let decoder = (0..cfg.n_layers)
            .map(|_| DecoderLayer {
                self_norm: layer_norm(d),
                self_attn: attention(rng, d),
                cross_norm: layer_norm(d),
                cross_attn: attention(rng, d),
                ff_norm: layer_norm(d),
                ff: feed_forward(rng, d, cfg.d_ff),
            })
            .collect();
        let out_proj = (!cfg.tie_output).then(|| xavier(rng, d, cfg.tgt_vocab));
        TransformerParams {
            src_embed,
            tgt_embed,
            encoder,
            enc_norm: layer_norm(d),
            decoder,
            dec_norm: layer_norm(d),
            out_proj,
            out_bias: Array1::zeros(cfg.tgt_vocab),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, mut a| a.fill(0.0));
        z
    }

    pub fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, a| out.push((name, a.shape().to_vec())));
        out
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }

    /// Copies of every array in visit order.
    pub fn to_arrays(&self) -> Vec<(String, ndarray::ArrayD<f64>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, a| out.push((name, a.to_owned())));
        out
    }
}
