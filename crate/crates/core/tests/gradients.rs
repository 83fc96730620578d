use ndarray::{Array1, Array2};
use nmtforge::model::{positional_encoding, TransformerConfig, TransformerParams};
use nmtforge::tokenize::{BOS_ID, EOS_ID};
use nmtforge::train::{grad_check, grad_check_with, loss_and_grads, Batch, Example};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(seed: u64, cfg: &TransformerConfig) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples: Vec<Example> = (0..2)
        .map(|_| {
            let sl = rng.random_range(2..6);
            let tl = rng.random_range(2..6);
            let src = (0..sl).map(|_| rng.random_range(4..cfg.src_vocab)).collect();
            let tgt = (0..tl).map(|_| rng.random_range(4..cfg.tgt_vocab)).collect();
            Example::new(src, tgt)
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    Batch::from_examples(&refs)
}

fn init(cfg: &TransformerConfig, seed: u64) -> TransformerParams {
    TransformerParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn tiny_preset_passes_on_five_seeds() {
    let cfg = TransformerConfig::tiny(17, 19);
    for seed in 0..5 {
        let params = init(&cfg, 100 + seed);
        let batch = random_batch(seed, &cfg);
        let report = grad_check(&params, &cfg, &batch, 0.1, 1e-5, seed).unwrap();
        assert!(report.checked >= 200, "{report:?}");
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn tied_output_projection() {
    let mut cfg = TransformerConfig::tiny(11, 13);
    cfg.tie_output = true;
    cfg.n_layers = 1;
    let params = init(&cfg, 7);
    assert!(params.out_proj.is_none());
    let report = grad_check(&params, &cfg, &random_batch(9, &cfg), 0.1, 1e-5, 1).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn corrupted_gradient_is_caught() {
    let cfg = TransformerConfig::tiny(17, 19);
    let params = init(&cfg, 5);
    let batch = random_batch(5, &cfg);
    let (_, mut grads) = loss_and_grads(&params, &cfg, &batch, 0.1, None).unwrap();
    grads.decoder[0].ff.inner.weight *= 2.0;
    let loss = |p: &TransformerParams| nmtforge::train::batch_loss(p, &cfg, &batch, 0.1, None).unwrap();
    let report = grad_check_with(&params, &grads, loss, 1e-5, 8, 200, 3);
    assert!(report.max_rel_error > 0.3, "{report:?}");
    assert_eq!(report.worst, "decoder.0.ff.inner.weight");
}

#[test]
fn constant_loss_has_zero_error() {
    let cfg = TransformerConfig::tiny(7, 7);
    let params = init(&cfg, 1);
    let zeros = params.zeros_like();
    let report = grad_check_with(&params, &zeros, |_| 4.25, 1e-5, 8, 200, 0);
    assert_eq!(report.max_rel_error, 0.0);
    assert!(report.checked >= 200);
}

/// With no layers the decoder reduces to `LayerNorm(√d·E[y] + PE)` followed
/// by the output projection, so the projection gradients are those of
/// softmax regression on those features.
#[test]
fn zero_layer_model_is_softmax_regression() {
    let mut cfg = TransformerConfig::tiny(6, 8);
    cfg.n_layers = 0;
    cfg.d_model = 4;
    cfg.n_heads = 1;
    let mut params = init(&cfg, 11);
    params.dec_norm.gain = Array1::from(vec![1.3, 0.7, -0.4, 2.0]);
    params.dec_norm.bias = Array1::from(vec![0.1, -0.2, 0.0, 0.5]);
    let ex = [Example::new(vec![4, 5], vec![6, 7, 5]), Example::new(vec![5], vec![4])];
    let batch = Batch::from_examples(&[&ex[0], &ex[1]]);
    let (_, grads) = loss_and_grads(&params, &cfg, &batch, 0.0, None).unwrap();

    let d = cfg.d_model;
    let pe = positional_encoding(cfg.max_len, d).unwrap();
    let w = params.out_proj.clone().unwrap();
    let mut gw = Array2::<f64>::zeros(w.dim());
    let mut gb = Array1::<f64>::zeros(cfg.tgt_vocab);
    let rows: Vec<(Vec<usize>, Vec<usize>)> = ex
        .iter()
        .map(|e| {
            let input = std::iter::once(BOS_ID).chain(e.tgt.iter().copied()).collect();
            let gold = e.tgt.iter().copied().chain(std::iter::once(EOS_ID)).collect();
            (input, gold)
        })
        .collect();
    let n: usize = rows.iter().map(|(i, _)| i.len()).sum();
    for (input, gold) in &rows {
        for (t, (&tok, &y)) in input.iter().zip(gold).enumerate() {
            let x: Vec<f64> = (0..d).map(|k| params.tgt_embed[[tok, k]] * (d as f64).sqrt() + pe[[t, k]]).collect();
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let feat: Vec<f64> =
                (0..d).map(|k| (x[k] - mean) / (var + 1e-6).sqrt() * params.dec_norm.gain[k] + params.dec_norm.bias[k]).collect();
            let z: Vec<f64> =
                (0..cfg.tgt_vocab).map(|c| params.out_bias[c] + (0..d).map(|k| feat[k] * w[[k, c]]).sum::<f64>()).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            for c in 0..cfg.tgt_vocab {
                let p = (z[c] - m).exp() / s;
                let r = (p - if c == y { 1.0 } else { 0.0 }) / n as f64;
                gb[c] += r;
                for k in 0..d {
                    gw[[k, c]] += feat[k] * r;
                }
            }
        }
    }
    let got_w = grads.out_proj.unwrap();
    for (a, b) in got_w.iter().zip(gw.iter()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    for (a, b) in grads.out_bias.iter().zip(gb.iter()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert!(grads.src_embed.iter().all(|&v| v == 0.0));
}

#[test]
fn unused_embedding_rows_get_zero_gradient() {
    let cfg = TransformerConfig::tiny(20, 20);
    let params = init(&cfg, 2);
    let ex = Example::new(vec![4, 5, 6], vec![7, 8]);
    let batch = Batch::from_examples(&[&ex]);
    let (_, g) = loss_and_grads(&params, &cfg, &batch, 0.1, None).unwrap();
    for tok in 9..20 {
        assert!(g.src_embed.row(tok).iter().all(|&v| v == 0.0));
        assert!(g.tgt_embed.row(tok).iter().all(|&v| v == 0.0));
    }
    assert!(g.src_embed.row(4).iter().any(|&v| v != 0.0));
}
