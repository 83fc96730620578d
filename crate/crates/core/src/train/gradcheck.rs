use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::Batch;
use crate::error::{Error, Result};
use crate::model::{
    backward, forward_train, label_smoothed_ce, label_smoothed_ce_grad, ParamVisit, TransformerConfig, TransformerParams,
};
use crate::tokenize::PAD_ID;

/// Label-smoothed loss of one batch; dropout is active only when `rng` is given.
pub fn batch_loss(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    batch: &Batch,
    label_smoothing: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<f64> {
    let (logits, _) = forward_train(params, cfg, &batch.src, &batch.tgt_in, rng)?;
    label_smoothed_ce(&logits, &batch.targets(), label_smoothing, PAD_ID)
}

/// Loss and exact gradients for one batch. A non-finite loss is reported
/// before any gradient is propagated.
pub fn loss_and_grads(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    batch: &Batch,
    label_smoothing: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<(f64, TransformerParams)> {
    let (logits, cache) = forward_train(params, cfg, &batch.src, &batch.tgt_in, rng)?;
    let (loss, dlogits) = label_smoothed_ce_grad(&logits, &batch.targets(), label_smoothing, PAD_ID)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "loss".into(), step: 0 });
    }
    Ok((loss, backward(params, cfg, &cache, &dlogits)))
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name of the array holding the worst element.
    pub worst: String,
    /// Analytic and numeric derivative at the worst element.
    pub worst_pair: (f64, f64),
    pub checked: usize,
    /// Elements whose difference quotient straddled a kink and was discarded.
    pub skipped: usize,
}

/// Compares `analytic` with central differences of `loss` on a stratified
/// sample: every array contributes at least `min(per_array, len)` elements
/// and at least `total` elements are checked overall when the model allows.
/// The relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check_with<F>(
    params: &TransformerParams,
    analytic: &TransformerParams,
    loss: F,
    h: f64,
    per_array: usize,
    total: usize,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&TransformerParams) -> f64,
{
    check_pieces(params, analytic, |p| (loss(p), ()), h, per_array, total, seed)
}

/// Like [`grad_check_with`], but `loss` also reports which smooth piece of a
/// piecewise function it evaluated. Elements whose `θ + h` and `θ − h` land
/// on different pieces are counted in `skipped` instead of compared.
fn check_pieces<F, P>(
    params: &TransformerParams,
    analytic: &TransformerParams,
    loss: F,
    h: f64,
    per_array: usize,
    total: usize,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&TransformerParams) -> (f64, P),
    P: PartialEq,
{
    let mut sizes = Vec::new();
    params.visit("", &mut |name, a| sizes.push((name, a.len())));
    let per = per_array.max(total.div_ceil(sizes.len().max(1)));
    let mut grads = Vec::new();
    analytic.visit("", &mut |_, a| grads.push(a.iter().copied().collect::<Vec<f64>>()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), worst_pair: (0.0, 0.0), checked: 0, skipped: 0 };
    for (arr, (name, len)) in sizes.iter().enumerate() {
        for elem in sample(&mut rng, *len, per.min(*len)).into_iter() {
            let orig = get_scalar(&work, arr, elem);
            set_scalar(&mut work, arr, elem, orig + h);
            let (up, up_piece) = loss(&work);
            set_scalar(&mut work, arr, elem, orig - h);
            let (down, down_piece) = loss(&work);
            set_scalar(&mut work, arr, elem, orig);
            if up_piece != down_piece {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = grads[arr][elem];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = name.clone();
                report.worst_pair = (a, numeric);
            }
            report.checked += 1;
        }
    }
    report
}

/// Finite-difference check of the transformer's own backward pass on `batch`
/// with dropout disabled. Differences that cross a ReLU kink are skipped.
pub fn grad_check(
    params: &TransformerParams,
    cfg: &TransformerConfig,
    batch: &Batch,
    label_smoothing: f64,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(params, cfg, batch, label_smoothing, None)?;
    let loss = |p: &TransformerParams| {
        let (logits, cache) = forward_train(p, cfg, &batch.src, &batch.tgt_in, None).expect("validated above");
        let l = label_smoothed_ce(&logits, &batch.targets(), label_smoothing, PAD_ID).expect("validated above");
        (l, cache.relu_pattern())
    };
    Ok(check_pieces(params, &grads, loss, h, 8, 200, seed))
}

fn get_scalar(p: &TransformerParams, arr: usize, elem: usize) -> f64 {
    let mut i = 0;
    let mut out = 0.0;
    p.visit("", &mut |_, a| {
        if i == arr {
            out = *a.iter().nth(elem).expect("element in range");
        }
        i += 1;
    });
    out
}

fn set_scalar(p: &mut TransformerParams, arr: usize, elem: usize, value: f64) {
    let mut i = 0;
    p.visit_mut("", &mut |_, mut a| {
        if i == arr {
            *a.iter_mut().nth(elem).expect("element in range") = value;
        }
        i += 1;
    });
}
