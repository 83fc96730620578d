use ndarray::Array2;

use crate::error::{Error, Result};

/// Mean label-smoothed cross-entropy over rows whose target is not `pad_id`.
/// The gold token gets `1 − ε` mass and every other class `ε / (V − 1)`.
pub fn label_smoothed_ce(logits: &Array2<f64>, targets: &[usize], epsilon: f64, pad_id: usize) -> Result<f64> {
    compute(logits, targets, epsilon, pad_id, false).map(|(l, _)| l)
}

/// Loss together with its gradient with respect to `logits`.
pub fn label_smoothed_ce_grad(
    logits: &Array2<f64>,
    targets: &[usize],
    epsilon: f64,
    pad_id: usize,
) -> Result<(f64, Array2<f64>)> {
    compute(logits, targets, epsilon, pad_id, true).map(|(l, g)| (l, g.expect("requested")))
}

fn compute(
    logits: &Array2<f64>,
    targets: &[usize],
    epsilon: f64,
    pad_id: usize,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    let (n, v) = logits.dim();
    if targets.len() != n {
        return Err(Error::Shape { context: "loss targets", expected: n.to_string(), got: targets.len().to_string() });
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!("label smoothing {epsilon} outside [0, 1)")));
    }
    if epsilon > 0.0 && v < 2 {
        return Err(Error::Config("label smoothing needs at least two classes".into()));
    }
    let active = targets.iter().filter(|&&t| t != pad_id).count();
    if active == 0 {
        return Err(Error::AllPadded);
    }
    let off = if v > 1 { epsilon / (v - 1) as f64 } else { 0.0 };
    let on = 1.0 - epsilon;
    let norm = active as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Array2::zeros((n, v)));
    for (r, (row, &gold)) in logits.rows().into_iter().zip(targets).enumerate() {
        if gold == pad_id {
            continue;
        }
        if gold >= v {
            return Err(Error::IdOutOfRange { id: gold, size: v });
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let mut row_loss = 0.0;
        for (k, &x) in row.iter().enumerate() {
            let q = if k == gold { on } else { off };
            if q != 0.0 {
                row_loss -= q * (x - lse);
            }
        }
        total += row_loss;
        if let Some(g) = grad.as_mut() {
            for (k, (&x, gk)) in row.iter().zip(g.row_mut(r)).enumerate() {
                let q = if k == gold { on } else { off };
                *gk = ((x - lse).exp() - q) / norm;
            }
        }
    }
    Ok((total / norm, grad))
}
