use ndarray::Array2;

use crate::error::{Error, Result};

/// Loss and its gradient with respect to the logits.
pub struct LossOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
}

fn check(logits: &Array2<f64>, targets: &[usize]) -> Result<()> {
    if logits.nrows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= logits.ncols()) {
        return Err(Error::InvalidInput(format!(
            "target {t} out of range for {} classes",
            logits.ncols()
        )));
    }
    Ok(())
}

/// Per-row `(log softmax at target, softmax)` computed stably.
fn log_softmax_rows(logits: &Array2<f64>, targets: &[usize]) -> (Vec<f64>, Array2<f64>) {
    let mut probs = logits.clone();
    let mut logp = Vec::with_capacity(targets.len());
    for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        logp.push(row[t] - lse);
        row.mapv_inplace(|v| (v - lse).exp());
    }
    (logp, probs)
}

/// Class weight `α_t`: `alpha` for class 1 (ALL), `1 - alpha` for class 0.
pub fn alpha_t(alpha: f64, target: usize) -> f64 {
    if target == 1 {
        alpha
    } else {
        1.0 - alpha
    }
}

/// Mean focal loss `-α_t (1 - p_t)^γ log p_t` over the batch.
pub fn focal_loss(logits: &Array2<f64>, targets: &[usize], alpha: f64, gamma: f64) -> Result<LossOutput> {
    check(logits, targets)?;
    let n = targets.len() as f64;
    let (logp, probs) = log_softmax_rows(logits, targets);
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, &t) in targets.iter().enumerate() {
        let pt = probs[[i, t]];
        // 1 - p_t from the other classes' mass, which keeps precision near p_t = 1
        let q: f64 = probs
            .row(i)
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != t)
            .map(|(_, p)| p)
            .sum();
        let a = alpha_t(alpha, t);
        let mod_factor = q.powf(gamma);
        loss += -a * mod_factor * logp[i];
        // dFL/dz_j = a [γ q^(γ-1) p_t log p_t - q^γ] (δ_tj - p_j)
        let inner = if gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * pt * logp[i]
        };
        let coef = a * (inner - mod_factor) / n;
        for j in 0..logits.ncols() {
            let delta = if j == t { 1.0 } else { 0.0 };
            grad[[i, j]] = coef * (delta - probs[[i, j]]);
        }
    }
    Ok(LossOutput { loss: loss / n, grad })
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> Result<LossOutput> {
    check(logits, targets)?;
    let n = targets.len() as f64;
    let (logp, probs) = log_softmax_rows(logits, targets);
    let mut grad = probs;
    for (i, &t) in targets.iter().enumerate() {
        grad[[i, t]] -= 1.0;
    }
    grad /= n;
    Ok(LossOutput {
        loss: -logp.iter().sum::<f64>() / n,
        grad,
    })
}
