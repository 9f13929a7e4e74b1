//! Binary and categorical cross-entropy, each returning the loss and its gradient.

use super::layers::softmax_rows;
use super::tensor::{Real, Tensor};
use super::NnError;

/// Mean binary cross-entropy of `logits` against `targets`, and `dL/dlogits`.
///
/// Uses `max(l,0) − l·t + ln(1 + e^{−|l|})`, which never overflows.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, targets: &[bool]) -> Result<(T, Tensor<T>), NnError> {
    bce_with_logits_weighted(logits, targets, 1.0)
}

/// [`bce_with_logits`] with occupied voxels weighted by `pos_weight`.
pub fn bce_with_logits_weighted<T: Real>(
    logits: &Tensor<T>,
    targets: &[bool],
    pos_weight: f64,
) -> Result<(T, Tensor<T>), NnError> {
    if logits.len() != targets.len() {
        return Err(NnError::Shape(format!("{} logits vs {} targets", logits.len(), targets.len())));
    }
    let n = T::lit(logits.len().max(1) as f64);
    let pw = T::lit(pos_weight);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(logits.shape());
    for ((&l, &t), g) in logits.data().iter().zip(targets).zip(grad.data_mut()) {
        let e = (-l.abs()).exp();
        let softplus_neg_abs = e.ln_1p();
        let sig = if l >= T::zero() { T::one() / (T::one() + e) } else { e / (T::one() + e) };
        if t {
            // −ln σ(l) = max(−l, 0) + ln(1 + e^{−|l|})
            loss += pw * ((-l).max(T::zero()) + softplus_neg_abs);
            *g = pw * (sig - T::one()) / n;
        } else {
            loss += l.max(T::zero()) + softplus_neg_abs;
            *g = sig / n;
        }
    }
    Ok((loss / n, grad))
}

/// Mean negative log-softmax over the positions where `mask` is true.
pub fn cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(T, Tensor<T>), NnError> {
    cross_entropy_smoothed(logits, targets, mask, 0.0)
}

/// [`cross_entropy`] against `(1−ε)·onehot + ε/K` targets.
pub fn cross_entropy_smoothed<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
    smoothing: f64,
) -> Result<(T, Tensor<T>), NnError> {
    let (n, k) = (logits.rows(), logits.cols());
    if targets.len() != n || mask.len() != n || logits.shape().len() != 2 {
        return Err(NnError::Shape(format!(
            "logits {:?}, {} targets, {} mask entries",
            logits.shape(),
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= k) {
        return Err(NnError::Shape(format!("target {bad} out of range for {k} classes")));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(NnError::EmptyMask);
    }
    let mut probs = logits.data().to_vec();
    softmax_rows(&mut probs, k);
    let inv = T::lit(1.0 / count as f64);
    let off = T::lit(smoothing / k as f64);
    let on = T::lit(1.0 - smoothing) + off;
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(logits.shape());
    for i in (0..n).filter(|&i| mask[i]) {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let g = grad.row_mut(i);
        for c in 0..k {
            let q = if c == targets[i] { on } else { off };
            if q > T::zero() {
                loss -= q * (row[c] - lse);
            }
            g[c] = (probs[i * k + c] - q) * inv;
        }
    }
    Ok((loss * inv, grad))
}
