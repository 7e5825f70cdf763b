//! Softmax and cross-entropy over logit batches.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax, shifted by the row max for stability.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if !logits.is_matrix() {
        return Err(Error::ShapeMismatch(format!(
            "softmax expects a matrix, got {:?}",
            logits.shape()
        )));
    }
    logits.check_finite("softmax input")?;
    let (n, m) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[i * m + j] = e;
            sum += e;
        }
        for j in 0..m {
            out[i * m + j] /= sum;
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
///
/// Returns the loss and its gradient with respect to the logits
/// (`(softmax - onehot) / n`).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if !logits.is_matrix() || logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let n = labels.len();
    let probs = softmax(logits)?;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    {
        let gd = grad.data_mut();
        for (i, &label) in labels.iter().enumerate() {
            let p = probs.at(i, label);
            // log of the softmax via the stable route: ln(p) with p already
            // normalized; p > 0 because exp(shifted) > 0.
            loss -= p.ln();
            gd[i * classes + label] -= 1.0;
        }
        for g in gd.iter_mut() {
            *g /= n as f64;
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}
