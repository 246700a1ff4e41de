use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax with the usual max shift.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let k = match *logits.shape() {
        [_, k] => k,
        ref s => return Err(Error::shape("softmax", format!("expected [B, K], got {s:?}"))),
    };
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean over the batch of `-log softmax(logits)[label]`, with the gradient
/// with respect to `logits`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = match *logits.shape() {
        [b, k] => (b, k),
        ref s => return Err(Error::shape("softmax_cross_entropy", format!("expected [B, K], got {s:?}"))),
    };
    if k < 2 {
        return Err(Error::invalid("softmax_cross_entropy", format!("need at least 2 classes, got {k}")));
    }
    if labels.len() != b {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for a batch of {b}", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * k);
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - row[y];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            grad.push((p - if j == y { 1.0 } else { 0.0 }) / b as f64);
        }
    }
    let loss = loss / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy".into()));
    }
    Ok((loss, Tensor::new(vec![b, k], grad)?))
}
