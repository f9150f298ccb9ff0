use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / n`. Logits are `[n, k, 1, 1]`; the loss is
/// accumulated in f64 with log-sum-exp stabilization.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(dim_err(format!("logits must be [n, k, 1, 1], got {s}")));
    }
    if labels.len() != s.n {
        return Err(dim_err(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    let k = s.c;
    let mut grad = Tensor::zeros(s);
    let mut total = 0.0f64;
    for (b, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Data(format!("label {label} outside [0, {k})")));
        }
        let row: Vec<f64> = logits.data()[b * k..(b + 1) * k]
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label];
        let g = &mut grad.data_mut()[b * k..(b + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            let onehot = if j == label { 1.0 } else { 0.0 };
            *gj = T::from_f64_lossy((p - onehot) / s.n as f64);
        }
    }
    Ok((total / s.n as f64, grad))
}

/// Index of the largest logit per sample (first on ties).
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().c;
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
        })
        .collect()
}
