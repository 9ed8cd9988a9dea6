use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over a batch of logits `[B, C]`.
///
/// Returns the loss, its gradient with respect to the logits, and the number
/// of rows whose arg-max equals the label.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>, usize)> {
    let [b, c] = *logits.shape() else {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    };
    if labels.len() != b {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Invariant(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let inv_b = T::of(1.0 / b as f64);
    let mut loss = T::zero();
    let mut correct = 0;
    let mut grad = Vec::with_capacity(b * c);
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for &v in row {
            total += (v - max).exp();
        }
        let log_z = max + total.ln();
        loss += log_z - row[label];
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
        if argmax == label {
            correct += 1;
        }
        for (i, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let target = if i == label { T::one() } else { T::zero() };
            grad.push((p - target) * inv_b);
        }
    }
    Ok((loss * inv_b, Tensor::from_parts(vec![b, c], grad), correct))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::<f64>::zeros(&[2, 4]);
        let (loss, grad, _) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((grad.data()[0] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!(grad.sum().abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }
}
