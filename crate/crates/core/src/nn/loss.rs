use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise softmax of `(N, K)` logits, stabilized by subtracting the row max.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, k) = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let start = out.len();
        out.extend(row.iter().map(|&z| (z - max).exp()));
        let total: S = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|p| *p /= total);
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Mean cross-entropy of softmax(logits) against class labels and its gradient
/// `(softmax - onehot) / N` with respect to the logits.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)> {
    let (n, k) = logits.dims2()?;
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {k}")));
    }
    if labels.len() != n {
        return shape_err(format!("{} labels for {n} rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Config(format!("label {bad} out of range for {k} classes")));
    }
    let inv_n = S::one() / S::of(n as f64);
    let mut loss = S::zero();
    let mut grad = Vec::with_capacity(n * k);
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum_exp: S = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - row[y];
        for (c, &z) in row.iter().enumerate() {
            let p = (z - log_z).exp();
            let onehot = if c == y { S::one() } else { S::zero() };
            grad.push((p - onehot) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(&[n, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(&[4, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 5, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_true_class_gives_near_zero() {
        let logits = Tensor::from_vec(&[1, 3], vec![0.0, 30.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn hand_computed_three_class_case() {
        // -log(e^3 / (e + e^2 + e^3))
        let want = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        let logits = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 0.407606).abs() < 1e-6);
        assert!(grad.data().iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_on_simplex() {
        let logits = Tensor::from_vec(&[2, 3], vec![1000.0, -5.0, 2.0, -1.0, 0.0, 1.0]).unwrap();
        let p = softmax(&logits).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(softmax_cross_entropy(&Tensor::<f64>::zeros(&[1, 3]), &[3]).is_err());
        assert!(softmax_cross_entropy(&Tensor::<f64>::zeros(&[1, 1]), &[0]).is_err());
    }
}
