use crate::error::{NptnError, Result};
use crate::tensor::{NDTensor, Scalar};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot) / B`. The max logit is subtracted before
/// exponentiating, so very large logits do not overflow.
pub fn softmax_xent<T: Scalar>(
    logits: &NDTensor<T>,
    labels: &[usize],
) -> Result<(f64, NDTensor<T>)> {
    let (batch, k) = match logits.shape() {
        &[b, k] => (b, k),
        s => return Err(NptnError::shape(format!("logits {s:?} are not [B,K]"))),
    };
    if labels.len() != batch {
        return Err(NptnError::shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NptnError::contract(format!("label {bad} outside [0, {k})")));
    }
    let mut grad = NDTensor::zeros(&[batch, k]);
    let mut total = 0.0;
    let inv_b = 1.0 / batch as f64;
    let mut probs = vec![0.0f64; k];
    for (bi, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, v) in probs.iter_mut().zip(row) {
            *p = (v.as_f64() - max).exp();
            z += *p;
        }
        total += z.ln() - (row[label].as_f64() - max);
        let g = &mut grad.data_mut()[bi * k..(bi + 1) * k];
        for (j, (gv, p)) in g.iter_mut().zip(&probs).enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            *gv = T::from_f64((p / z - onehot) * inv_b);
        }
    }
    Ok((total * inv_b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::zeros(&[3, 10]);
        let (loss, _) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn huge_true_logit_is_stable() {
        let mut logits = Tensor::zeros(&[1, 10]);
        logits.set(&[0, 3], 1000.0);
        let (loss, grad) = softmax_xent(&logits, &[3]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.is_finite());
    }

    #[test]
    fn two_class_gradient() {
        let logits = Tensor::zeros(&[1, 2]);
        let (_, grad) = softmax_xent(&logits, &[0]).unwrap();
        assert_eq!(grad.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            softmax_xent(&logits, &[2]),
            Err(NptnError::Contract(_))
        ));
    }
}
