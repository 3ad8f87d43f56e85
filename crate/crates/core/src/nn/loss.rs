//! Loss heads: mean-over-batch loss value plus the gradient with respect to
//! the head input.

use crate::nn::layer::LossKind;
use crate::nn::topology::NetError;
use crate::tensor::Tensor;

/// Exact one-hot check: every entry is 0.0 or 1.0 and each row sums to 1.
pub fn validate_one_hot(target: &Tensor) -> Result<(), NetError> {
    let (rows, cols) = (target.rows(), target.cols());
    for i in 0..rows {
        let mut sum = 0.0;
        for j in 0..cols {
            let v = target.at(i, j);
            if v != 0.0 && v != 1.0 {
                return Err(NetError::NotOneHot(i));
            }
            sum += v;
        }
        if sum != 1.0 {
            return Err(NetError::NotOneHot(i));
        }
    }
    Ok(())
}

/// Returns `(loss, d loss / d output)`. Loss reduction is mean over the batch
/// (rows); the cross-entropy gradient is `(softmax(output) - target) / batch`.
pub fn loss_and_gradient(
    kind: LossKind,
    output: &Tensor,
    target: &Tensor,
) -> Result<(f64, Tensor), NetError> {
    if output.shape() != target.shape() {
        return Err(NetError::GradientShapeMismatch {
            expected: output.shape().to_vec(),
            got: target.shape().to_vec(),
        });
    }
    let (rows, cols) = (output.rows(), output.cols());
    let inv_b = 1.0 / rows as f64;
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            validate_one_hot(target)?;
            let mut grad = vec![0.0f64; rows * cols];
            let mut loss = 0.0;
            for i in 0..rows {
                let row = &output.data()[i * cols..(i + 1) * cols];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum_exp = 0.0;
                for &z in row {
                    sum_exp += (z - max).exp();
                }
                let log_sum = max + sum_exp.ln();
                for j in 0..cols {
                    let p = (row[j] - log_sum).exp();
                    let t = target.at(i, j);
                    grad[i * cols + j] = (p - t) * inv_b;
                    if t == 1.0 {
                        loss += log_sum - row[j];
                    }
                }
            }
            Ok((loss * inv_b, Tensor::new(vec![rows, cols], grad)?))
        }
        LossKind::MeanSquared => {
            let mut grad = vec![0.0f64; rows * cols];
            let mut loss = 0.0;
            for i in 0..rows * cols {
                let d = output.data()[i] - target.data()[i];
                loss += d * d;
                grad[i] = 2.0 * d * inv_b;
            }
            Ok((loss * inv_b, Tensor::new(vec![rows, cols], grad)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cross_entropy_gradient() {
        // p = 1/4 everywhere; gradient row = [-0.75, .25, .25, .25] / batch.
        let out = Tensor::new(vec![2, 4], vec![1.0; 8]).unwrap();
        let target = Tensor::new(
            vec![2, 4],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let (loss, grad) = loss_and_gradient(LossKind::SoftmaxCrossEntropy, &out, &target).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        for i in 0..2 {
            assert!((grad.at(i, 0) - (-0.75 / 2.0)).abs() < 1e-12);
            for j in 1..4 {
                assert!((grad.at(i, j) - (0.25 / 2.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_squared_at_minimum() {
        let out = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (loss, grad) = loss_and_gradient(LossKind::MeanSquared, &out, &out.clone()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_non_one_hot() {
        let out = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let bad = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.0]).unwrap();
        assert!(matches!(
            loss_and_gradient(LossKind::SoftmaxCrossEntropy, &out, &bad),
            Err(NetError::NotOneHot(0))
        ));
        let bad2 = Tensor::new(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        assert!(loss_and_gradient(LossKind::SoftmaxCrossEntropy, &out, &bad2).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        // Central differences h=1e-5 on a small random-ish logit matrix.
        let out = Tensor::new(
            vec![2, 3],
            vec![0.3, -1.2, 2.0, 0.9, 0.1, -0.4],
        )
        .unwrap();
        let target = Tensor::new(vec![2, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let (_, grad) = loss_and_gradient(LossKind::SoftmaxCrossEntropy, &out, &target).unwrap();
        let h = 1e-5;
        for k in 0..out.len() {
            let mut plus = out.data().to_vec();
            plus[k] += h;
            let mut minus = out.data().to_vec();
            minus[k] -= h;
            let lp = loss_and_gradient(
                LossKind::SoftmaxCrossEntropy,
                &Tensor::new(vec![2, 3], plus).unwrap(),
                &target,
            )
            .unwrap()
            .0;
            let lm = loss_and_gradient(
                LossKind::SoftmaxCrossEntropy,
                &Tensor::new(vec![2, 3], minus).unwrap(),
                &target,
            )
            .unwrap()
            .0;
            let fd = (lp - lm) / (2.0 * h);
            let analytic = grad.data()[k];
            let denom = analytic.abs().max(1e-8);
            assert!(
                ((fd - analytic) / denom).abs() < 1e-6,
                "fd {fd} vs analytic {analytic}"
            );
        }
    }
}
