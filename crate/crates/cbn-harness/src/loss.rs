//! Softmax cross-entropy loss over class logits.

use cbn_core::tensor::Tensor;

use crate::error::{HarnessError, HarnessResult};

/// Mean cross-entropy of `logits` (shape [batch, classes]) against integer
/// labels. Returns the loss, its gradient with respect to the logits, and the
/// number of examples whose highest logit matches the label (ties resolve to
/// the lowest class index).
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> HarnessResult<(f64, Tensor, usize)> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(HarnessError::Argument(format!(
            "logits must be [batch, classes], got {shape:?}"
        )));
    }
    let (n, classes) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(HarnessError::Argument(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(HarnessError::Argument(format!(
            "label {bad} outside the {classes} classes"
        )));
    }
    let data = logits.data();
    let mut grad = Tensor::zeros(shape);
    let gd = grad.data_mut();
    let mut loss = 0.0;
    let mut correct = 0;
    for i in 0..n {
        let row = &data[i * classes..(i + 1) * classes];
        let mut best = 0;
        let mut max = row[0];
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > max {
                max = v;
                best = j;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
        // log-sum-exp shifted by the row maximum for stability.
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[i]];
        for j in 0..classes {
            let p = (row[j] - lse).exp();
            gd[i * classes + j] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad, correct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbn_core::oracles::finite_diff;
    use cbn_core::tensor::Rng;

    #[test]
    fn uniform_logits_give_log_classes_loss() {
        let logits = Tensor::zeros(&[1, 2]);
        let (loss, grad, correct) = softmax_xent(&logits, &[0]).unwrap();
        assert!(
            (loss - std::f64::consts::LN_2).abs() < 1e-15,
            "two equal logits give ln 2, got {loss}"
        );
        assert_eq!(grad.data(), &[-0.5, 0.5], "p - onehot with p = 1/2");
        assert_eq!(correct, 1, "ties resolve to the lowest index");
    }

    #[test]
    fn confident_correct_predictions_have_small_loss() {
        let logits = Tensor::from_vec(&[1, 3], vec![10.0, 0.0, 0.0]).unwrap();
        let (loss, _, correct) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss < 1e-3, "confident correct answer, loss {loss}");
        assert_eq!(correct, 1);
        let (loss_wrong, _, correct_wrong) = softmax_xent(&logits, &[2]).unwrap();
        assert!(loss_wrong > 5.0, "confident wrong answer, loss {loss_wrong}");
        assert_eq!(correct_wrong, 0);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = Tensor::from_vec(&[1, 2], vec![1000.0, -1000.0]).unwrap();
        let (loss, grad, _) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        assert!(grad.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let logits = rng.normal_tensor(&[3, 5], 0.0, 2.0);
        let labels = [2usize, 0, 4];
        let (_, grad, _) = softmax_xent(&logits, &labels).unwrap();
        let fd = finite_diff(
            |l| {
                let (loss, _, _) = softmax_xent(l, &labels)
                    .map_err(|_| cbn_core::CoreError::Argument("loss failed".into()))?;
                Ok(Tensor::scalar(loss))
            },
            &logits,
            1e-6,
        )
        .unwrap();
        for (i, (&g, &f)) in grad.data().iter().zip(fd.data()).enumerate() {
            assert!(
                (g - f).abs() < 1e-8,
                "gradient {i}: analytic {g} vs finite difference {f}"
            );
        }
    }

    #[test]
    fn mean_reduction_divides_by_batch_size() {
        let one = Tensor::from_vec(&[1, 2], vec![0.3, -0.4]).unwrap();
        let two = Tensor::from_vec(&[2, 2], vec![0.3, -0.4, 0.3, -0.4]).unwrap();
        let (l1, g1, _) = softmax_xent(&one, &[1]).unwrap();
        let (l2, g2, _) = softmax_xent(&two, &[1, 1]).unwrap();
        assert!((l1 - l2).abs() < 1e-15, "duplicating the batch keeps the mean");
        assert!(
            (g1.data()[0] - 2.0 * g2.data()[0]).abs() < 1e-15,
            "per-example gradient halves when the batch doubles"
        );
    }

    #[test]
    fn shape_and_label_mismatches_fail() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(softmax_xent(&logits, &[0]).is_err(), "wrong label count");
        assert!(softmax_xent(&logits, &[0, 9]).is_err(), "label out of range");
        assert!(softmax_xent(&Tensor::zeros(&[2, 3, 1]), &[0, 1]).is_err(), "bad rank");
    }
}
