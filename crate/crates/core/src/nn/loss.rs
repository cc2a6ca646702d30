use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::domain(format!("label {bad} outside 0..{classes}")));
    }
    let scale = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; batch * classes];
    for (s, &y) in labels.iter().enumerate() {
        let row = logits.row(s);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - row[y];
        let g = &mut grad[s * classes..(s + 1) * classes];
        for (gc, v) in g.iter_mut().zip(row) {
            *gc = (v - log_sum).exp() * scale;
        }
        g[y] -= scale;
    }
    Ok((loss * scale, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean squared error over all elements and its gradient w.r.t. `prediction`.
pub fn mean_squared_error(prediction: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    prediction.ensure_same_shape(target, "mse operands")?;
    let n = prediction.len() as f64;
    let mut loss = 0.0;
    let grad = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, Tensor::new(prediction.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        for classes in [2usize, 5, 10] {
            let logits = Tensor::filled(&[3, classes], 0.7);
            let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, classes - 1]).unwrap();
            assert!((loss - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_logits_approach_zero_loss() {
        let logits = Tensor::new(vec![1, 3], vec![-50.0, 60.0, -40.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss < 1e-30);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = vec![0.3, -1.2, 2.5, 0.1, 0.9, -0.4, 1.7, -2.2];
        let logits = Tensor::new(vec![2, 4], data.clone()).unwrap();
        let labels = [2, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..data.len() {
            let mut plus = data.clone();
            plus[i] += h;
            let mut minus = data.clone();
            minus[i] -= h;
            let lp = softmax_cross_entropy(&Tensor::new(vec![2, 4], plus).unwrap(), &labels)
                .unwrap()
                .0;
            let lm = softmax_cross_entropy(&Tensor::new(vec![2, 4], minus).unwrap(), &labels)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad.data()[i]).abs() < 1e-6,
                "index {i}: {fd} vs {}",
                grad.data()[i]
            );
        }
    }

    #[test]
    fn mse_basics() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::filled(&[2, 3], 1.0);
        assert_eq!(mean_squared_error(&a, &a).unwrap().0, 0.0);
        assert_eq!(mean_squared_error(&a, &b).unwrap().0, 1.0);
        assert!(mean_squared_error(&a, &Tensor::zeros(&[3, 2])).is_err());
    }
}
