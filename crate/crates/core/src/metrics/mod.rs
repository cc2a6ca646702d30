//! Leakage and utility metrics. All functions are pure.

mod ssim;

pub use ssim::{gaussian_taps, ssim, window_for, DYNAMIC_RANGE, K1, K2, SIGMA, WINDOW};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Mean squared elementwise difference.
pub fn mse(reference: &Tensor, candidate: &Tensor) -> Result<f64> {
    reference.ensure_same_shape(candidate, "mse operands")?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reference.len() as f64)
}

fn centered_distances(samples: &[&[f64]]) -> Vec<f64> {
    let n = samples.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = samples[i]
                .iter()
                .zip(samples[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[i * n + j] = dist;
            d[j * n + i] = dist;
        }
    }
    let row_means: Vec<f64> = (0..n)
        .map(|i| d[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            // the distance matrix is symmetric, so column means equal row means
            d[i * n + j] += grand - row_means[i] - row_means[j];
        }
    }
    d
}

/// Sample distance correlation between paired samples `x[i]`, `y[i]`.
///
/// Each sample may be multivariate. Returns 0 when either side has zero
/// distance variance.
pub fn distance_correlation_samples(x: &[&[f64]], y: &[&[f64]]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "distance correlation needs paired samples, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::domain(
            "distance correlation needs at least 2 samples",
        ));
    }
    let a = centered_distances(x);
    let b = centered_distances(y);
    let mean_prod =
        |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).sum::<f64>() / (n * n) as f64;
    let dcov = mean_prod(&a, &b).max(0.0);
    let dvar_x = mean_prod(&a, &a);
    let dvar_y = mean_prod(&b, &b);
    if dvar_x <= 0.0 || dvar_y <= 0.0 {
        return Ok(0.0);
    }
    Ok((dcov / (dvar_x * dvar_y).sqrt()).sqrt().clamp(0.0, 1.0))
}

/// Distance correlation of two tensors: rank-1 tensors are treated as
/// scalar samples, higher ranks as one flattened sample per leading row.
pub fn distance_correlation(x: &Tensor, y: &Tensor) -> Result<f64> {
    let rows = |t: &Tensor| -> Vec<Vec<f64>> {
        if t.rank() == 1 {
            t.data().iter().map(|&v| vec![v]).collect()
        } else {
            (0..t.batch()).map(|i| t.row(i).to_vec()).collect()
        }
    };
    let (rx, ry) = (rows(x), rows(y));
    let vx: Vec<&[f64]> = rx.iter().map(Vec::as_slice).collect();
    let vy: Vec<&[f64]> = ry.iter().map(Vec::as_slice).collect();
    distance_correlation_samples(&vx, &vy)
}

/// Distance correlation between two equally long series (each time step one sample).
pub fn series_distance_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    let x: Vec<&[f64]> = a.chunks(1).collect();
    let y: Vec<&[f64]> = b.chunks(1).collect();
    distance_correlation_samples(&x, &y)
}

/// Dynamic time warping with `|a - b|` local cost and the symmetric
/// (match, insertion, deletion) step pattern, unconstrained.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("dtw needs nonempty series"));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &ai in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = (ai - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of `logits` (`[batch, classes]`) against `labels`.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.batch() != labels.len() {
        return Err(Error::shape(format!(
            "accuracy needs [batch, classes] logits matching {} labels, got {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(mse(&z, &z).unwrap(), 0.0);
        assert_eq!(mse(&z, &Tensor::filled(&[2, 2], 1.0)).unwrap(), 1.0);
        assert!(mse(&z, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn dc_examples() {
        let x = [0.3, 1.7, -0.2, 4.0, 2.2, 0.9];
        assert!((series_distance_correlation(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(series_distance_correlation(&x, &[2.0; 6]).unwrap(), 0.0);
        assert!(series_distance_correlation(&[1.0], &[1.0]).is_err());
        assert!(series_distance_correlation(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn dtw_examples() {
        let a = [0.0, 1.0, 3.0, 2.0];
        assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        assert_eq!(dtw(&[0.0], &[5.0]).unwrap(), 5.0);
        // warping absorbs the repeated sample
        assert_eq!(dtw(&[0.0, 1.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap(), 0.0);
        assert!(dtw(&[], &a).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let logits = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&logits, &[1, 0, 1]).unwrap(), 0.0);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            data.extend_from_slice(&[0.9, 0.1, 0.0]);
            labels.push(if i < 7 { 0 } else { 2 });
        }
        let t = Tensor::new(vec![10, 3], data).unwrap();
        assert!((accuracy(&t, &labels).unwrap() - 0.7).abs() < 1e-15);
    }
}
