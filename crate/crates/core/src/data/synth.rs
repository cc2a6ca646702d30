//! Seeded synthetic stand-ins for the image and ECG-style datasets.
//!
//! Classification samples are Gaussian blobs: each class has a mean in a
//! low-dimensional latent space, samples add unit-variance noise to it, and a
//! fixed bank of smooth spatial patterns maps the latent point to the sample
//! space, squashed into `(0, 1)`. Because the images live on a smooth
//! low-dimensional manifold they behave like natural images for SSIM while
//! staying cheap to learn.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::nn::Tensor;
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationStyle {
    pub latent_dim: usize,
    /// Standard deviation of the class means (noise has unit variance).
    pub separation: f64,
    /// Contrast applied before squashing into `(0, 1)`.
    pub gain: f64,
    /// Independent per-pixel Gaussian noise added after squashing.
    pub pixel_noise: f64,
}

impl Default for ClassificationStyle {
    fn default() -> Self {
        ClassificationStyle {
            latent_dim: 8,
            separation: 2.0,
            gain: 1.5,
            pixel_noise: 0.0,
        }
    }
}

/// `(channels, height, width)` view of a sample shape.
fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [l] => Ok((1, 1, l)),
        [c, l] => Ok((c, 1, l)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!(
            "sample shape {shape:?} must have rank 1, 2 or 3"
        ))),
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn synth_classification(
    samples: usize,
    classes: usize,
    sample_shape: &[usize],
    seed: u64,
) -> Result<Dataset> {
    synth_classification_with(
        samples,
        classes,
        sample_shape,
        seed,
        &ClassificationStyle::default(),
    )
}

/// Labels are assigned round-robin (`i % classes`).
pub fn synth_classification_with(
    samples: usize,
    classes: usize,
    sample_shape: &[usize],
    seed: u64,
    style: &ClassificationStyle,
) -> Result<Dataset> {
    if classes == 0 || samples < classes {
        return Err(Error::domain(format!(
            "need samples ({samples}) >= classes ({classes}) > 0"
        )));
    }
    if style.latent_dim == 0 {
        return Err(Error::domain("latent dimension must be positive"));
    }
    let (c, h, w) = spatial_dims(sample_shape)?;
    let dim = c * h * w;
    let d = style.latent_dim;

    let mut rng = rng_for(seed, &[0xDA7A, 1]);
    let mut basis = vec![0.0; d * dim];
    for k in 0..d {
        let fy = if h > 1 {
            rng.random_range(0.5..3.0)
        } else {
            0.0
        };
        let fx = rng.random_range(0.5..3.0);
        let (py, px): (f64, f64) = (
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
        );
        let chan: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let row = &mut basis[k * dim..(k + 1) * dim];
        for ch in 0..c {
            for y in 0..h {
                let vy = (2.0 * PI * fy * y as f64 / h as f64 + py).cos();
                for x in 0..w {
                    let vx = (2.0 * PI * fx * x as f64 / w as f64 + px).cos();
                    row[(ch * h + y) * w + x] = chan[ch] * vy * vx;
                }
            }
        }
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / dim as f64).sqrt();
        if rms > 0.0 {
            row.iter_mut().for_each(|v| *v /= rms);
        }
    }
    let means: Vec<f64> = (0..classes * d)
        .map(|_| style.separation * normal(&mut rng))
        .collect();

    let mut data = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    let norm = 1.0 / (d as f64).sqrt();
    let mut z = vec![0.0; d];
    for i in 0..samples {
        let label = i % classes;
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = means[label * d + k] + normal(&mut rng);
        }
        for p in 0..dim {
            let mut acc = 0.0;
            for (k, zk) in z.iter().enumerate() {
                acc += zk * basis[k * dim + p];
            }
            let mut v = sigmoid(style.gain * norm * acc);
            if style.pixel_noise > 0.0 {
                v = (v + style.pixel_noise * normal(&mut rng)).clamp(0.0, 1.0);
            }
            data.push(v);
        }
        labels.push(label);
    }
    let mut shape = vec![samples];
    shape.extend_from_slice(sample_shape);
    Dataset::new(Tensor::new(shape, data)?, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesStyle {
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
}

impl Default for SeriesStyle {
    fn default() -> Self {
        SeriesStyle { noise: 0.05 }
    }
}

pub fn synth_series(samples: usize, classes: usize, length: usize, seed: u64) -> Result<Dataset> {
    synth_series_with(samples, classes, length, seed, &SeriesStyle::default())
}

/// Per-class waveform templates (distinct frequency, phase and pulse
/// position) plus Gaussian noise, clamped to `[0, 1]`; samples are `[1, length]`.
pub fn synth_series_with(
    samples: usize,
    classes: usize,
    length: usize,
    seed: u64,
    style: &SeriesStyle,
) -> Result<Dataset> {
    if length < 8 {
        return Err(Error::domain(format!("series length {length} < 8")));
    }
    if classes == 0 || samples < classes {
        return Err(Error::domain(format!(
            "need samples ({samples}) >= classes ({classes}) > 0"
        )));
    }
    let mut rng = rng_for(seed, &[0xDA7A, 2]);
    let width = (length as f64 / 16.0).max(1.0);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let freq = 1.0 + c as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            let center = (c as f64 + 0.5) / classes as f64 * length as f64;
            (0..length)
                .map(|t| {
                    let t = t as f64;
                    let pulse = (-((t - center) / width).powi(2)).exp();
                    0.5 + 0.25 * (2.0 * PI * freq * t / length as f64 + phase).sin() + 0.2 * pulse
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(samples * length);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % classes;
        for &v in &templates[label] {
            let noisy = if style.noise > 0.0 {
                v + style.noise * normal(&mut rng)
            } else {
                v
            };
            data.push(noisy.clamp(0.0, 1.0));
        }
        labels.push(label);
    }
    Dataset::new(
        Tensor::new(vec![samples, 1, length], data)?,
        labels,
        classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_is_deterministic_and_round_robin() {
        let a = synth_classification(200, 2, &[1, 6, 6], 3).unwrap();
        let b = synth_classification(200, 2, &[1, 6, 6], 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_classification(200, 2, &[1, 6, 6], 4).unwrap());
        assert_eq!(
            a.class_histogram(&(0..200).collect::<Vec<_>>()),
            vec![100, 100]
        );
        assert!(a.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(synth_classification(3, 4, &[4], 0).is_err());
    }

    #[test]
    fn series_determinism_and_noise_free_templates() {
        let a = synth_series(20, 5, 32, 1).unwrap();
        assert_eq!(a, synth_series(20, 5, 32, 1).unwrap());
        assert_eq!(a.sample_shape(), &[1, 32]);
        let clean = synth_series_with(20, 5, 32, 1, &SeriesStyle { noise: 0.0 }).unwrap();
        assert_eq!(clean.inputs.row(0), clean.inputs.row(5));
        assert_ne!(clean.inputs.row(0), clean.inputs.row(1));
        assert!(synth_series(10, 2, 7, 0).is_err());
    }
}
