//! Reference implementations and fixtures shared by the integration tests.
//! The oracles are written from the textbook definitions and deliberately
//! avoid reusing engine code paths.
#![allow(dead_code)]

use psl_core::data::{synth_classification, Dataset};
use psl_core::nn::{
    init_parameters, sgd_step, softmax_cross_entropy, LayerParams, LayerSpec, NetworkSpec,
    ParameterSet, SplitModelSpec, Tensor,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Toy images: `train` training samples and `total - train` test samples.
pub fn toy(seed: u64, total: usize, train: usize, shape: &[usize]) -> (Dataset, Dataset) {
    synth_classification(total, 10, shape, seed)
        .unwrap()
        .split_at(train)
        .unwrap()
}

// ---------------------------------------------------------------- metrics

/// Brute-force SSIM: for every valid window placement, weighted moments are
/// computed directly with the 2D Gaussian (two-pass variance).
pub fn naive_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let win = 11.min(h).min(w);
    let sigma: f64 = 1.5;
    let c = (win as f64 - 1.0) / 2.0;
    let mut weights = vec![vec![0.0; win]; win];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in &mut weights {
        for v in row {
            *v /= total;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y in 0..=(h - win) {
        for x in 0..=(w - win) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let k = (y + i) * w + x + j;
                    ma += weights[i][j] * a[k];
                    mb += weights[i][j] * b[k];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let k = (y + i) * w + x + j;
                    va += weights[i][j] * (a[k] - ma) * (a[k] - ma);
                    vb += weights[i][j] * (b[k] - mb) * (b[k] - mb);
                    cov += weights[i][j] * (a[k] - ma) * (b[k] - mb);
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// Distance correlation by explicit double centering (row, column and grand means).
pub fn textbook_dc(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let dist = |p: &[f64], q: &[f64]| {
        p.iter()
            .zip(q)
            .map(|(u, v)| (u - v).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let center = |s: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let d: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| dist(&s[i], &s[j])).collect())
            .collect();
        let row: Vec<f64> = (0..n)
            .map(|i| d[i].iter().sum::<f64>() / n as f64)
            .collect();
        let col: Vec<f64> = (0..n)
            .map(|j| (0..n).map(|i| d[i][j]).sum::<f64>() / n as f64)
            .collect();
        let grand: f64 = d.iter().flatten().sum::<f64>() / (n * n) as f64;
        (0..n)
            .map(|i| (0..n).map(|j| d[i][j] - row[i] - col[j] + grand).collect())
            .collect()
    };
    let (a, b) = (center(x), center(y));
    let dot = |p: &[Vec<f64>], q: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += p[i][j] * q[i][j];
            }
        }
        s / (n * n) as f64
    };
    let (dcov2, vx, vy) = (dot(&a, &b), dot(&a, &a), dot(&b, &b));
    (dcov2 / (vx * vy).sqrt()).sqrt()
}

/// Full-table DTW with `|a - b|` local cost.
pub fn dp_dtw(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![f64::INFINITY; m + 1]; n + 1];
    d[0][0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let best = d[i - 1][j - 1].min(d[i - 1][j]).min(d[i][j - 1]);
            d[i][j] = (a[i - 1] - b[j - 1]).abs() + best;
        }
    }
    d[n][m]
}

// -------------------------------------------------------------- gradients

pub struct GradCase {
    pub name: String,
    pub spec: NetworkSpec,
    pub params: ParameterSet,
    pub input: Tensor,
    pub labels: Vec<usize>,
}

fn conv(channels: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        channels,
        kernel,
        stride,
        padding,
    }
}

fn conv1d(channels: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv1d {
        channels,
        kernel,
        stride,
        padding,
    }
}

/// Random small network number `i`; six templates cycle through every layer kind.
pub fn random_case(i: usize, seed: u64) -> GradCase {
    let mut r = rng(seed ^ (i as u64 * 7919));
    let classes = r.random_range(2..5);
    let dense = |u| LayerSpec::Dense { units: u };
    let (name, input_shape, layers) = match i % 6 {
        0 => {
            let d = r.random_range(3..8);
            (
                "dense-sigmoid",
                vec![d],
                vec![
                    dense(r.random_range(3..7)),
                    LayerSpec::Sigmoid,
                    dense(classes),
                ],
            )
        }
        1 => {
            let (c, h, w) = (
                r.random_range(1..3),
                r.random_range(5..8),
                r.random_range(5..8),
            );
            let stride = r.random_range(1..3);
            let pad = r.random_range(0..2);
            (
                "conv2d-relu",
                vec![c, h, w],
                vec![
                    conv(r.random_range(2..4), 3, stride, pad),
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    dense(classes),
                ],
            )
        }
        2 => {
            let (c, l) = (r.random_range(1..3), r.random_range(8..14));
            (
                "conv1d-sigmoid",
                vec![c, l],
                vec![
                    conv1d(
                        r.random_range(2..4),
                        r.random_range(2..5),
                        1,
                        r.random_range(0..3),
                    ),
                    LayerSpec::Sigmoid,
                    conv1d(2, 3, 2, 1),
                    LayerSpec::Flatten,
                    dense(classes),
                ],
            )
        }
        3 => {
            let (c, h, w) = (
                r.random_range(1..3),
                2 * r.random_range(2..4),
                2 * r.random_range(2..4),
            );
            (
                "conv2d-maxpool",
                vec![c, h, w],
                vec![
                    conv(r.random_range(2..4), 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2d { size: 2 },
                    LayerSpec::Flatten,
                    dense(classes),
                ],
            )
        }
        4 => {
            let (c, h, w) = (
                r.random_range(1..3),
                r.random_range(2..5),
                r.random_range(2..5),
            );
            (
                "flatten-dense-relu",
                vec![c, h, w],
                vec![
                    LayerSpec::Flatten,
                    dense(r.random_range(4..9)),
                    LayerSpec::Relu,
                    dense(classes),
                ],
            )
        }
        _ => (
            "stacked-conv",
            vec![1, 8, 8],
            vec![
                conv(3, 3, 1, 1),
                LayerSpec::Relu,
                conv(3, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { size: 2 },
                conv(4, 3, 1, 1),
                LayerSpec::Sigmoid,
                LayerSpec::Flatten,
                dense(classes),
            ],
        ),
    };
    let spec = NetworkSpec::new(input_shape.clone(), layers);
    let params = init_parameters(&spec, r.random()).unwrap();
    let batch = r.random_range(1..4);
    let per: usize = input_shape.iter().product();
    let mut shape = vec![batch];
    shape.extend_from_slice(&input_shape);
    let input = Tensor::new(shape, normal_vec(&mut r, batch * per)).unwrap();
    let labels = (0..batch).map(|_| r.random_range(0..classes)).collect();
    GradCase {
        name: format!("{name}#{i}"),
        spec,
        params,
        input,
        labels,
    }
}

fn loss_of(spec: &NetworkSpec, params: &ParameterSet, input: &Tensor, labels: &[usize]) -> f64 {
    softmax_cross_entropy(&spec.predict(params, input).unwrap(), labels)
        .unwrap()
        .0
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 =
        a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter tensor and the input.
pub fn gradient_check(case: &GradCase) -> f64 {
    let eps = 1e-6;
    let GradCase {
        spec,
        params,
        input,
        labels,
        ..
    } = case;
    let (out, mut tape) = spec.forward(params, input).unwrap();
    let (_, g) = softmax_cross_entropy(&out, labels).unwrap();
    let (grads, gx) = spec.backward(params, &mut tape, &g).unwrap();
    let mut worst: f64 = 0.0;
    for (idx, lp) in params.iter() {
        let analytic = grads.get(idx).unwrap();
        for which in 0..2 {
            let base = if which == 0 { &lp.weight } else { &lp.bias };
            let mut numeric = Vec::with_capacity(base.len());
            for k in 0..base.len() {
                let probe = |delta: f64| {
                    let mut t = base.clone();
                    t.data_mut()[k] += delta;
                    let mut p = params.clone();
                    let layer = if which == 0 {
                        LayerParams {
                            weight: t,
                            bias: lp.bias.clone(),
                        }
                    } else {
                        LayerParams {
                            weight: lp.weight.clone(),
                            bias: t,
                        }
                    };
                    p.insert(idx, layer);
                    loss_of(spec, &p, input, labels)
                };
                numeric.push((probe(eps) - probe(-eps)) / (2.0 * eps));
            }
            let a = if which == 0 {
                &analytic.weight
            } else {
                &analytic.bias
            };
            worst = worst.max(rel_err(a.data(), &numeric));
        }
    }
    let mut numeric = Vec::with_capacity(input.len());
    for k in 0..input.len() {
        let probe = |delta: f64| {
            let mut x = input.clone();
            x.data_mut()[k] += delta;
            loss_of(spec, params, &x, labels)
        };
        numeric.push((probe(eps) - probe(-eps)) / (2.0 * eps));
    }
    worst.max(rel_err(gx.data(), &numeric))
}

// ------------------------------------------------------------- protocol

/// One SGD step of the unsplit model on `(x, y)`; returns the new (client, server) halves.
pub fn monolithic_step(
    split: &SplitModelSpec,
    client: &ParameterSet,
    server: &ParameterSet,
    x: &Tensor,
    y: &[usize],
    lr: f64,
) -> (ParameterSet, ParameterSet) {
    let whole = split.join_params(client, server);
    let (out, mut tape) = split.network.forward(&whole, x).unwrap();
    let (_, g) = softmax_cross_entropy(&out, y).unwrap();
    let (grads, _) = split.network.backward(&whole, &mut tape, &g).unwrap();
    split.split_params(&sgd_step(&whole, &grads, lr).unwrap())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
