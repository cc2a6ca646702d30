//! Model-inversion attack: pair smashed data with raw inputs, train a decoder
//! on the pairs, and reconstruct victims' inputs from their smashed data.

use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{dtw, mse, series_distance_correlation, ssim};
use crate::nn::{
    init_parameters, mean_squared_error, sgd_step, LayerSpec, NetworkSpec, ParameterSet, Tensor,
};
use crate::protocol::{Envelope, MessageKind, Payload, Role};
use crate::seed::{derive_seed, rng_for, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerRole {
    Client,
    Server,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub attacker_role: AttackerRole,
    /// The client whose model the decoder is trained against.
    pub attacker_client: usize,
    pub victims: Vec<usize>,
    /// Black-box queries available to a server attacker.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_budget: Option<usize>,
}

/// Smashed data paired with the raw inputs that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackPairs {
    pub smashed: Tensor,
    pub raw: Tensor,
}

impl AttackPairs {
    pub fn len(&self) -> usize {
        self.smashed.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pairs `(f_u(x), x)` for every row of `inputs`.
pub fn build_attack_dataset(
    client_spec: &NetworkSpec,
    params: &ParameterSet,
    inputs: &Tensor,
) -> Result<AttackPairs> {
    if inputs.rank() < 2 || inputs.batch() == 0 {
        return Err(Error::domain("attacker data is empty"));
    }
    let smashed = client_spec.predict(params, inputs)?;
    Ok(AttackPairs {
        smashed,
        raw: inputs.clone(),
    })
}

/// Server-attacker pairs: `budget` black-box queries of the client model over
/// samples drawn without replacement from `pool`.
pub fn build_query_dataset(
    client_spec: &NetworkSpec,
    params: &ParameterSet,
    pool: &Dataset,
    budget: usize,
    seed: u64,
) -> Result<AttackPairs> {
    if budget == 0 || pool.is_empty() {
        return Err(Error::domain("query bag is empty"));
    }
    if budget > pool.len() {
        return Err(Error::domain(format!(
            "query budget {budget} exceeds the {} available samples",
            pool.len()
        )));
    }
    let mut picked =
        index::sample(&mut rng_for(seed, &[tag::QUERY]), pool.len(), budget).into_vec();
    picked.sort_unstable();
    let (x, _) = pool.batch(&picked)?;
    build_attack_dataset(client_spec, params, &x)
}

/// Inverse network from the smashed-data shape back to the raw-sample shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub network: NetworkSpec,
    /// Raw-sample shape; the network output is reshaped to it.
    pub output_shape: Vec<usize>,
}

impl DecoderSpec {
    /// Mirrors a client part: each parameterized layer, walked backwards, gets a
    /// counterpart mapping its output back to its input (a same-padded
    /// stride-1 convolution for conv layers, a dense layer for dense layers),
    /// with relu in between and a sigmoid at the end.
    pub fn mirror(client_spec: &NetworkSpec) -> Result<Self> {
        let shapes = client_spec.shapes()?;
        let split_shape = shapes.last().expect("shapes include the input").clone();
        let mut layers = Vec::new();
        let mut current = split_shape.clone();
        for (i, layer) in client_spec.layers.iter().enumerate().rev() {
            let target = &shapes[i];
            let dense = LayerSpec::Dense {
                units: target.iter().product(),
            };
            let counterpart = match *layer {
                LayerSpec::Conv2d { kernel, .. }
                    if current.len() == 3 && target.len() == 3 && current[1..] == target[1..] =>
                {
                    LayerSpec::Conv2d {
                        channels: target[0],
                        kernel: kernel | 1,
                        stride: 1,
                        padding: (kernel | 1) / 2,
                    }
                }
                LayerSpec::Conv1d { kernel, .. }
                    if current.len() == 2 && target.len() == 2 && current[1] == target[1] =>
                {
                    LayerSpec::Conv1d {
                        channels: target[0],
                        kernel: kernel | 1,
                        stride: 1,
                        padding: (kernel | 1) / 2,
                    }
                }
                // resolution-changing layers get a dense counterpart
                LayerSpec::Dense { .. }
                | LayerSpec::Conv2d { .. }
                | LayerSpec::Conv1d { .. }
                | LayerSpec::MaxPool2d { .. } => dense,
                _ => continue,
            };
            if !layers.is_empty() {
                layers.push(LayerSpec::Relu);
            }
            if matches!(counterpart, LayerSpec::Dense { .. }) && current.len() != 1 {
                layers.push(LayerSpec::Flatten);
            }
            layers.push(counterpart);
            let probe = NetworkSpec::new(split_shape.clone(), layers.clone());
            current = probe.output_shape()?;
        }
        if layers.is_empty() {
            let raw: usize = shapes[0].iter().product();
            layers.push(LayerSpec::Flatten);
            layers.push(LayerSpec::Dense { units: raw });
        }
        layers.push(LayerSpec::Sigmoid);
        let spec = DecoderSpec {
            network: NetworkSpec::new(split_shape, layers),
            output_shape: shapes[0].clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let out: usize = self.network.output_shape()?.iter().product();
        let raw: usize = self.output_shape.iter().product();
        if out != raw {
            return Err(Error::shape(format!(
                "decoder emits {out} values per sample, raw samples have {raw}"
            )));
        }
        Ok(())
    }

    fn to_raw(&self, out: Tensor) -> Result<Tensor> {
        let mut shape = vec![out.batch()];
        shape.extend_from_slice(&self.output_shape);
        out.reshape(shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderTraining {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DecoderTraining {
    fn default() -> Self {
        DecoderTraining {
            epochs: 200,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDecoder {
    pub spec: DecoderSpec,
    pub params: ParameterSet,
    /// Mean batch loss of the last epoch (initial full-set loss for zero epochs).
    pub final_loss: f64,
}

/// Trains the decoder by minibatch SGD on mean squared reconstruction error.
pub fn train_decoder(
    decoder: &DecoderSpec,
    pairs: &AttackPairs,
    cfg: &DecoderTraining,
) -> Result<TrainedDecoder> {
    if pairs.is_empty() {
        return Err(Error::domain("no attack pairs"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::domain("decoder batch size must be positive"));
    }
    decoder.validate()?;
    if pairs.smashed.shape()[1..] != decoder.network.input_shape[..] {
        return Err(Error::shape(format!(
            "decoder expects smashed samples {:?}, pairs carry {:?}",
            decoder.network.input_shape,
            &pairs.smashed.shape()[1..]
        )));
    }
    if pairs.raw.shape()[1..] != decoder.output_shape[..] || pairs.raw.batch() != pairs.len() {
        return Err(Error::shape(format!(
            "decoder reconstructs {:?}, pairs carry raw {:?}",
            decoder.output_shape,
            pairs.raw.shape()
        )));
    }
    let net = &decoder.network;
    let mut params = init_parameters(net, derive_seed(cfg.seed, &[tag::DECODER, 0]))?;
    let flat_out = net.output_shape()?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut final_loss = {
        let out = net.predict(&params, &pairs.smashed)?;
        let target = flat_target(&pairs.raw, &flat_out)?;
        mean_squared_error(&out, &target)?.0
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, &[tag::DECODER, 1, epoch as u64]));
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let z = pairs.smashed.select_rows(chunk)?;
            let x = flat_target(&pairs.raw.select_rows(chunk)?, &flat_out)?;
            let (out, mut tape) = net.forward(&params, &z)?;
            let (loss, g) = mean_squared_error(&out, &x)?;
            let (grads, _) = net.backward(&params, &mut tape, &g)?;
            params = sgd_step(&params, &grads, cfg.learning_rate)?;
            total += loss;
            count += 1;
        }
        final_loss = total / count as f64;
    }
    Ok(TrainedDecoder {
        spec: decoder.clone(),
        params,
        final_loss,
    })
}

fn flat_target(raw: &Tensor, flat_out: &[usize]) -> Result<Tensor> {
    let mut shape = vec![raw.batch()];
    shape.extend_from_slice(flat_out);
    raw.clone().reshape(shape)
}

/// Decoder forward pass, clamped to `[0, 1]` and shaped like raw samples.
pub fn reconstruct(decoder: &TrainedDecoder, smashed: &Tensor) -> Result<Tensor> {
    let out = decoder.spec.network.predict(&decoder.params, smashed)?;
    decoder.spec.to_raw(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Per-sample means of the leakage metrics between raw and reconstructed batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakageScores {
    pub samples: usize,
    pub ssim: f64,
    pub mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dc: Option<f64>,
}

/// Scores a reconstruction; series metrics are added for `[1, L]` samples.
pub fn score(raw: &Tensor, recon: &Tensor) -> Result<LeakageScores> {
    if raw.shape() != recon.shape() {
        return Err(Error::shape(format!(
            "raw {:?} vs reconstruction {:?}",
            raw.shape(),
            recon.shape()
        )));
    }
    let n = raw.batch();
    if n == 0 {
        return Err(Error::domain("nothing to score"));
    }
    let sample_shape = raw.shape()[1..].to_vec();
    let series = sample_shape.len() <= 2
        && sample_shape
            .first()
            .is_some_and(|&c| c == 1 || sample_shape.len() == 1);
    let (mut s, mut m, mut d, mut c) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let a = Tensor::new(sample_shape.clone(), raw.row(i).to_vec())?;
        let b = Tensor::new(sample_shape.clone(), recon.row(i).to_vec())?;
        s += ssim(&a, &b)?;
        m += mse(&a, &b)?;
        if series {
            d += dtw(a.data(), b.data())?;
            c += series_distance_correlation(a.data(), b.data())?;
        }
    }
    let k = n as f64;
    Ok(LeakageScores {
        samples: n,
        ssim: s / k,
        mse: m / k,
        dtw: series.then_some(d / k),
        dc: series.then_some(c / k),
    })
}

/// Smashed batches a client sent, as captured by a verbose ledger: the most
/// recent epoch with payloads (or `epoch`), rows stacked in send order.
pub fn captured_smashed(
    entries: &[Envelope],
    client: usize,
    epoch: Option<usize>,
) -> Result<(Tensor, Vec<usize>)> {
    let sent =
        |e: &&Envelope| e.variant == MessageKind::SmashedBatch && e.sender == Role::Client(client);
    let target = match epoch {
        Some(e) => e,
        None => entries
            .iter()
            .filter(sent)
            .filter(|e| e.payload.is_some())
            .map(|e| e.epoch)
            .max()
            .ok_or_else(|| {
                Error::State(format!(
                    "no captured smashed data for client {client}; rerun training with a verbose ledger"
                ))
            })?,
    };
    let mut parts = Vec::new();
    let mut ids = Vec::new();
    for e in entries.iter().filter(sent).filter(|e| e.epoch == target) {
        match &e.payload {
            Some(Payload::Smashed {
                activations,
                sample_ids,
                ..
            }) => {
                parts.push(activations);
                ids.extend_from_slice(sample_ids);
            }
            _ => {
                return Err(Error::State(format!(
                    "smashed batch {} of client {client} has no payload; rerun training with a verbose ledger",
                    e.seq
                )))
            }
        }
    }
    if parts.is_empty() {
        return Err(Error::State(format!(
            "client {client} sent no smashed data in epoch {target}"
        )));
    }
    Ok((Tensor::concat_rows(&parts)?, ids))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimLeakage {
    pub client: usize,
    /// The attacker's own data; excluded from the cross-client aggregate.
    pub is_self: bool,
    pub scores: LeakageScores,
    #[serde(skip)]
    pub reconstruction: Option<Tensor>,
    #[serde(skip)]
    pub raw: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub scenario: AttackScenario,
    pub decoder_loss: f64,
    /// Reconstruction of the attacker's held-out data through its own model.
    pub self_scores: LeakageScores,
    pub victims: Vec<VictimLeakage>,
    /// Sample-weighted mean over non-self victims.
    pub cross_ssim: Option<f64>,
    pub cross_mse: Option<f64>,
}

impl ReconstructionReport {
    /// Cross-client SSIM relative to self-reconstruction SSIM.
    pub fn ssim_ratio(&self) -> Option<f64> {
        self.cross_ssim.map(|c| c / self.self_scores.ssim)
    }
}

/// Scores the decoder on held-out attacker data and on every victim's
/// captured smashed data.
pub fn evaluate_leakage(
    scenario: &AttackScenario,
    decoder: &TrainedDecoder,
    self_pairs: &AttackPairs,
    entries: &[Envelope],
    dataset: &Dataset,
) -> Result<ReconstructionReport> {
    let self_scores = score(&self_pairs.raw, &reconstruct(decoder, &self_pairs.smashed)?)?;
    let mut victims = Vec::new();
    let (mut weighted_ssim, mut weighted_mse, mut total) = (0.0, 0.0, 0usize);
    for &v in &scenario.victims {
        let (smashed, ids) = captured_smashed(entries, v, None)?;
        if ids.len() != smashed.batch() {
            return Err(Error::State(format!(
                "captured batches of client {v} lack sample ids"
            )));
        }
        let (raw, _) = dataset.batch(&ids)?;
        let recon = reconstruct(decoder, &smashed)?;
        let scores = score(&raw, &recon)?;
        let is_self = v == scenario.attacker_client;
        if !is_self {
            weighted_ssim += scores.ssim * scores.samples as f64;
            weighted_mse += scores.mse * scores.samples as f64;
            total += scores.samples;
        }
        victims.push(VictimLeakage {
            client: v,
            is_self,
            scores,
            reconstruction: Some(recon),
            raw: Some(raw),
        });
    }
    Ok(ReconstructionReport {
        scenario: scenario.clone(),
        decoder_loss: decoder.final_loss,
        self_scores,
        victims,
        cross_ssim: (total > 0).then(|| weighted_ssim / total as f64),
        cross_mse: (total > 0).then(|| weighted_mse / total as f64),
    })
}

/// Writes one single-channel sample as a binary PGM (P5) image.
pub fn write_pgm<W: Write>(mut w: W, height: usize, width: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::shape(format!(
            "{} pixels for a {height}x{width} image",
            pixels.len()
        )));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Dumps up to `limit` raw/reconstruction pairs of a victim as PGM files.
pub fn dump_pgm(dir: &Path, victim: &VictimLeakage, limit: usize) -> Result<Vec<String>> {
    let (Some(raw), Some(recon)) = (&victim.raw, &victim.reconstruction) else {
        return Ok(Vec::new());
    };
    let shape = &raw.shape()[1..];
    let (h, w) = match *shape {
        [l] => (1, l),
        [h, w] | [1, h, w] => (h, w),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            shape[shape.len() - 1],
        ),
    };
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for i in 0..raw.batch().min(limit) {
        for (kind, t) in [("raw", raw), ("recon", recon)] {
            let name = format!("client{}_{i}_{kind}.pgm", victim.client);
            let f = std::fs::File::create(dir.join(&name))?;
            write_pgm(std::io::BufWriter::new(f), h, w, t.row(i))?;
            names.push(name);
        }
    }
    Ok(names)
}
