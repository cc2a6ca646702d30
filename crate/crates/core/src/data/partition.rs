use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed::{rng_for, tag};

/// Splitting ratios of the six-client imbalanced federation (1% ... 38%).
pub const PAPER_RATIOS_6: [f64; 6] = [0.01, 0.03, 0.09, 0.19, 0.30, 0.38];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionMode {
    Balanced,
    /// Shard sizes follow `ratios`; `None` uses [`default_imbalanced_ratios`].
    Imbalanced {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ratios: Option<Vec<f64>>,
    },
    #[serde(rename = "noniid")]
    NonIid {
        classes_per_client: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub mode: PartitionMode,
    pub client_count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    /// Sorted indices into the parent dataset.
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

impl PartitionSpec {
    /// Resolved ratio vector for imbalanced mode.
    pub fn ratios(&self) -> Result<Option<Vec<f64>>> {
        match &self.mode {
            PartitionMode::Imbalanced { ratios: Some(r) } => Ok(Some(r.clone())),
            PartitionMode::Imbalanced { ratios: None } => {
                Ok(Some(default_imbalanced_ratios(self.client_count)?))
            }
            _ => Ok(None),
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.client_count == 0 {
            return Err(Error::config(
                "partition.client_count",
                "must be at least 1",
            ));
        }
        match &self.mode {
            PartitionMode::Balanced => {}
            PartitionMode::Imbalanced { ratios } => {
                if let Some(r) = ratios {
                    if r.len() != self.client_count {
                        return Err(Error::config(
                            "partition.ratios",
                            format!("{} ratios for {} clients", r.len(), self.client_count),
                        ));
                    }
                    if r.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                        return Err(Error::config("partition.ratios", "every ratio must be > 0"));
                    }
                    let sum: f64 = r.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(Error::config(
                            "partition.ratios",
                            format!("ratios sum to {sum}, expected 1"),
                        ));
                    }
                } else if self.client_count < 2 {
                    return Err(Error::config(
                        "partition.client_count",
                        "default imbalanced ratios need at least 2 clients",
                    ));
                }
            }
            PartitionMode::NonIid { classes_per_client } => {
                if *classes_per_client < 1 || *classes_per_client > class_count {
                    return Err(Error::config(
                        "partition.classes_per_client",
                        format!("must lie in 1..={class_count}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Half-bell ratios: the standard normal density at `n` evenly spaced points
/// from 2.0 down to 0.0, normalized. Later clients get more data.
pub fn default_imbalanced_ratios(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::domain(
            "default imbalanced ratios need at least 2 clients",
        ));
    }
    let step = 2.0 / (n - 1) as f64;
    let raw: Vec<f64> = (0..n)
        .map(|k| std_normal_pdf(2.0 - step * k as f64))
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Integer counts summing to `total` that deviate from `ratios * total` by
/// less than one each. Ties in the remainder go to the lower index.
pub fn largest_remainder(ratios: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = ratios.iter().sum();
    let targets: Vec<f64> = ratios.iter().map(|r| r / sum * total as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class index lists, each shuffled with the partition seed.
fn shuffled_by_class(dataset: &Dataset, seed: u64) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); dataset.class_count];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng_for(seed, &[tag::SHUFFLE, c as u64]));
    }
    by_class
}

/// Splits `dataset` into one shard per client.
///
/// * balanced: each class is dealt round-robin, continuing the client cursor
///   across classes, so both per-class and total counts differ by at most one;
/// * imbalanced: samples are ordered so that every prefix is stratified by
///   class, then cut into consecutive runs of the largest-remainder sizes;
/// * non-IID: a seeded class permutation is handed out round-robin,
///   `classes_per_client` classes per client, and each class is split evenly
///   among its holders. Classes nobody holds are left out (see [`summarize`]).
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    if dataset.is_empty() {
        return Err(Error::domain("cannot partition an empty dataset"));
    }
    spec.validate(dataset.class_count)?;
    let n = spec.client_count;
    if n > dataset.len() {
        return Err(Error::domain(format!(
            "{n} clients for {} samples",
            dataset.len()
        )));
    }
    let by_class = shuffled_by_class(dataset, spec.seed);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
    match &spec.mode {
        PartitionMode::Balanced => {
            let mut cursor = 0;
            for idx in &by_class {
                for &i in idx {
                    shards[cursor % n].push(i);
                    cursor += 1;
                }
            }
        }
        PartitionMode::Imbalanced { .. } => {
            let ratios = spec.ratios()?.expect("imbalanced mode has ratios");
            let counts = largest_remainder(&ratios, dataset.len());
            // position-in-class fraction interleaves classes proportionally
            let mut ordered: Vec<(f64, usize, usize)> = Vec::with_capacity(dataset.len());
            for (c, idx) in by_class.iter().enumerate() {
                let len = idx.len() as f64;
                for (rank, &i) in idx.iter().enumerate() {
                    ordered.push(((rank as f64 + 0.5) / len, c, i));
                }
            }
            ordered.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut it = ordered.into_iter().map(|(_, _, i)| i);
            for (shard, &count) in shards.iter_mut().zip(&counts) {
                shard.extend(it.by_ref().take(count));
            }
        }
        PartitionMode::NonIid { classes_per_client } => {
            let classes = dataset.class_count;
            let mut perm: Vec<usize> = (0..classes).collect();
            perm.shuffle(&mut rng_for(spec.seed, &[tag::SHUFFLE, u64::MAX]));
            let mut holders = vec![Vec::new(); classes];
            for client in 0..n {
                for j in 0..*classes_per_client {
                    holders[perm[(client * classes_per_client + j) % classes]].push(client);
                }
            }
            for (c, idx) in by_class.iter().enumerate() {
                let h = &holders[c];
                if h.is_empty() {
                    continue;
                }
                for (k, &i) in idx.iter().enumerate() {
                    shards[h[k % h.len()]].push(i);
                }
            }
        }
    }
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            ClientShard { client_id, indices }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardSummary {
    pub spec: PartitionSpec,
    pub total_samples: usize,
    pub counts: Vec<usize>,
    /// `histograms[client][class]`.
    pub histograms: Vec<Vec<usize>>,
    /// Classes that no shard received (non-IID with too few clients).
    pub uncovered_classes: Vec<usize>,
    pub unassigned_samples: usize,
}

pub fn summarize(dataset: &Dataset, spec: &PartitionSpec, shards: &[ClientShard]) -> ShardSummary {
    let histograms: Vec<Vec<usize>> = shards
        .iter()
        .map(|s| dataset.class_histogram(&s.indices))
        .collect();
    let counts: Vec<usize> = shards.iter().map(ClientShard::len).collect();
    let assigned: usize = counts.iter().sum();
    let uncovered_classes = (0..dataset.class_count)
        .filter(|&c| histograms.iter().all(|h| h[c] == 0) && dataset.labels.contains(&c))
        .collect();
    ShardSummary {
        spec: spec.clone(),
        total_samples: dataset.len(),
        counts,
        histograms,
        uncovered_classes,
        unassigned_samples: dataset.len() - assigned,
    }
}
