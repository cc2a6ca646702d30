//! Datasets, synthetic generators and client partitioning.

mod idx;
mod partition;
mod synth;

pub use idx::{load_idx, load_series_csv, parse_idx, parse_series_csv};
pub use partition::{
    default_imbalanced_ratios, largest_remainder, partition, summarize, ClientShard, PartitionMode,
    PartitionSpec, ShardSummary, PAPER_RATIOS_6,
};
pub use synth::{
    synth_classification, synth_classification_with, synth_series, synth_series_with,
    ClassificationStyle, SeriesStyle,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Labeled samples: `inputs` is `[N, sample shape..]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(Error::shape("dataset inputs need a leading sample axis"));
        }
        if inputs.batch() != labels.len() {
            return Err(Error::shape(format!(
                "{} samples but {} labels",
                inputs.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::domain(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels of the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.inputs.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (inputs, labels) = self.batch(indices)?;
        Ok(Dataset {
            inputs,
            labels,
            class_count: self.class_count,
        })
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::domain(format!(
                "split point {n} must lie strictly inside 1..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}
