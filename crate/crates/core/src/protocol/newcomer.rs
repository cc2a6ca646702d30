use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::federation::{Federation, Seeds};
use super::message::LedgerOptions;
use super::{Scheme, SchemeConfig};
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::nn::SplitModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewcomerPolicy {
    TrainAll,
    TrainNew,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewcomerConfig {
    pub existing: Vec<usize>,
    pub newcomers: Vec<usize>,
    pub policy: NewcomerPolicy,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
}

impl NewcomerConfig {
    pub fn validate(&self, client_count: usize) -> Result<()> {
        if self.existing.is_empty() {
            return Err(Error::config("newcomer.existing", "no existing clients"));
        }
        if self.newcomers.is_empty() {
            return Err(Error::config("newcomer.newcomers", "no new clients"));
        }
        let existing: BTreeSet<usize> = self.existing.iter().copied().collect();
        let newcomers: BTreeSet<usize> = self.newcomers.iter().copied().collect();
        if existing.len() != self.existing.len() || newcomers.len() != self.newcomers.len() {
            return Err(Error::config("newcomer", "duplicate client id"));
        }
        if let Some(c) = existing.intersection(&newcomers).next() {
            return Err(Error::config(
                "newcomer.newcomers",
                format!("client {c} is also listed as existing"),
            ));
        }
        if let Some(c) = existing.union(&newcomers).find(|&&c| c >= client_count) {
            return Err(Error::config(
                "newcomer",
                format!("client {c} has no shard ({client_count} shards)"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewcomerReport {
    pub policy: NewcomerPolicy,
    pub cache_enabled: bool,
    /// Accuracy of every client after phase 1 and after phase 2.
    pub phase1_accuracy: Vec<f64>,
    pub phase2_accuracy: Vec<f64>,
    pub existing_before: f64,
    pub existing_after: f64,
    pub newcomer_before: f64,
    pub newcomer_after: f64,
}

impl NewcomerReport {
    /// Mean accuracy lost by existing clients during phase 2.
    pub fn existing_drop(&self) -> f64 {
        self.existing_before - self.existing_after
    }
}

fn mean_of(acc: &[f64], ids: &[usize]) -> f64 {
    ids.iter().map(|&i| acc[i]).sum::<f64>() / ids.len() as f64
}

/// Two-phase P-SL: phase 1 trains the existing clients, phase 2 trains either
/// everyone or only the newcomers. `config.scheme` must be `psl` or
/// `psl_cache`; the latter keeps the server cache across both phases.
pub fn run_newcomer_scenario(
    split: &SplitModelSpec,
    dataset: &Dataset,
    shards: &[ClientShard],
    config: &SchemeConfig,
    newcomer: &NewcomerConfig,
    seeds: Seeds,
    test: &Dataset,
) -> Result<NewcomerReport> {
    if !matches!(config.scheme, Scheme::Psl | Scheme::PslCache) {
        return Err(Error::config(
            "scheme.scheme",
            format!(
                "newcomer scenarios run psl or psl_cache, got {}",
                config.scheme
            ),
        ));
    }
    newcomer.validate(shards.len())?;
    let mut fed = Federation::new(
        split,
        dataset,
        shards,
        config.clone(),
        seeds,
        LedgerOptions::default(),
    )?;
    let mut existing = newcomer.existing.clone();
    existing.sort_unstable();
    let mut newcomers = newcomer.newcomers.clone();
    newcomers.sort_unstable();
    for _ in 0..newcomer.phase1_epochs {
        fed.run_psl_epoch(&existing)?;
    }
    let phase1_accuracy = fed.evaluate(test)?;
    let phase2: Vec<usize> = match newcomer.policy {
        NewcomerPolicy::TrainAll => {
            let mut all: Vec<usize> = existing.iter().chain(&newcomers).copied().collect();
            all.sort_unstable();
            all
        }
        NewcomerPolicy::TrainNew => newcomers.clone(),
    };
    for _ in 0..newcomer.phase2_epochs {
        fed.run_psl_epoch(&phase2)?;
    }
    let phase2_accuracy = fed.evaluate(test)?;
    Ok(NewcomerReport {
        policy: newcomer.policy,
        cache_enabled: config.scheme == Scheme::PslCache,
        existing_before: mean_of(&phase1_accuracy, &existing),
        existing_after: mean_of(&phase2_accuracy, &existing),
        newcomer_before: mean_of(&phase1_accuracy, &newcomers),
        newcomer_after: mean_of(&phase2_accuracy, &newcomers),
        phase1_accuracy,
        phase2_accuracy,
    })
}
