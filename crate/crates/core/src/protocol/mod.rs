//! Training orchestrators, the message layer and per-client cost accounting.

mod cache;
mod cost;
mod federation;
mod message;
mod newcomer;

pub use cache::{stack_entries, CacheEntry, CachePool};
pub use cost::{cost_report, ClientCost, CostLedger, CostModel, CostRow};
pub use federation::{
    Batch, ClientState, EpochReport, Federation, Recorder, RunReport, Seeds, ServerInstance,
    ServerStep, Trainer,
};
pub use message::{
    BatchId, Envelope, LedgerDigest, LedgerOptions, Message, MessageKind, MessageLedger, Payload,
    Role, SnapshotKind,
};
pub use newcomer::{run_newcomer_scenario, NewcomerConfig, NewcomerPolicy, NewcomerReport};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    SlVanilla,
    SlRoundrobin,
    Sfl,
    Msl,
    Psl,
    PslParallel,
    PslCache,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::SlVanilla,
        Scheme::SlRoundrobin,
        Scheme::Sfl,
        Scheme::Msl,
        Scheme::Psl,
        Scheme::PslParallel,
        Scheme::PslCache,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::SlVanilla => "sl_vanilla",
            Scheme::SlRoundrobin => "sl_roundrobin",
            Scheme::Sfl => "sfl",
            Scheme::Msl => "msl",
            Scheme::Psl => "psl",
            Scheme::PslParallel => "psl_parallel",
            Scheme::PslCache => "psl_cache",
        }
    }

    /// Schemes in which clients never see each other's weights.
    pub fn is_psl_family(self) -> bool {
        matches!(self, Scheme::Psl | Scheme::PslParallel | Scheme::PslCache)
    }

    /// Schemes in which every client starts from the same weights.
    pub fn shares_client_init(self) -> bool {
        matches!(self, Scheme::SlVanilla | Scheme::SlRoundrobin | Scheme::Sfl)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    #[default]
    Fixed,
    RandomPerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelConfig {
    /// Server instances (m).
    pub instances: usize,
    /// Snapshots per aggregation (K); defaults to `instances`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshots_per_aggregation: Option<usize>,
}

impl ParallelConfig {
    pub fn k(&self) -> usize {
        self.snapshots_per_aggregation.unwrap_or(self.instances)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    /// Maximum cached samples; defaults to the federation's sample count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
    /// Cached samples mixed into each batch, as a fraction of the batch size.
    #[serde(default = "one")]
    pub sample_fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            capacity: None,
            sample_fraction: 1.0,
        }
    }
}

impl CacheConfig {
    pub fn sample_count(&self, batch: usize) -> usize {
        (self.sample_fraction * batch as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub order: OrderPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallel: Option<ParallelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<CacheConfig>,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme, epochs: usize, batch_size: usize, learning_rate: f64) -> Self {
        SchemeConfig {
            scheme,
            epochs,
            batch_size,
            learning_rate,
            order: OrderPolicy::Fixed,
            parallel: (scheme == Scheme::PslParallel).then_some(ParallelConfig {
                instances: 2,
                snapshots_per_aggregation: None,
            }),
            cache: (scheme == Scheme::PslCache).then(CacheConfig::default),
        }
    }

    /// Checks scheme-specific fields against the scheme and the client count.
    pub fn validate(&self, client_count: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("scheme.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("scheme.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "scheme.learning_rate",
                format!("must be finite and nonnegative, got {}", self.learning_rate),
            ));
        }
        if client_count == 0 {
            return Err(Error::config(
                "partition.client_count",
                "must be at least 1",
            ));
        }
        if self.scheme == Scheme::SlVanilla && client_count != 1 {
            return Err(Error::config(
                "scheme.scheme",
                format!("sl_vanilla needs exactly one client, got {client_count}"),
            ));
        }
        match (self.scheme, &self.parallel) {
            (Scheme::PslParallel, None) => {
                return Err(Error::config("scheme.parallel", "required by psl_parallel"))
            }
            (Scheme::PslParallel, Some(p)) => {
                if p.instances < 1 {
                    return Err(Error::config(
                        "scheme.parallel.instances",
                        "must be at least 1",
                    ));
                }
                if p.k() < 1 {
                    return Err(Error::config(
                        "scheme.parallel.snapshots_per_aggregation",
                        "must be at least 1",
                    ));
                }
            }
            (s, Some(_)) => {
                return Err(Error::config(
                    "scheme.parallel",
                    format!("only valid for psl_parallel, scheme is {s}"),
                ))
            }
            _ => {}
        }
        match (self.scheme, &self.cache) {
            (Scheme::PslCache, None) => {
                return Err(Error::config("scheme.cache", "required by psl_cache"))
            }
            (Scheme::PslCache, Some(c)) => {
                if !(c.sample_fraction >= 0.0 && c.sample_fraction.is_finite()) {
                    return Err(Error::config(
                        "scheme.cache.sample_fraction",
                        "must be finite and nonnegative",
                    ));
                }
                if c.capacity == Some(0) {
                    return Err(Error::config("scheme.cache.capacity", "must be at least 1"));
                }
            }
            (s, Some(_)) => {
                return Err(Error::config(
                    "scheme.cache",
                    format!("only valid for psl_cache, scheme is {s}"),
                ))
            }
            _ => {}
        }
        Ok(())
    }
}
