//! Config-driven experiment runs: partition, train, attack and report.

mod config;
pub mod plot;
mod run;

pub use config::{
    AttackConfig, DatasetConfig, DecoderConfig, ExperimentConfig, ModelConfig, PartitionConfig,
    Prepared, RunOptions, SeedConfig, SCHEMA_VERSION,
};
pub use run::{
    cmd_attack, cmd_partition, cmd_report, cmd_train, LeakageSummary, ReportSummary, RunManifest,
    CONFIG_FILE, LEAKAGE_FILE, LEDGER_FILE, MANIFEST_FILE,
};
