use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{AttackConfig, ExperimentConfig, SCHEMA_VERSION};
use super::plot::{bar_chart, line_chart, Series};
use crate::attack::{
    build_attack_dataset, build_query_dataset, dump_pgm, evaluate_leakage, train_decoder,
    AttackScenario, AttackerRole, DecoderSpec, DecoderTraining, ReconstructionReport,
};
use crate::data::{summarize, ShardSummary};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint};
use crate::protocol::{
    cost_report, CostModel, CostRow, EpochReport, Federation, LedgerDigest, MessageLedger,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const LEAKAGE_FILE: &str = "leakage.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageSummary {
    pub report: String,
    pub attacker_client: usize,
    pub self_ssim: f64,
    pub cross_ssim: Option<f64>,
    pub cross_mse: Option<f64>,
    pub ssim_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub engine_version: String,
    pub config: ExperimentConfig,
    pub shard_counts: Vec<usize>,
    pub epochs: Vec<EpochReport>,
    /// Per-client test accuracy once training has finished.
    pub final_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub costs: Vec<CostRow>,
    pub ledger_digest: LedgerDigest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leakage: Option<LeakageSummary>,
    pub wall_clock_seconds: f64,
    pub hash: String,
}

impl RunManifest {
    /// SHA-256 over everything except the hash, wall-clock time and output path.
    pub fn compute_hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("hash");
            obj.remove("wall_clock_seconds");
            if let Some(cfg) = obj.get_mut("config").and_then(|c| c.as_object_mut()) {
                cfg.remove("output_dir");
            }
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
    }

    pub fn seal(&mut self) -> Result<()> {
        self.hash = self.compute_hash()?;
        Ok(())
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::State(format!("cannot read manifest {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(u64::from(SCHEMA_VERSION)) {
            return Err(Error::config(
                "schema_version",
                format!(
                    "{} has manifest version {}, this build reads version {SCHEMA_VERSION}",
                    path.display(),
                    version.map_or("<missing>".into(), |v| v.to_string())
                ),
            ));
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        write_json(&run_dir.join(MANIFEST_FILE), self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Writes `partition.json` (summary) and `shards.json` (indices).
pub fn cmd_partition(config: &ExperimentConfig, out: &Path) -> Result<ShardSummary> {
    let prepared = config.prepare()?;
    let summary = summarize(&prepared.train, &prepared.partition, &prepared.shards);
    fs::create_dir_all(out)?;
    write_json(&out.join("partition.json"), &summary)?;
    write_json(&out.join("shards.json"), &prepared.shards)?;
    Ok(summary)
}

/// Trains the configured scheme and writes the manifest, checkpoints, CSVs,
/// ledger and an accuracy plot into `out`.
pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let prepared = config.prepare()?;
    let mut fed = Federation::new(
        &prepared.split,
        &prepared.train,
        &prepared.shards,
        config.scheme.clone(),
        config.protocol_seeds(),
        config.ledger_options(),
    )?;
    fed.deterministic = config.run.deterministic;
    let total = config.scheme.epochs;
    let mut epochs = Vec::with_capacity(total);
    for e in 0..total {
        let mut report = fed.run_epoch()?;
        if config.run.eval_every_epoch || e + 1 == total {
            report.accuracy = Some(fed.evaluate(&prepared.test)?);
        }
        epochs.push(report);
    }
    fed.finish();
    let final_accuracy = fed.evaluate(&prepared.test)?;
    if config.scheme.scheme.is_psl_family() {
        fed.recorder.ledger.audit_no_client_weight_exchange()?;
    }
    let model = CostModel {
        clients: prepared.shards.len(),
        dataset_items: prepared.shards.iter().map(|s| s.len()).sum(),
        split_size: prepared.split.split_size()?,
        client_params: fed.client_param_count(),
    };
    let costs = cost_report(&fed.recorder.costs, config.scheme.scheme, &model);

    fs::create_dir_all(out.join("checkpoints"))?;
    fs::create_dir_all(out.join("plots"))?;
    for c in &fed.clients {
        let f = File::create(out.join(format!("checkpoints/client_{}.pslw", c.client_id)))?;
        write_checkpoint(&c.params, BufWriter::new(f))?;
    }
    for s in &fed.servers {
        let f = File::create(out.join(format!("checkpoints/server_{}.pslw", s.instance_id)))?;
        write_checkpoint(&s.params, BufWriter::new(f))?;
    }
    {
        let mut w = BufWriter::new(File::create(out.join(LEDGER_FILE))?);
        fed.recorder.ledger.write_jsonl(&mut w)?;
        w.flush()?;
    }
    let mut persisted = config.clone();
    persisted.output_dir = Some(out.to_path_buf());
    fs::write(out.join(CONFIG_FILE), persisted.to_json()? + "\n")?;

    let mut acc = csv::Writer::from_path(out.join("accuracy.csv"))?;
    acc.write_record(["epoch", "client", "accuracy"])?;
    for r in &epochs {
        if let Some(a) = &r.accuracy {
            for (k, v) in a.iter().enumerate() {
                acc.write_record([(r.epoch + 1).to_string(), k.to_string(), v.to_string()])?;
            }
        }
    }
    for (k, v) in final_accuracy.iter().enumerate() {
        acc.write_record(["final".to_string(), k.to_string(), v.to_string()])?;
    }
    acc.flush()?;
    let mut cw = csv::Writer::from_path(out.join("costs.csv"))?;
    for row in &costs {
        cw.serialize(row)?;
    }
    cw.flush()?;

    let series: Vec<Series> = (0..fed.clients.len())
        .map(|k| Series {
            label: format!("client {k}"),
            points: epochs
                .iter()
                .filter_map(|r| r.accuracy.as_ref().map(|a| ((r.epoch + 1) as f64, a[k])))
                .collect(),
        })
        .collect();
    fs::write(
        out.join("plots/accuracy.svg"),
        line_chart(
            &format!("{} test accuracy", config.scheme.scheme),
            "epoch",
            "accuracy",
            &series,
            Some((0.0, 1.0)),
        ),
    )?;

    let mut manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        config: persisted,
        shard_counts: prepared.shards.iter().map(|s| s.len()).collect(),
        epochs,
        mean_accuracy: mean(&final_accuracy),
        final_accuracy,
        costs,
        ledger_digest: fed.recorder.ledger.digest(),
        leakage: None,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        hash: String::new(),
    };
    manifest.seal()?;
    manifest.save(out)?;
    Ok(manifest)
}

/// Runs the inversion attack against a finished run in `run_dir`, writes
/// `leakage.json` and links it from the manifest.
pub fn cmd_attack(config: &ExperimentConfig, run_dir: &Path) -> Result<ReconstructionReport> {
    let mut manifest = RunManifest::load(run_dir)?;
    let attack = config.attack.clone().unwrap_or(AttackConfig {
        attacker_role: AttackerRole::Client,
        attacker_client: 0,
        victims: None,
        query_budget: None,
        decoder: Default::default(),
        dump_images: 0,
    });
    let prepared = config.prepare()?;
    let n = prepared.shards.len();
    if attack.attacker_client >= n {
        return Err(Error::config(
            "attack.attacker_client",
            format!(
                "client {} does not exist ({n} clients)",
                attack.attacker_client
            ),
        ));
    }
    let ckpt = run_dir.join(format!(
        "checkpoints/client_{}.pslw",
        attack.attacker_client
    ));
    let file = File::open(&ckpt)
        .map_err(|e| Error::State(format!("cannot open checkpoint {}: {e}", ckpt.display())))?;
    let params = read_checkpoint(BufReader::new(file))?;
    let client_spec = prepared.split.client_spec();
    params.validate_for(&client_spec)?;
    let ledger_path = run_dir.join(LEDGER_FILE);
    let file = File::open(&ledger_path)
        .map_err(|e| Error::State(format!("cannot open ledger {}: {e}", ledger_path.display())))?;
    let entries = MessageLedger::read_jsonl(BufReader::new(file))?;

    let pairs = match attack.attacker_role {
        AttackerRole::Client => {
            let (x, _) = prepared
                .train
                .batch(&prepared.shards[attack.attacker_client].indices)?;
            build_attack_dataset(&client_spec, &params, &x)?
        }
        AttackerRole::Server => build_query_dataset(
            &client_spec,
            &params,
            &prepared.test,
            attack.query_budget.unwrap_or(0),
            config.seeds.attack,
        )?,
    };
    let decoder = train_decoder(
        &DecoderSpec::mirror(&client_spec)?,
        &pairs,
        &DecoderTraining {
            epochs: attack.decoder.epochs,
            learning_rate: attack.decoder.learning_rate,
            batch_size: attack.decoder.batch_size,
            seed: config.seeds.attack,
        },
    )?;
    let self_pairs = build_attack_dataset(&client_spec, &params, &prepared.test.inputs)?;
    let scenario = AttackScenario {
        attacker_role: attack.attacker_role,
        attacker_client: attack.attacker_client,
        victims: attack.victims.clone().unwrap_or_else(|| (0..n).collect()),
        query_budget: attack.query_budget,
    };
    let report = evaluate_leakage(&scenario, &decoder, &self_pairs, &entries, &prepared.train)?;
    write_json(&run_dir.join(LEAKAGE_FILE), &report)?;
    if attack.dump_images > 0 {
        let dir = run_dir.join("reconstructions");
        fs::create_dir_all(&dir)?;
        for v in &report.victims {
            dump_pgm(&dir, v, attack.dump_images)?;
        }
    }
    manifest.leakage = Some(LeakageSummary {
        report: LEAKAGE_FILE.into(),
        attacker_client: attack.attacker_client,
        self_ssim: report.self_scores.ssim,
        cross_ssim: report.cross_ssim,
        cross_mse: report.cross_mse,
        ssim_ratio: report.ssim_ratio(),
    });
    manifest.seal()?;
    manifest.save(run_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub runs: Vec<String>,
    /// Rows of the accuracy table: client id (or `mean`) then one value per run.
    pub accuracy: Vec<(String, Vec<f64>)>,
    /// Runs with leakage results, by descending cross-client SSIM.
    pub leakage_order: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn run_label(dir: &Path, manifest: &RunManifest) -> String {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    format!("{name}:{}", manifest.config.scheme.scheme)
}

/// Compares runs: accuracy tables, per-epoch curves and leakage bars.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportSummary> {
    if run_dirs.is_empty() {
        return Err(Error::config(
            "runs",
            "at least one run directory is required",
        ));
    }
    let manifests = run_dirs
        .iter()
        .map(|d| RunManifest::load(d))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = run_dirs
        .iter()
        .zip(&manifests)
        .map(|(d, m)| run_label(d, m))
        .collect();
    fs::create_dir_all(out.join("plots"))?;
    let mut files = Vec::new();

    let clients = manifests
        .iter()
        .map(|m| m.final_accuracy.len())
        .max()
        .unwrap_or(0);
    let mut rows: Vec<(String, Vec<f64>)> = (0..clients)
        .map(|k| {
            let vals = manifests
                .iter()
                .map(|m| m.final_accuracy.get(k).copied().unwrap_or(f64::NAN))
                .collect();
            (k.to_string(), vals)
        })
        .collect();
    rows.push((
        "mean".into(),
        manifests.iter().map(|m| m.mean_accuracy).collect(),
    ));
    let path = out.join("report_accuracy.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut head = vec!["client".to_string()];
    head.extend(labels.iter().cloned());
    let diff = manifests.len() == 2;
    if diff {
        head.push("diff".into());
    }
    w.write_record(&head)?;
    for (name, vals) in &rows {
        let mut rec = vec![name.clone()];
        rec.extend(vals.iter().map(|v| v.to_string()));
        if diff {
            rec.push((vals[1] - vals[0]).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    files.push(path);

    let path = out.join("report_epochs.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["run", "epoch", "mean_accuracy"])?;
    let mut series = Vec::new();
    for (label, m) in labels.iter().zip(&manifests) {
        let mut points = Vec::new();
        for r in &m.epochs {
            if let Some(a) = &r.accuracy {
                let v = mean(a);
                w.write_record([label.clone(), (r.epoch + 1).to_string(), v.to_string()])?;
                points.push(((r.epoch + 1) as f64, v));
            }
        }
        series.push(Series {
            label: label.clone(),
            points,
        });
    }
    w.flush()?;
    files.push(path);
    let path = out.join("plots/accuracy_vs_epoch.svg");
    fs::write(
        &path,
        line_chart(
            "Mean test accuracy",
            "epoch",
            "accuracy",
            &series,
            Some((0.0, 1.0)),
        ),
    )?;
    files.push(path);

    let bars: Vec<(String, f64)> = labels
        .iter()
        .zip(&manifests)
        .map(|(l, m)| (l.clone(), m.mean_accuracy))
        .collect();
    let path = out.join("plots/final_accuracy.svg");
    fs::write(
        &path,
        bar_chart("Final mean accuracy", "accuracy", &bars, Some((0.0, 1.0))),
    )?;
    files.push(path);

    let mut leaks: Vec<(String, &LeakageSummary)> = labels
        .iter()
        .zip(&manifests)
        .filter_map(|(l, m)| m.leakage.as_ref().map(|s| (l.clone(), s)))
        .collect();
    leaks.sort_by(|a, b| {
        let (x, y) = (
            a.1.cross_ssim.unwrap_or(f64::NEG_INFINITY),
            b.1.cross_ssim.unwrap_or(f64::NEG_INFINITY),
        );
        y.total_cmp(&x)
    });
    if !leaks.is_empty() {
        let path = out.join("report_leakage.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "run",
            "attacker",
            "self_ssim",
            "cross_ssim",
            "ssim_ratio",
            "dissimilarity",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for (l, s) in &leaks {
            w.write_record([
                l.clone(),
                s.attacker_client.to_string(),
                s.self_ssim.to_string(),
                opt(s.cross_ssim),
                opt(s.ssim_ratio),
                opt(s.cross_ssim.map(|c| 1.0 - c)),
            ])?;
        }
        w.flush()?;
        files.push(path);
        let bars: Vec<(String, f64)> = leaks
            .iter()
            .map(|(l, s)| (l.clone(), s.cross_ssim.unwrap_or(0.0)))
            .collect();
        let path = out.join("plots/leakage.svg");
        fs::write(
            &path,
            bar_chart("Cross-client SSIM", "ssim", &bars, Some((-0.2, 1.0))),
        )?;
        files.push(path);
    }

    let summary = ReportSummary {
        runs: labels,
        accuracy: rows,
        leakage_order: leaks.iter().map(|(l, _)| l.clone()).collect(),
        files,
    };
    write_json(&out.join("report.json"), &summary)?;
    Ok(summary)
}
