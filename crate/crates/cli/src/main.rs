use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use psl_core::experiment::{
    cmd_attack, cmd_partition, cmd_report, cmd_train, ExperimentConfig, CONFIG_FILE,
};
use psl_core::Error;

#[derive(Parser)]
#[command(
    name = "psl",
    version,
    about = "Split learning simulator and leakage harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace a seed, e.g. `init=7`. Repeatable.
    #[arg(long = "seed-override", value_name = "K=V")]
    seed_override: Vec<String>,
    /// Run parallel sessions on one thread in seeded order.
    #[arg(long)]
    deterministic: bool,
    /// Keep smashed-data payloads in the ledger.
    #[arg(long = "verbose-ledger")]
    verbose_ledger: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the dataset and write shard summaries.
    Partition(RunArgs),
    /// Train the configured scheme.
    Train(RunArgs),
    /// Run the inversion attack against a trained run in `--out`.
    Attack(RunArgs),
    /// Compare finished runs.
    Report {
        /// Run directories holding manifest.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn resolve(
    args: &RunArgs,
    fallback_config: Option<&Path>,
) -> Result<(ExperimentConfig, PathBuf), Error> {
    let path = match (&args.config, fallback_config) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p.to_path_buf(),
        (None, None) => return Err(Error::config("--config", "no config file given")),
    };
    let mut config = ExperimentConfig::load(&path)?;
    for o in &args.seed_override {
        config.override_seed(o)?;
    }
    config.run.deterministic |= args.deterministic;
    config.run.verbose_ledger |= args.verbose_ledger;
    config.validate()?;
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::config("output_dir", "set `output_dir` or pass --out"))?;
    Ok((config, out))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Partition(args) => {
            let (config, out) = resolve(&args, None)?;
            let summary = cmd_partition(&config, &out)?;
            for (k, (n, h)) in summary.counts.iter().zip(&summary.histograms).enumerate() {
                println!("client {k}: {n} samples, classes {:?}", h);
            }
            if !summary.uncovered_classes.is_empty() {
                println!("classes held by no client: {:?}", summary.uncovered_classes);
            }
        }
        Command::Train(args) => {
            let (config, out) = resolve(&args, None)?;
            let m = cmd_train(&config, &out)?;
            for (k, a) in m.final_accuracy.iter().enumerate() {
                println!("client {k}: accuracy {a:.4}");
            }
            println!("mean accuracy {:.4}", m.mean_accuracy);
            println!(
                "manifest {} ({})",
                out.join("manifest.json").display(),
                m.hash
            );
        }
        Command::Attack(args) => {
            let fallback = args.out.as_ref().map(|o| o.join(CONFIG_FILE));
            let (config, out) = resolve(&args, fallback.as_deref())?;
            let r = cmd_attack(&config, &out)?;
            println!(
                "self ssim {:.4} mse {:.5}",
                r.self_scores.ssim, r.self_scores.mse
            );
            for v in &r.victims {
                let tag = if v.is_self { " (attacker)" } else { "" };
                println!(
                    "victim {}{tag}: ssim {:.4} mse {:.5}",
                    v.client, v.scores.ssim, v.scores.mse
                );
            }
            if let (Some(c), Some(ratio)) = (r.cross_ssim, r.ssim_ratio()) {
                println!("cross-client ssim {c:.4}, ratio to self {ratio:.4}");
            }
        }
        Command::Report { runs, out } => {
            let s = cmd_report(&runs, &out)?;
            for f in &s.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
