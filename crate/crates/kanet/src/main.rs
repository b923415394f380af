use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kanet::commands;
use kanet::config::RunConfig;
use kanet::Result;

#[derive(Parser)]
#[command(name = "kanet", version, about = "Knowledge-adapter FSCIL pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Key-value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Knowledge-summary layer (stage split override; requires --kf).
    #[arg(long)]
    ks: Option<usize>,
    /// Knowledge-fusion layer (stage split override; requires --ks).
    #[arg(long)]
    kf: Option<usize>,
    /// Extra `key=value` config overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run episode training on the base session and write a checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the incremental protocol and write metrics (JSON + CSV).
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Fusion checkpoint from `train`; fresh init when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Disable knowledge fusion entirely (no-adapter baseline).
        #[arg(long)]
        baseline: bool,
    },
    /// Train and evaluate every valid (KS, KF) stage split.
    SweepLayers {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Dump per-head attention weights of selected test samples.
    DumpAttention {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated base-session test sample indices.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        samples: Vec<usize>,
    },
    /// Export refined and unrefined test features for projection tools.
    ExportEmbeddings {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for pair in &common.set {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(kanet::KanetError::Config(format!(
                "--set expects KEY=VALUE, got {pair:?}"
            )));
        };
        cfg.apply(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    match (common.ks, common.kf) {
        (Some(ks), Some(kf)) => cfg.apply_stage_split(ks, kf)?,
        (None, None) => {}
        _ => {
            return Err(kanet::KanetError::Config(
                "--ks and --kf must be given together".into(),
            ))
        }
    }
    Ok(cfg)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { common } => {
            let cfg = resolve_config(&common)?;
            let artifacts = commands::cmd_train(&cfg, &common.out_dir)?;
            println!(
                "trained {} steps; checkpoint {}",
                artifacts.outcome.log.len(),
                artifacts.checkpoint.display()
            );
            if let Some(last) = artifacts.outcome.log.last() {
                println!(
                    "final losses: adapt {:.4} balance {:.4} total {:.4}",
                    last.loss_adapt, last.loss_balance, last.loss_total
                );
            }
        }
        Command::Eval { common, checkpoint, baseline } => {
            let mut cfg = resolve_config(&common)?;
            if baseline {
                cfg.baseline = true;
            }
            let report = commands::cmd_eval(&cfg, &common.out_dir, checkpoint.as_deref())?;
            for (i, acc) in report.per_session_accuracy.iter().enumerate() {
                println!("session {i}: {acc:.2}");
            }
            println!(
                "avg {:.2}  pd {:.2}  base {:.2}  new {:.2}",
                report.avg, report.pd, report.base_acc, report.new_acc
            );
        }
        Command::SweepLayers { common } => {
            let cfg = resolve_config(&common)?;
            let rows = commands::cmd_sweep_layers(&cfg, &common.out_dir)?;
            println!("swept {} stage splits -> {}", rows.len(), common.out_dir.display());
        }
        Command::DumpAttention { common, checkpoint, samples } => {
            let cfg = resolve_config(&common)?;
            let files =
                commands::cmd_dump_attention(&cfg, &common.out_dir, checkpoint.as_deref(), &samples)?;
            println!("wrote {} attention dumps", files.len());
        }
        Command::ExportEmbeddings { common, checkpoint } => {
            let cfg = resolve_config(&common)?;
            commands::cmd_export_embeddings(&cfg, &common.out_dir, checkpoint.as_deref())?;
            println!("embeddings exported to {}", common.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
