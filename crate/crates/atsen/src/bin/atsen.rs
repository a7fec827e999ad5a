//! Command-line surface: corpus synthesis, training runs, ablation sweeps
//! and checkpoint evaluation.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 I/O error, 3 internal
//! error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use atsen::error::Error;
use atsen::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "atsen", version, about = "Dual teacher-student self-training for noisy sequence labeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Scalar config overrides, e.g. --set trainer.max_epochs=3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus files and print the noise report.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for the corpus files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full training pipeline and write record plus checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for record and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run baseline vs one ablated configuration under identical seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Ablation name (cp, tp, ce, ad, fe, avg_kd, manual_kd, se, ema,
        /// all_ensemble).
        #[arg(long)]
        name: String,
        /// Output directory for the comparison report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a gold-tagged dataset file.
    Eval {
        /// Checkpoint file (expects vocab.json next to it).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file (JSONL).
        #[arg(long)]
        data: PathBuf,
    },
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::config("--set", format!("expected KEY=VALUE, got {s:?}")))
        })
        .collect()
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let overrides = parse_overrides(&args.set)?;
    ExperimentConfig::load(&args.config, &overrides)
}

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Parse { .. } | Error::Schema(_) => EXIT_USAGE,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_INTERNAL,
    }
}

fn run() -> Result<(), (u8, String)> {
    let cli = Cli::try_parse().map_err(|e| {
        // clap prints its own rich message; keep it and map to usage exit.
        (EXIT_USAGE, e.to_string())
    })?;
    let fail = |e: Error| (exit_code_for(&e), e.to_string());
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = load_config(&config).map_err(fail)?;
            let report = experiment::cmd_synth(&cfg, &out).map_err(fail)?;
            println!("corpus written to {}", out.display());
            println!(
                "label precision {:.4}  label recall {:.4}  confused spans {}  ({} noisy / {} gold spans){}",
                report.label_precision,
                report.label_recall,
                report.confusion_count,
                report.noisy_spans,
                report.gold_spans,
                if report.zero_denominator { "  [zero denominator]" } else { "" }
            );
            Ok(())
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config).map_err(fail)?;
            let run_out = experiment::cmd_train(&cfg, &out).map_err(fail)?;
            let record = &run_out.record;
            println!("record written to {}", out.join("record.json").display());
            println!(
                "best model {} (epoch {}, dev F1 {:.4})",
                record.best.model, record.best.epoch, record.best.dev_f1
            );
            if let Some(test) = &record.test {
                println!("test metrics:\n{}", test.render_table());
            }
            if !record.complete {
                return Err((
                    EXIT_INTERNAL,
                    format!(
                        "run aborted: {} (partial record written)",
                        record.error.as_deref().unwrap_or("unknown error")
                    ),
                ));
            }
            Ok(())
        }
        Command::Ablate { config, name, out } => {
            let cfg = load_config(&config).map_err(fail)?;
            let report = experiment::cmd_ablate(&cfg, &name, &out).map_err(fail)?;
            println!("ablation {} vs baseline (identical seeds):", report.ablation);
            print!("{}", report.render_table());
            Ok(())
        }
        Command::Eval { checkpoint, data } => {
            let metrics = experiment::cmd_eval(&checkpoint, &data).map_err(fail)?;
            print!("{}", metrics.render_table());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("{message}");
            ExitCode::from(code)
        }
    }
}
