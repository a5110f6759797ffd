use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cbn_harness::compare::{compare_runs, render_csv, render_text};
use cbn_harness::config::TrainConfig;
use cbn_harness::diagnose::{render_text as render_diagnose, run_diagnose};
use cbn_harness::error::{io_err, HarnessResult};
use cbn_harness::trainer::{run_train, TrainOptions};

/// Training harness for cross-iteration batch normalization experiments.
#[derive(Parser)]
#[command(name = "cbn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network per a config file, writing metrics and checkpoints.
    Train {
        /// TOML config file.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop and checkpoint after this many optimizer steps from the
        /// start of the run.
        #[arg(long)]
        stop_after_iters: Option<u64>,
        /// Keep one checkpoint per finished epoch in addition to the latest.
        #[arg(long)]
        keep_epoch_checkpoints: bool,
        /// Suppress per-epoch progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Summarize finished runs: across-seed mean and spread per method.
    Compare {
        /// Run directories, each holding meta.toml and metrics.csv.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Also write per-epoch curves to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Probe cross-layer statistic sensitivity on the configured network.
    Diagnose {
        /// TOML config file describing the network and dataset.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to restore before probing; defaults to the one in the
        /// config's output directory when present.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> HarnessResult<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
            stop_after_iters,
            keep_epoch_checkpoints,
            quiet,
        } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.out_dir = Some(out);
            }
            let opts = TrainOptions {
                stop_after_iters,
                resume,
                keep_epoch_checkpoints,
                verbose: !quiet,
            };
            let summary = run_train(&cfg, &opts)?;
            match summary.final_eval_top1 {
                Some(top1) => println!(
                    "{} seed {}: {} epochs, final eval top-1 {:.2}% -> {}",
                    summary.method,
                    summary.seed,
                    summary.epochs_done,
                    top1 * 100.0,
                    summary.out_dir.display()
                ),
                None => println!(
                    "{} seed {}: stopped after {} steps -> {}",
                    summary.method,
                    summary.seed,
                    summary.global_step,
                    summary.out_dir.display()
                ),
            }
            Ok(())
        }
        Command::Compare { run_dirs, csv } => {
            let summaries = compare_runs(&run_dirs)?;
            print!("{}", render_text(&summaries));
            if let Some(path) = csv {
                std::fs::write(&path, render_csv(&summaries)).map_err(|e| io_err(&path, e))?;
                println!("per-epoch curves -> {}", path.display());
            }
            Ok(())
        }
        Command::Diagnose { config, checkpoint } => {
            let cfg = TrainConfig::from_file(&config)?;
            let report = run_diagnose(&cfg, checkpoint.as_deref())?;
            print!("{}", render_diagnose(&report));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
