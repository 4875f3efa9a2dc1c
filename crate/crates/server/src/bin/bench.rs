use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use log::{info, warn};

use m2n2::eval::{import_davis, run_benchmark, write_synthetic_dataset, EvalConfig};
use m2n2::segmenter::{Method, SessionConfig};
use m2n2::world::WorldConfig;
use m2n2_server::cli::parse_targets;

#[derive(Parser)]
#[command(name = "bench", about = "Simulated-click benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a method on a dataset directory.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "m2n2")]
        method: Method,
        #[arg(long, default_value_t = 20)]
        max_clicks: usize,
        #[arg(long, default_value = "0.85,0.90")]
        targets: String,
        /// Stop an instance once every target is reached.
        #[arg(long)]
        stop_when_reached: bool,
        /// Per-instance CSV; histogram and mIoU files are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a DAVIS checkout into a dataset directory. Attention files
    /// must be exported separately into the `attention/` folder.
    ImportDavis { src: PathBuf, dst: PathBuf },
    /// Write a dataset of synthetic worlds.
    MakeSynthetic {
        dst: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            dataset,
            method,
            max_clicks,
            targets,
            stop_when_reached,
            out,
        } => {
            let eval = EvalConfig {
                max_clicks,
                iou_targets: parse_targets(&targets)?,
                stop_when_reached,
            };
            let report = run_benchmark(&dataset, &SessionConfig::with_method(method), &eval)?;
            print!("{}", report.render_table());
            for path in report.write(&out)? {
                info!("wrote {}", path.display());
            }
            if report.complete() {
                Ok(ExitCode::SUCCESS)
            } else {
                warn!(
                    "{} instance(s) skipped, {} failed",
                    report.skipped.len(),
                    report.failures()
                );
                Ok(ExitCode::FAILURE)
            }
        }
        Command::ImportDavis { src, dst } => {
            let n = import_davis(&src, &dst)?;
            info!("imported {n} instances into {}", dst.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::MakeSynthetic { dst, count, seed } => {
            let n = write_synthetic_dataset(&dst, count, seed, &WorldConfig::default())?;
            info!("wrote {n} instances to {}", dst.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
