use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ncairfl::harness::{self, ConfigError, HarnessError};

#[derive(Parser)]
#[command(name = "ncairfl", version, about = "CSI-free over-the-air federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured scheme and trial and write the metrics CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_path` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `master_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the convergence bound for the configured parameters.
    Bound {
        #[arg(long)]
        config: PathBuf,
    },
    /// Show the first trial's device partition and link budget.
    PartitionReport {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = harness::parse_config(&config)?;
            if let Some(seed) = seed {
                cfg.master_seed = seed;
            }
            let out = out.or_else(|| cfg.output_path.clone()).ok_or(ConfigError::Missing("output_path"))?;
            let result = harness::run_experiment(&cfg)?;
            harness::write_metrics_file(&result.records, &out)?;
            log::info!(
                "wrote {} rows to {}; {} power checks, {} violations",
                result.records.len(),
                out.display(),
                result.power_checks,
                result.power_violations
            );
        }
        Command::Bound { config } => {
            let cfg = harness::parse_config(&config)?;
            let (inputs, b) = harness::bound_report(&cfg)?;
            println!("snr_min = {:e}", inputs.snr_min);
            println!("d = {}", inputs.d);
            println!("eta = {:e}", inputs.eta);
            println!("eta_max = {:e}", b.eta_max);
            println!("valid = {}", b.valid);
            println!("g_tilde2 = {:e}", b.g_tilde2);
            println!("g_e2 = {:e}", b.g_e2);
            println!("init_term = {:e}", b.init_term);
            println!("detection_term = {:e}", b.detection_term);
            println!("sgd_hetero_term = {:e}", b.sgd_hetero_term);
            println!("contraction_term = {:e}", b.contraction_term);
            println!("total = {:e}", b.total);
            println!();
            println!("term,value");
            for (k, v) in [
                ("init_term", b.init_term),
                ("detection_term", b.detection_term),
                ("sgd_hetero_term", b.sgd_hetero_term),
                ("contraction_term", b.contraction_term),
                ("total", b.total),
            ] {
                println!("{k},{v:e}");
            }
        }
        Command::PartitionReport { config } => {
            let cfg = harness::parse_config(&config)?;
            print!("{}", harness::partition_report(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::FAILURE
        }
    }
}
