use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hhft_core::harness::{self, RunOptions};
use hhft_core::model::Precision;
use hhft_core::HhftError;

#[derive(Parser)]
#[command(name = "hhft", version, about = "Train and compare heterogeneous-feature ranking models")]
struct Cli {
    /// Overrides the seed list of a config (and the generator seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Threads for independent seeds.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset described by a generator config.
    Generate { config: PathBuf },
    /// Train every seed of an experiment config.
    Train { config: PathBuf },
    /// Train the ablation ladder.
    Ablate { config: PathBuf },
    /// Scale one knob over a list of multipliers.
    Sweep { spec: PathBuf },
    /// Merge run reports found under the given directories.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: HhftError| e.to_string())
}

fn run(cli: Cli) -> hhft_core::Result<()> {
    if cli.parallel == 0 {
        return Err(HhftError::Config("--parallel must be at least 1".into()));
    }
    let opts = RunOptions {
        seed: cli.seed,
        precision: cli.precision,
        out_dir: cli.out_dir,
        parallel: cli.parallel,
    };
    match cli.command {
        Command::Generate { config } => {
            let ds = harness::cmd_generate(&config, &opts)?;
            println!(
                "wrote {} records ({} train, {} eval) to {}",
                ds.header.counts.records,
                ds.header.counts.train,
                ds.header.counts.eval,
                opts.out_dir.display()
            );
        }
        Command::Train { config } => {
            let a = harness::cmd_train(&config, &opts)?;
            println!(
                "{}: auc {:.4} ± {:.4} over seeds {:?}, {} dense params",
                a.run, a.auc_mean, a.auc_std, a.seeds, a.dense_params
            );
        }
        Command::Ablate { config } => {
            println!("{:<20} {:>8} {:>8} {:>9} {:>10}", "rung", "auc", "std", "Δ vs mlp", "params");
            for r in harness::cmd_ablate(&config, &opts)? {
                println!(
                    "{:<20} {:>8.4} {:>8.4} {:>+9.4} {:>10}",
                    r.rung, r.auc_mean, r.auc_std, r.delta_vs_mlp, r.dense_params
                );
            }
        }
        Command::Sweep { spec } => {
            for r in harness::cmd_sweep(&spec, &opts)? {
                println!(
                    "{} x{} = {}: auc {:.4} ± {:.4}, {} dense params",
                    r.knob.name(),
                    r.multiplier,
                    r.value,
                    r.auc_mean,
                    r.auc_std,
                    r.dense_params
                );
            }
        }
        Command::Report { run_dirs } => {
            let merged = harness::cmd_report(&run_dirs, &opts)?;
            println!("merged {} runs into {}", merged.len(), opts.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
    }
}
