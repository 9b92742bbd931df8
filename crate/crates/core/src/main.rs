use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparsetrain::experiment::{
    compare_runs, exit_code, inspect, render_comparison, render_inspection, run_experiment,
    OUTPUT_DIR_ENV,
};

#[derive(Parser)]
#[command(name = "sparsetrain", version, about = "Sparse training experiments on a toy network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, compress and attack as described by a JSON config.
    #[command(after_help = format!("The output directory can be overridden with {OUTPUT_DIR_ENV}."))]
    Run { config: PathBuf },
    /// Compare summary.json files against the first one.
    Compare {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
    },
    /// Print per-layer sparsity of a checkpoint.
    Inspect { checkpoint: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => run_experiment(&config).map(|r| {
            println!(
                "{}: top1 {:.4}, sparsity {:.4}, wrote {}",
                r.summary.name,
                r.summary.final_top1,
                r.summary.final_sparsity,
                r.output_dir.display()
            );
        }),
        Command::Compare { summaries } => {
            compare_runs(&summaries).map(|rows| print!("{}", render_comparison(&rows)))
        }
        Command::Inspect { checkpoint } => {
            inspect(&checkpoint).map(|rows| print!("{}", render_inspection(&rows)))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
