use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fusedchoice_cli::{cmd_elasticity, cmd_estimate, cmd_simulate, cmd_welfare, CliError, EstimateFlags};

#[derive(Parser)]
#[command(
    name = "fusedchoice",
    version,
    about = "Sampling- and endogeneity-corrected mode-choice estimation"
)]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, its truth record and a run config.
    Simulate { config: PathBuf },
    /// Fit the model described by the config.
    Estimate {
        config: PathBuf,
        #[arg(long)]
        no_endogeneity_correction: bool,
        #[arg(long)]
        no_sampling_correction: bool,
        /// Also fit without control terms and run the LR test.
        #[arg(long)]
        compare: bool,
    },
    /// Aggregate point and arc elasticities.
    Elasticity {
        config: PathBuf,
        /// Defaults to estimates.json in the output directory.
        #[arg(long)]
        result: Option<PathBuf>,
    },
    /// Simulated compensating variations for the declared scenarios.
    Welfare {
        config: PathBuf,
        #[arg(long)]
        result: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Simulate { config } => cmd_simulate(&config),
        Command::Estimate {
            config,
            no_endogeneity_correction,
            no_sampling_correction,
            compare,
        } => cmd_estimate(
            &config,
            EstimateFlags {
                no_endogeneity_correction,
                no_sampling_correction,
                compare,
            },
        ),
        Command::Elasticity { config, result } => cmd_elasticity(&config, result.as_deref()),
        Command::Welfare { config, result } => cmd_welfare(&config, result.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(files) => {
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
