use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bravo_cli::{
    cmd_lambda0, cmd_lowerbound, cmd_run, cmd_sweep, load_config, selftest, CliError, LowerBoundArgs,
};
use bravo_core::algorithms::Algorithm;

#[derive(Debug, Parser)]
#[command(name = "bravo-sim", version, about = "Byzantine-robust decentralized stochastic optimization simulator")]
struct Cli {
    /// Worker threads for per-agent updates.
    #[arg(long, global = true, env = "BRAVO_SIM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment; writes trace.csv and header.txt.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Run one experiment per value of a parameter; writes summary.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// batch_size, lambda, alpha, byzantine_count or algorithm.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Run the adversarial lower-bound instance.
    Lowerbound {
        #[arg(long, default_value_t = 3)]
        regular: usize,
        #[arg(long, default_value_t = 2)]
        byz_per_agent: usize,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 5)]
        dim: usize,
        #[arg(long, default_value = "bravo-saga")]
        algorithm: Algorithm,
        #[arg(long, default_value_t = 1000)]
        rounds: u64,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
    },
    /// Print λ₀ and σ̃_min for a config's instance.
    Lambda0 {
        #[arg(long)]
        config: PathBuf,
    },
    /// Unbiasedness oracle and lower-bound exactness check.
    Selftest,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, seed, force } => {
            let config = load_config(&config, seed)?;
            let output = cmd_run(&config, &out, cli.threads, force)?;
            println!("wrote {} rows to {}", output.trace.rows.len(), out.join("trace.csv").display());
        }
        Command::Sweep {
            config,
            out,
            param,
            values,
            seed,
            force,
        } => {
            let config = load_config(&config, seed)?;
            for row in cmd_sweep(&config, &param, &values, &out, cli.threads, force)? {
                println!(
                    "{param}={}: conv_err {:?} accuracy {:?}{}",
                    row.value,
                    row.conv_err,
                    row.accuracy,
                    if row.diverged { " (diverged)" } else { "" }
                );
            }
        }
        Command::Lowerbound {
            regular,
            byz_per_agent,
            lambda,
            dim,
            algorithm,
            rounds,
            samples,
            alpha,
        } => {
            let report = cmd_lowerbound(&LowerBoundArgs {
                regular,
                byz_per_agent,
                lambda,
                dim,
                algorithm,
                rounds,
                samples,
                alpha,
                seed: 0,
            })?;
            println!("{report}");
        }
        Command::Lambda0 { config } => {
            println!("{}", cmd_lambda0(&load_config(&config, None)?)?);
        }
        Command::Selftest => {
            for line in selftest()? {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
