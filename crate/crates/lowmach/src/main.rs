//! Command-line front end. All real work lives in [`lowmach::driver`]; this
//! file only parses arguments and maps errors to exit codes: 2 for usage
//! problems (clap's default), 1 for runtime failures.

use std::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lowmach::driver::{self, SampleSpec};

#[derive(Parser)]
#[command(name = "lowmach", version, about = "Low-Mach reactive flow solver on structured meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a case to its end time, writing VTK snapshots and diagnostics
    Run {
        /// Case file; mechanism, weights, and output paths resolve against
        /// its directory
        case: PathBuf,
    },
    /// Time a few steps of a case and print the per-stage cost split
    Bench {
        case: PathBuf,
        /// Number of steps to time
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Integrate randomized reactor states and write a training table
    SampleChemistry {
        mechanism: PathBuf,
        /// Number of samples
        #[arg(long, default_value_t = 1024)]
        n: usize,
        /// Integration window per sample in seconds
        #[arg(long)]
        dt: f64,
        /// Lower bound of the sampled temperature range in K
        #[arg(long, default_value_t = 300.0)]
        t_min: f64,
        /// Upper bound of the sampled temperature range in K
        #[arg(long, default_value_t = 1500.0)]
        t_max: f64,
        /// Lower bound of the sampled pressure range in Pa; when it equals
        /// p-max all samples share that pressure
        #[arg(long, default_value_t = 101325.0)]
        p_min: f64,
        /// Upper bound of the sampled pressure range in Pa
        #[arg(long, default_value_t = 101325.0)]
        p_max: f64,
        /// RNG seed; reruns with the same seed are byte-identical
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output table path
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train per-species rate networks from a sample table
    TrainSurrogate {
        samples: PathBuf,
        /// Hidden layer widths
        #[arg(long, value_delimiter = ',', default_values_t = [32usize, 16, 8])]
        arch: Vec<usize>,
        #[arg(long, default_value_t = 2000)]
        epochs: usize,
        /// Init and shuffle seed; reruns with the same seed are byte-identical
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.02)]
        learning_rate: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Output weights path
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Validate a case (.cfg), mechanism (.mech), or weights file and print
    /// a summary
    Info { path: PathBuf },
}

fn dispatch(command: Command) -> Result<(), driver::DriverError> {
    match command {
        Command::Run { case } => {
            driver::cmd_run(&case)?;
        }
        Command::Bench { case, steps } => {
            driver::cmd_bench(&case, steps)?;
        }
        Command::SampleChemistry { mechanism, n, dt, t_min, t_max, p_min, p_max, seed, output } => {
            let spec = SampleSpec { n, dt, t_min, t_max, p_min, p_max, seed };
            driver::cmd_sample(&mechanism, &spec, &output)?;
        }
        Command::TrainSurrogate { samples, arch, epochs, seed, learning_rate, batch, output } => {
            driver::cmd_train(&samples, &arch, epochs, seed, learning_rate, batch, &output)?;
        }
        Command::Info { path } => {
            print!("{}", driver::cmd_info(&path)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = err.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
