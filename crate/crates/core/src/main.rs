use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use etadapt::cli::{cmd_compare, cmd_run, cmd_verify, Common};

#[derive(Parser)]
#[command(
    name = "etadapt",
    version,
    about = "Adaptive event-triggered backstepping simulator"
)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Keep every K-th step in trace.csv (overrides the config).
    #[arg(long, global = true)]
    decimate: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one controller.
    Run { config: PathBuf },
    /// Simulate the proposed, baseline and controller1 schemes side by side.
    Compare { config: PathBuf },
    /// Run the randomized invariant suites.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Flip the sign of kappa to check that the suites notice.
        #[arg(long, hide = true)]
        mutate_kappa: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let common = Common {
        out: cli.out,
        decimate: cli.decimate,
    };
    let code = match cli.command {
        Command::Run { config } => cmd_run(&config, &common),
        Command::Compare { config } => cmd_compare(&config, &common),
        Command::Verify { seed, mutate_kappa } => cmd_verify(seed, mutate_kappa),
    };
    ExitCode::from(code as u8)
}
