use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eit_cli::commands::{cmd_forward, cmd_invert, cmd_mesh, cmd_study};
use eit_cli::config::RunConfig;
use eit_cli::verify::{cmd_verify, Level};
use eit_cli::{exit_code, EXIT_VERIFICATION};
use eit_core::Result;

#[derive(Parser)]
#[command(name = "eit", version, about = "Regularized EIT reconstruction with the complete electrode model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory of the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Refine the domain and report mesh quality per level.
    Mesh(RunArgs),
    /// Compute full and simplified resistance matrices for the phantom.
    Forward(RunArgs),
    /// Reconstruct the phantom from simulated noisy data.
    Invert(RunArgs),
    /// Sweep the noise level with the configured parameter schedule.
    Study(RunArgs),
    /// Run the invariant suites.
    Verify {
        #[arg(long, default_value = "quick", value_parser = ["quick", "full"])]
        level: String,
    },
}

fn load(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = |args: &RunArgs, f: fn(&RunConfig) -> Result<String>| load(args).and_then(|cfg| f(&cfg));
    let result = match &cli.command {
        Command::Mesh(a) => run(a, cmd_mesh),
        Command::Forward(a) => run(a, cmd_forward),
        Command::Invert(a) => run(a, cmd_invert),
        Command::Study(a) => run(a, cmd_study),
        Command::Verify { level } => {
            let report = cmd_verify(level.parse::<Level>().expect("validated by clap"));
            print!("{report}");
            return ExitCode::from(if report.passed() { 0 } else { EXIT_VERIFICATION as u8 });
        }
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
