use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mildhjb::cli::{cmd_check, cmd_lambda, cmd_simulate, cmd_solve, RunOptions, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "mildhjb", version, about = "Mild solutions of HJB equations with unbounded control operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the HJB equation by Picard iteration
    Solve(Common),
    /// Tabulate the smoothing operator norm and fit its blow-up exponent
    Lambda(Common),
    /// Simulate policies and check that the value is dominated by their costs
    Simulate(Common),
    /// Run the invariant suite at reduced sizes
    Check(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides [output] dir)
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Base seed (overrides [solver] seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

fn main() {
    let cli = Cli::parse();
    let (run, common): (fn(&std::path::Path, &RunOptions) -> i32, Common) = match cli.command {
        Command::Solve(c) => (cmd_solve, c),
        Command::Lambda(c) => (cmd_lambda, c),
        Command::Simulate(c) => (cmd_simulate, c),
        Command::Check(c) => (cmd_check, c),
    };
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            std::process::exit(EXIT_CONFIG);
        }
    }
    let opts = RunOptions { out_dir: common.out_dir, seed: common.seed, quiet: common.quiet };
    std::process::exit(run(&common.config, &opts));
}
