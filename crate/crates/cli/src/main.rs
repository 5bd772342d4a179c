use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dshoot_cli::run::{self, CheckKind};

#[derive(Parser)]
#[command(name = "dshoot", version, about = "Direct-shooting optimal control by parameter evolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one or more configurations.
    Solve {
        /// JSON run configuration; repeat for a batch.
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        /// Output directory (one subdirectory per config in a batch).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of configurations solved concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare analytic gradients and projections against their oracles at
    /// the initial point of a configuration.
    Check {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = CheckKind::All)]
        what: CheckKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in problems and their parameterization cases.
    ListProblems,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match Cli::parse().command {
        Command::Solve { configs, out, jobs } => run::solve_batch(&configs, out.as_deref(), jobs),
        Command::Check { config, what, out } => run::check(&config, what, out.as_deref()),
        Command::ListProblems => {
            for name in dshoot::problems::NAMES {
                let b = dshoot::problems::by_name(name).expect("built-in problem");
                let cases: Vec<String> = b
                    .parameterizations
                    .iter()
                    .map(|np| format!("{} ({:?}, {:?}, s = {})", np.name, np.par.kind(), np.par.form(), np.par.param_count()))
                    .collect();
                let dims = b.problem.dims();
                println!("{name}: n = {}, m = {}, q = {}; cases: {}", dims.n, dims.m, dims.q, cases.join("; "));
            }
            run::EXIT_OK
        }
    };
    ExitCode::from(code as u8)
}
