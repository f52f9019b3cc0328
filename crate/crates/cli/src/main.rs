use std::path::PathBuf;

use clap::{Parser, Subcommand};
use conehjb_cli::commands::{bench_cmd, refine_cmd, simulate_cmd, solve_cmd, verify_cmd};
use conehjb_cli::{config, CliError, Context};

#[derive(Parser)]
#[command(name = "conehjb", version, about = "Consumption-investment with transaction costs and jumps")]
struct Cli {
    /// Experiment config (JSON); a diagnostics.json from `solve` also works.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "CONEHJB_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "warn", value_parser = ["error", "warn", "info", "debug", "trace", "off"])]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the HJB equation on the config grid.
    Solve {
        /// Also run the grid-halving study.
        #[arg(long)]
        refine: bool,
        /// Field file, relative to the output directory.
        #[arg(long)]
        out: Option<String>,
    },
    /// Monte Carlo evaluation of a policy.
    Simulate {
        /// zero | merton | grid | grid:FILE
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        paths: Option<usize>,
        /// Results file, relative to the output directory.
        #[arg(long)]
        out: Option<String>,
    },
    /// Compute and verify a Lyapunov certificate.
    Verify {
        /// Comma-separated direction, e.g. 1,1.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        p: Option<Vec<f64>>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Grid-halving convergence study.
    Refine,
    /// Time the main stages.
    Bench,
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let path = cli.config.ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut cfg = config::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set thread count: {e}")))?;
    }
    let ctx = Context { cfg, out_dir: cli.out_dir };
    match cli.command {
        Command::Solve { refine, out } => solve_cmd(&ctx, refine, out.as_deref()),
        Command::Simulate { policy, paths, out } => simulate_cmd(&ctx, policy.as_deref(), paths, out.as_deref()),
        Command::Verify { p, rho, out } => verify_cmd(&ctx, p, rho, out.as_deref()),
        Command::Refine => refine_cmd(&ctx),
        Command::Bench => bench_cmd(&ctx),
    }
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    match run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("{}", e.to_json());
            std::process::exit(e.exit_code());
        }
    }
}
