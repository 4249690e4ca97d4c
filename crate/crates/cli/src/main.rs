use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fedone_cli::config::ConfigError;
use fedone_cli::sweep::{run_sweep_with, RunStatus, SweepError};
use fedone_cli::{exit, load_config};

/// Sweep the number of activated clients and measure queries-to-target.
#[derive(Debug, Parser)]
#[command(name = "fedone", version)]
struct Args {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,

    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Comma-separated K* values, e.g. "1,5,10".
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<usize>>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Round budget per run.
    #[arg(long)]
    budget: Option<usize>,
}

fn run(args: Args) -> Result<i32, SweepError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(sweep) = args.sweep {
        cfg.sweep = sweep;
    }
    if let Some(out) = args.out {
        cfg.output = out;
    }
    if let Some(budget) = args.budget {
        cfg.federation.rounds = budget;
    }
    cfg.validate()?;

    let out = run_sweep_with(&cfg, |row| {
        let result = match row.status {
            RunStatus::Reached => format!(
                "{} queries, {} rounds",
                row.queries_to_target.unwrap_or_default(),
                row.rounds_to_target.unwrap_or_default()
            ),
            RunStatus::BudgetExhausted => format!("not reached in {} rounds", row.rounds_run),
            RunStatus::Failed => format!("failed: {}", row.error.as_deref().unwrap_or("unknown")),
        };
        eprintln!("K*={:<4} rep={:<3} {result}", row.k_star, row.replication);
    })?;

    println!("{:>6} {:>8} {:>8} {:>12} {:>12} {:>12}", "K*", "reached", "dropped", "median", "mean", "std");
    for g in &out.summary.groups {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
        println!(
            "{:>6} {:>4}/{:<3} {:>8} {:>12} {:>12} {:>12}",
            g.k_star,
            g.reached,
            g.runs,
            g.dropped,
            fmt(g.median_queries),
            fmt(g.mean_queries),
            fmt(g.std_queries)
        );
    }
    eprintln!("wrote {} and {}", out.metrics_path.display(), out.summary_path.display());
    Ok(if out.failed_rows() > 0 { exit::ORACLE } else { exit::OK })
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match run(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SweepError::Config(ConfigError::Io { .. }) => exit::CONFIG,
                SweepError::Config(_) | SweepError::Setup(_) => exit::CONFIG,
                SweepError::Io(_) | SweepError::Csv(_) | SweepError::Json(_) => exit::IO,
            }
        }
    };
    ExitCode::from(code as u8)
}
