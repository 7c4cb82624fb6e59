use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddp_irl_cli::{run_verb, ExperimentKind, RunOptions, EXIT_THRESHOLD};

#[derive(Parser)]
#[command(name = "ddp-irl", version, about = "Constrained DDP and inverse RL experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to $DDP_IRL_OUT/<kind>-<benchmark>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum number of parallel runs (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Verb {
    /// Solve one trajectory optimisation problem.
    Solve(Common),
    /// Compare trajectory gradients against the KKT oracle and finite differences.
    GradCheck(Common),
    /// Open-loop IRL by projected gradient descent.
    IrlOpen(Common),
    /// Closed-loop IRL by Levenberg–Marquardt.
    IrlClosed(Common),
    /// Linear recovery for constrained cost-linear problems.
    IocRecover(Common),
    /// Closed-loop IRL over growing sample sets.
    RankSweep(Common),
    /// Open- versus closed-loop IRL over noise levels and seeds.
    NoiseEval(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, c) = match cli.verb {
        Verb::Solve(c) => (ExperimentKind::Solve, c),
        Verb::GradCheck(c) => (ExperimentKind::GradCheck, c),
        Verb::IrlOpen(c) => (ExperimentKind::IrlOpen, c),
        Verb::IrlClosed(c) => (ExperimentKind::IrlClosed, c),
        Verb::IocRecover(c) => (ExperimentKind::IocRecover, c),
        Verb::RankSweep(c) => (ExperimentKind::RankSweep, c),
        Verb::NoiseEval(c) => (ExperimentKind::NoiseEval, c),
    };
    let opts = RunOptions { out: c.out, seed: c.seed, jobs: c.jobs };
    match run_verb(kind, &c.config, &opts) {
        Ok(s) => {
            println!("wrote {} files to {}", s.files.len(), s.dir.display());
            if s.violations.is_empty() {
                ExitCode::SUCCESS
            } else {
                for v in &s.violations {
                    eprintln!("check failed: {v}");
                }
                ExitCode::from(EXIT_THRESHOLD as u8)
            }
        }
        Err(e) => {
            eprintln!("ddp-irl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
