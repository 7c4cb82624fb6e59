//! Reproducible experiments on top of `ddp-irl`: a JSON config in, CSV and
//! JSON artifacts plus a hashed manifest out.

pub mod config;
pub mod experiments;
pub mod output;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{config_from_str, config_load, ExperimentConfig, ExperimentKind, SampleSpec};
pub use experiments::{output_dir, run_experiment, RunSummary, OUT_ENV};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

/// Status for check-mode threshold violations.
pub const EXIT_THRESHOLD: i32 = 4;

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

/// Loads the config at `path`, checks it matches `verb`, applies `opts` and
/// runs it.
pub fn run_verb(verb: ExperimentKind, path: &std::path::Path, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let mut cfg = config_load(path)?;
    if cfg.kind != verb {
        return Err(CliError::Config(format!("kind: config is `{}` but the verb is `{}`", cfg.kind.name(), verb.name())));
    }
    if let Some(s) = opts.seed {
        cfg.seeds = vec![s];
    }
    let dir = output_dir(&cfg, opts.out.as_deref());
    run_experiment(&cfg, &dir, opts.jobs.unwrap_or(0))
}
