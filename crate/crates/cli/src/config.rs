//! Experiment configuration: a JSON document with defaults filled in.

use std::path::{Path, PathBuf};

use ddp_irl::benchmarks::{make_system, Overrides, System};
use ddp_irl::ddp::SolverConfig;
use ddp_irl::demo::check_samples;
use ddp_irl::irl_open::StepSchedule;
use ddp_irl::pipeline::{GradientFlavor, SolverChoice};
use ddp_irl::Dims;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Solve,
    GradCheck,
    IrlOpen,
    IrlClosed,
    IocRecover,
    RankSweep,
    NoiseEval,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Solve => "solve",
            ExperimentKind::GradCheck => "grad-check",
            ExperimentKind::IrlOpen => "irl-open",
            ExperimentKind::IrlClosed => "irl-closed",
            ExperimentKind::IocRecover => "ioc-recover",
            ExperimentKind::RankSweep => "rank-sweep",
            ExperimentKind::NoiseEval => "noise-eval",
        }
    }

    /// Kinds that draw noisy demonstrations and therefore need seeds.
    pub fn stochastic(self) -> bool {
        matches!(
            self,
            ExperimentKind::IrlOpen | ExperimentKind::IrlClosed | ExperimentKind::RankSweep | ExperimentKind::NoiseEval
        )
    }
}

/// Which stages of each demonstration enter the losses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SampleSpec {
    /// `0..=N`
    #[default]
    All,
    /// The first `⌈n_θ/n_u⌉` stages.
    Minimal,
    First(usize),
    Indices(Vec<usize>),
}

impl SampleSpec {
    pub fn resolve(&self, d: &Dims) -> Vec<usize> {
        match self {
            SampleSpec::All => (0..=d.horizon).collect(),
            SampleSpec::Minimal => (0..d.n_theta.div_ceil(d.n_u).min(d.horizon + 1)).collect(),
            SampleSpec::First(n) => (0..*n).collect(),
            SampleSpec::Indices(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub benchmark: String,
    #[serde(default)]
    pub overrides: Overrides,
    #[serde(default)]
    pub solver: SolverChoice,
    /// Flavours compared by `grad-check`; empty selects those matching the solver.
    #[serde(default)]
    pub gradients: Vec<GradientFlavor>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Multiplicative noise levels of the demonstrations.
    #[serde(default = "default_sigma")]
    pub noise_sigma: Vec<f64>,
    #[serde(default)]
    pub samples: SampleSpec,
    /// Demonstrations per run, from initial states spread around `x0`.
    #[serde(default = "one")]
    pub demos: usize,
    /// Parameter for `solve` and `grad-check`; `θ*` when absent.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    /// Initial guess of the learners; `θ*` offset by ±20 % when absent.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    /// Open-loop step size.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub schedule: StepSchedule,
    /// Halve open-loop steps that increase the loss.
    #[serde(default)]
    pub backtracking: bool,
    #[serde(default)]
    pub solver_config: SolverConfig,
    /// Sample counts for `rank-sweep`, window lengths for `ioc-recover`.
    #[serde(default)]
    pub lengths: Vec<usize>,
    /// Assumed barrier parameters for `ioc-recover`.
    #[serde(default = "default_mus")]
    pub mus: Vec<f64>,
    /// Barrier parameter the `ioc-recover` demonstrations are generated at.
    #[serde(default = "default_mu_demo")]
    pub mu_demo: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    /// Threshold for check mode; a violation exits with status 4.
    #[serde(default)]
    pub check: Option<f64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_sigma() -> Vec<f64> {
    vec![0.0]
}
fn one() -> usize {
    1
}
fn default_t_max() -> usize {
    50
}
fn default_eta() -> f64 {
    1e-2
}
fn default_mus() -> Vec<f64> {
    vec![1e-2, 1e-4, 1e-6]
}
fn default_mu_demo() -> f64 {
    1e-6
}
fn default_fd_step() -> f64 {
    1e-6
}

/// Parses a configuration, reporting the field path of the first error.
pub fn config_from_str(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.inner()))
    })
}

pub fn config_load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    config_from_str(&text)
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn system(&self) -> Result<System, CliError> {
        make_system(&self.benchmark, &self.overrides).map_err(|e| invalid("benchmark", e))
    }

    /// Checks everything that does not need a solve.
    pub fn validate(&self) -> Result<(), CliError> {
        let sys = self.system()?;
        let d = sys.problem.dims();
        if self.kind.stochastic() && self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.noise_sigma.is_empty() {
            return Err(invalid("noise_sigma", "at least one level is required"));
        }
        for (i, s) in self.noise_sigma.iter().enumerate() {
            if !(*s >= 0.0 && s.is_finite()) {
                return Err(invalid(&format!("noise_sigma[{i}]"), format!("must be finite and non-negative, got {s}")));
            }
        }
        for (name, v) in [("theta", &self.theta), ("theta0", &self.theta0)] {
            if let Some(v) = v {
                if v.len() != d.n_theta {
                    return Err(invalid(name, format!("expected {} entries, got {}", d.n_theta, v.len())));
                }
            }
        }
        if self.demos == 0 {
            return Err(invalid("demos", "must be at least 1"));
        }
        if !(self.eta > 0.0) {
            return Err(invalid("eta", format!("must be positive, got {}", self.eta)));
        }
        if !(self.fd_step > 0.0) {
            return Err(invalid("fd_step", format!("must be positive, got {}", self.fd_step)));
        }
        if !(self.mu_demo > 0.0) {
            return Err(invalid("mu_demo", format!("must be positive, got {}", self.mu_demo)));
        }
        for (i, m) in self.mus.iter().enumerate() {
            if !(*m > 0.0) {
                return Err(invalid(&format!("mus[{i}]"), format!("must be positive, got {m}")));
            }
        }
        if let Some(i) = self.lengths.iter().position(|&l| l == 0) {
            return Err(invalid(&format!("lengths[{i}]"), "must be at least 1"));
        }
        if let Some(c) = self.check {
            if !(c > 0.0) {
                return Err(invalid("check", format!("must be positive, got {c}")));
            }
        }
        check_samples(&self.samples.resolve(&d), d.horizon).map_err(|e| invalid("samples", e))?;
        let learner = matches!(
            self.kind,
            ExperimentKind::IrlClosed | ExperimentKind::RankSweep | ExperimentKind::NoiseEval
        );
        if learner && self.solver == SolverChoice::ActiveSet {
            return Err(invalid("solver", "closed-loop learning needs the interior-point or unconstrained solver"));
        }
        if self.kind == ExperimentKind::IocRecover && d.n_in + d.n_eq == 0 {
            return Err(invalid("benchmark", "ioc-recover needs a constrained, cost-linear benchmark"));
        }
        Ok(())
    }

    pub fn theta(&self, sys: &System) -> ddp_irl::Vector {
        self.theta.clone().map(ddp_irl::Vector::from_vec).unwrap_or_else(|| sys.spec.theta_star())
    }

    pub fn theta0(&self, sys: &System) -> ddp_irl::Vector {
        self.theta0
            .clone()
            .map(ddp_irl::Vector::from_vec)
            .unwrap_or_else(|| ddp_irl::benchmarks::alternating_offset(&sys.spec.theta_star(), 0.2))
    }

    /// Gradient flavours for `grad-check`.
    pub fn flavors(&self, constrained: bool) -> Vec<GradientFlavor> {
        if !self.gradients.is_empty() {
            return self.gradients.clone();
        }
        match self.solver {
            SolverChoice::Unconstrained => vec![GradientFlavor::Unconstrained, GradientFlavor::PdpOracle],
            SolverChoice::ActiveSet => vec![GradientFlavor::ActiveSet],
            SolverChoice::Ipddp if constrained => vec![
                GradientFlavor::Ip,
                GradientFlavor::Barrier,
                GradientFlavor::ActiveSet,
                GradientFlavor::PdpOracle,
            ],
            SolverChoice::Ipddp => vec![GradientFlavor::Ip, GradientFlavor::PdpOracle],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = config_from_str(r#"{"kind": "solve", "benchmark": "scalar_example"}"#).unwrap();
        assert_eq!(c.kind, ExperimentKind::Solve);
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.noise_sigma, vec![0.0]);
        assert_eq!(c.samples, SampleSpec::All);
        assert_eq!(c.solver, SolverChoice::Ipddp);
        assert_eq!(c.solver_config, SolverConfig::default());
        assert_eq!(c.mus, vec![1e-2, 1e-4, 1e-6]);
        c.validate().unwrap();
        let echoed = serde_json::to_value(&c).unwrap();
        assert_eq!(echoed["t_max"], 50);
    }

    #[test]
    fn malformed_json_is_a_config_error() {
        let e = config_from_str(r#"{"kind": "solve", "benchmark": }"#).unwrap_err();
        assert!(matches!(e, CliError::Config(ref m) if m.contains("line 1")), "{e}");
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let e = config_from_str(r#"{"kind": "solve", "benchmark": "cartpole", "solver_config": {"tool": 1}}"#)
            .unwrap_err();
        assert!(matches!(e, CliError::Config(ref m) if m.starts_with("solver_config")), "{e}");
    }

    #[test]
    fn validation_errors_name_the_field() {
        let base = r#"{"kind": "irl-closed", "benchmark": "scalar_example""#;
        let cases = [
            (r#", "noise_sigma": [0.1, -0.2]}"#, "noise_sigma[1]"),
            (r#", "seeds": []}"#, "seeds"),
            (r#", "theta0": [1.0, 2.0]}"#, "theta0"),
            (r#", "samples": {"indices": [0, 9]}}"#, "samples"),
            (r#", "solver": "active-set"}"#, "solver"),
            (r#", "overrides": {"horizon": 0}}"#, "benchmark"),
        ];
        for (tail, field) in cases {
            let c = config_from_str(&format!("{base}{tail}")).unwrap();
            let e = c.validate().unwrap_err();
            assert!(matches!(e, CliError::Config(ref m) if m.starts_with(field)), "{tail}: {e}");
        }
        let c = config_from_str(r#"{"kind": "solve", "benchmark": "pendulum"}"#).unwrap();
        assert!(matches!(c.validate(), Err(CliError::Config(m)) if m.contains("pendulum")));
    }

    #[test]
    fn sample_specs() {
        let d = Dims { n_x: 4, n_u: 2, n_theta: 7, n_in: 0, n_eq: 0, horizon: 10 };
        assert_eq!(SampleSpec::Minimal.resolve(&d), vec![0, 1, 2, 3]);
        assert_eq!(SampleSpec::All.resolve(&d).len(), 11);
        let s: SampleSpec = serde_json::from_str(r#"{"first": 3}"#).unwrap();
        assert_eq!(s.resolve(&d), vec![0, 1, 2]);
        let s: SampleSpec = serde_json::from_str(r#""minimal""#).unwrap();
        assert_eq!(s, SampleSpec::Minimal);
    }
}
