//! One runner per experiment kind. Each writes its artifacts and returns
//! the check-mode violations it found.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ddp_irl::benchmarks::{parameter_residual, NoiseModel, System};
use ddp_irl::ddp::iteration_log_csv;
use ddp_irl::demo::{generate_closed_loop_demo, spread_initial_states, Demonstration};
use ddp_irl::gradient::TrajectoryGradient;
use ddp_irl::ioc::{build_recovery_system, generate_ioc_demo, rank_profile, recover_parameters, IocError};
use ddp_irl::irl_closed::{run_closed_loop, LmConfig};
use ddp_irl::irl_open::{run_open_loop, OpenLoopConfig};
use ddp_irl::pipeline::{fd_trajectory_gradient, gradient, mixed_error, solve, GradientFlavor, SolverChoice};
use ddp_irl::{Trajectory, Vector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentKind, SampleSpec};
use crate::output::{num, Artifacts, Csv, FileEntry};
use crate::CliError;

/// Default output root.
pub const OUT_ENV: &str = "DDP_IRL_OUT";

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub files: Vec<FileEntry>,
    /// Check-mode failures; non-empty means exit status 4.
    pub violations: Vec<String>,
}

/// `out`, then the config's `output`, then `$DDP_IRL_OUT/<kind>-<benchmark>`,
/// then `ddp-irl-out/<kind>-<benchmark>`.
pub fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    if let Some(o) = out {
        return o.to_path_buf();
    }
    if let Some(o) = &cfg.output {
        return o.clone();
    }
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("ddp-irl-out"));
    root.join(format!("{}-{}", cfg.kind.name(), cfg.benchmark))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    cli_version: &'static str,
    core_version: &'static str,
    kind: &'static str,
    config: &'a ExperimentConfig,
    config_sha256: String,
    seconds: f64,
    violations: &'a [String],
    files: &'a [FileEntry],
}

/// Validates `cfg`, runs it with at most `jobs` threads (0 = all cores) and
/// writes the artifacts plus `manifest.json` into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let mut art = Artifacts::create(dir)?;
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| CliError::Io(e.to_string()))?;
    let violations = pool.install(|| match cfg.kind {
        ExperimentKind::Solve => run_solve(cfg, &mut art),
        ExperimentKind::GradCheck => run_grad_check(cfg, &mut art),
        ExperimentKind::IrlOpen => run_learner(cfg, &mut art, Method::Open),
        ExperimentKind::IrlClosed => run_learner(cfg, &mut art, Method::Closed),
        ExperimentKind::IocRecover => run_ioc(cfg, &mut art),
        ExperimentKind::RankSweep => run_rank_sweep(cfg, &mut art),
        ExperimentKind::NoiseEval => run_noise_eval(cfg, &mut art),
    })?;
    let config_text = serde_json::to_string(cfg).map_err(|e| CliError::Io(e.to_string()))?;
    let files = art.files().to_vec();
    art.write_json(
        "manifest.json",
        &Manifest {
            tool: "ddp-irl",
            cli_version: env!("CARGO_PKG_VERSION"),
            core_version: ddp_irl::VERSION,
            kind: cfg.kind.name(),
            config: cfg,
            config_sha256: crate::output::sha256_hex(config_text.as_bytes()),
            seconds: started.elapsed().as_secs_f64(),
            violations: &violations,
            files: &files,
        },
    )?;
    Ok(RunSummary { dir: dir.to_path_buf(), files: art.files().to_vec(), violations })
}

fn solver_err(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Solver(format!("{context}: {e}"))
}

fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn trajectory_csv(t: &Trajectory) -> String {
    let (nx, nu) = (t.states[0].len(), t.controls.first().map_or(0, |u| u.len()));
    let mut header = vec!["k".to_string()];
    header.extend(indexed("x", nx));
    header.extend(indexed("u", nu));
    let mut csv = Csv::new(&header);
    for (k, x) in t.states.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(x.iter().map(|v| num(*v)));
        match t.controls.get(k) {
            Some(u) => row.extend(u.iter().map(|v| num(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), nu)),
        }
        csv.row(row);
    }
    csv.into_string()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SolveReport {
    benchmark: String,
    solver: SolverChoice,
    termination: ddp_irl::ddp::Termination,
    converged: bool,
    iterations: usize,
    cost: f64,
    merit: f64,
    mu: f64,
    seconds: f64,
}

fn run_solve(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Vec<String>, CliError> {
    let sys = cfg.system()?;
    let p = sys.problem.as_ref();
    let t = Instant::now();
    let s = solve(p, &cfg.theta(&sys), &sys.spec.x0(), cfg.solver, &cfg.solver_config, None)
        .map_err(|e| solver_err("solve", e))?;
    let seconds = t.elapsed().as_secs_f64();
    let r = &s.result;
    art.write("trajectory.csv", &trajectory_csv(&r.traj))?;
    art.write("iterations.csv", &iteration_log_csv(&r.log))?;
    art.write_json(
        "result.json",
        &SolveReport {
            benchmark: cfg.benchmark.clone(),
            solver: cfg.solver,
            termination: r.termination,
            converged: r.converged,
            iterations: r.iterations,
            cost: r.cost,
            merit: r.merit,
            mu: r.mu,
            seconds,
        },
    )?;
    let mut v = Vec::new();
    if let Some(c) = cfg.check {
        if !(r.merit < c) {
            v.push(format!("final merit {:e} is not below {c:e}", r.merit));
        }
    }
    Ok(v)
}

// ---------------------------------------------------------------------------

/// `max_k |a_k[:, j] − b_k[:, j]|` over states and controls.
fn column_diff(a: &TrajectoryGradient, b: &TrajectoryGradient, j: usize) -> f64 {
    a.dx.iter()
        .zip(&b.dx)
        .chain(a.du.iter().zip(&b.du))
        .map(|(x, y)| (x.column(j) - y.column(j)).amax())
        .fold(0.0, f64::max)
}

#[derive(Serialize)]
struct FlavorReport {
    flavor: GradientFlavor,
    max_abs_diff_oracle: Option<f64>,
    max_mixed_diff_fd: f64,
    seconds: f64,
}

fn run_grad_check(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Vec<String>, CliError> {
    let sys = cfg.system()?;
    let p = sys.problem.as_ref();
    let d = p.dims();
    let th = cfg.theta(&sys);
    let x0 = sys.spec.x0();
    let s = solve(p, &th, &x0, cfg.solver, &cfg.solver_config, None).map_err(|e| solver_err("solve", e))?;
    // The KKT oracle needs barrier multipliers, which the active-set solver
    // does not produce.
    let oracle = match cfg.solver {
        SolverChoice::ActiveSet => None,
        _ => Some(gradient(p, &s, &th, GradientFlavor::PdpOracle).map_err(|e| solver_err("pdp oracle", e))?),
    };
    let fd = fd_trajectory_gradient(p, &th, &x0, cfg.solver, &cfg.solver_config, cfg.fd_step)
        .map_err(|e| solver_err("finite differences", e))?;
    let mut csv = Csv::new(&["flavor", "component", "name", "max_abs_diff_oracle", "max_abs_diff_fd"]);
    let mut reports = Vec::new();
    let mut violations = Vec::new();
    for flavor in cfg.flavors(d.n_in + d.n_eq > 0) {
        let t = Instant::now();
        let g = gradient(p, &s, &th, flavor).map_err(|e| solver_err(&format!("{flavor:?} gradient"), e))?;
        let seconds = t.elapsed().as_secs_f64();
        let tag = serde_json::to_value(flavor).map_err(|e| CliError::Io(e.to_string()))?;
        let tag = tag.as_str().unwrap_or_default().to_string();
        let mut worst = 0.0f64;
        for j in 0..d.n_theta {
            let od = oracle.as_ref().map(|o| column_diff(&g, o, j));
            worst = worst.max(od.unwrap_or(0.0));
            csv.row(vec![
                tag.clone(),
                j.to_string(),
                sys.spec.theta_names[j].clone(),
                od.map(num).unwrap_or_default(),
                num(column_diff(&g, &fd, j)),
            ]);
        }
        let mixed = mixed_error(&g, &fd);
        if let Some(c) = cfg.check {
            match oracle {
                Some(_) if !(worst < c) => violations.push(format!("{tag}: oracle difference {worst:e} ≥ {c:e}")),
                None if !(mixed < c) => violations.push(format!("{tag}: finite-difference error {mixed:e} ≥ {c:e}")),
                _ => {}
            }
        }
        reports.push(FlavorReport { flavor, max_abs_diff_oracle: oracle.as_ref().map(|_| worst), max_mixed_diff_fd: mixed, seconds });
    }
    art.write("gradients.csv", &csv.into_string())?;
    art.write_json("result.json", &reports)?;
    Ok(violations)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    Open,
    Closed,
}

/// Demonstrations for one `(σ, seed)` run.
fn make_demos(cfg: &ExperimentConfig, sys: &System, sigma: f64, seed: u64, samples: &SampleSpec) -> Result<Vec<Demonstration>, CliError> {
    let p = sys.problem.as_ref();
    let noise = if sigma > 0.0 { NoiseModel::multiplicative(sigma) } else { NoiseModel::default() };
    spread_initial_states(&sys.spec.x0(), cfg.demos)
        .iter()
        .enumerate()
        .map(|(i, x0)| {
            generate_closed_loop_demo(
                p,
                &sys.spec.theta_star(),
                x0,
                &noise,
                seed.wrapping_add(1_000_003 * i as u64),
                samples.resolve(&p.dims()),
                cfg.solver,
                &cfg.solver_config,
            )
            .map_err(|e| solver_err("demonstration", e))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct LearnRun {
    method: Method,
    sigma: f64,
    seed: u64,
    iterations: usize,
    loss: f64,
    param_residual: f64,
    stop: String,
    theta: Vec<f64>,
    seconds: f64,
    #[serde(skip)]
    trace: String,
}

fn learn(cfg: &ExperimentConfig, method: Method, sigma: f64, seed: u64, samples: &SampleSpec) -> Result<LearnRun, CliError> {
    let sys = cfg.system()?;
    let p = sys.problem.as_ref();
    let ts = sys.spec.theta_star();
    let demos = make_demos(cfg, &sys, sigma, seed, samples)?;
    let (lo, hi) = sys.spec.bounds();
    let names = indexed("theta_", p.dims().n_theta);
    let t = Instant::now();
    let ctx = format!("{method:?} learner, sigma {sigma}, seed {seed}");
    let run = match method {
        Method::Open => {
            let mut oc = OpenLoopConfig::new(cfg.theta0(&sys), lo, hi, cfg.eta, cfg.t_max);
            oc.schedule = cfg.schedule;
            oc.backtracking = cfg.backtracking;
            oc.solver = cfg.solver;
            oc.solver_config = cfg.solver_config.clone();
            let tr = run_open_loop(p, &demos, &oc, Some(&ts)).map_err(|e| solver_err(&ctx, e))?;
            let mut header: Vec<String> = ["t", "loss", "grad_norm", "eta", "param_residual"].map(String::from).to_vec();
            header.extend(names);
            let mut csv = Csv::new(&header);
            for r in &tr.records {
                let mut row = vec![r.t.to_string(), num(r.loss), num(r.grad_norm), num(r.eta), num(r.param_residual.unwrap_or(f64::NAN))];
                row.extend(r.theta.iter().map(|v| num(*v)));
                csv.row(row);
            }
            let last = tr.records.last().expect("at least one record");
            LearnRun {
                method,
                sigma,
                seed,
                iterations: last.t,
                loss: last.loss,
                param_residual: last.param_residual.unwrap_or(f64::NAN),
                stop: if tr.stopped_on_gradient { "gradient-tolerance".into() } else { "iteration-limit".into() },
                theta: tr.theta,
                seconds: 0.0,
                trace: csv.into_string(),
            }
        }
        Method::Closed => {
            let mut lm = LmConfig::new(cfg.theta0(&sys), lo, hi, cfg.t_max);
            lm.solver = cfg.solver;
            lm.solver_config = cfg.solver_config.clone();
            let tr = run_closed_loop(p, &demos, &lm, Some(&ts)).map_err(|e| solver_err(&ctx, e))?;
            let mut header: Vec<String> =
                ["t", "loss_cl", "loss_ol", "eta", "step_norm", "rank", "max_qu", "rejections", "param_residual"]
                    .map(String::from)
                    .to_vec();
            header.extend(names);
            let mut csv = Csv::new(&header);
            for r in &tr.records {
                let mut row = vec![
                    r.t.to_string(),
                    num(r.loss_cl),
                    num(r.loss_ol),
                    num(r.eta),
                    num(r.step_norm),
                    r.rank.to_string(),
                    num(r.max_qu),
                    r.rejections.to_string(),
                    num(r.param_residual.unwrap_or(f64::NAN)),
                ];
                row.extend(r.theta.iter().map(|v| num(*v)));
                csv.row(row);
            }
            let last = tr.records.last().expect("at least one record");
            let stop = serde_json::to_value(tr.stop).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            LearnRun {
                method,
                sigma,
                seed,
                iterations: last.t,
                loss: last.loss_cl,
                param_residual: parameter_residual(&Vector::from_vec(tr.theta.clone()), &ts).unwrap_or(f64::NAN),
                stop,
                theta: tr.theta,
                seconds: 0.0,
                trace: csv.into_string(),
            }
        }
    };
    Ok(LearnRun { seconds: t.elapsed().as_secs_f64(), ..run })
}

fn tasks(cfg: &ExperimentConfig) -> Vec<(usize, f64, u64)> {
    cfg.noise_sigma
        .iter()
        .enumerate()
        .flat_map(|(i, &s)| cfg.seeds.iter().map(move |&seed| (i, s, seed)))
        .collect()
}

fn summary_csv(runs: &[LearnRun]) -> String {
    let mut csv = Csv::new(&["method", "sigma", "seed", "iterations", "loss", "param_residual", "stop"]);
    for r in runs {
        let m = if r.method == Method::Open { "open" } else { "closed" };
        csv.row(vec![
            m.into(),
            num(r.sigma),
            r.seed.to_string(),
            r.iterations.to_string(),
            num(r.loss),
            num(r.param_residual),
            r.stop.clone(),
        ]);
    }
    csv.into_string()
}

fn run_learner(cfg: &ExperimentConfig, art: &mut Artifacts, method: Method) -> Result<Vec<String>, CliError> {
    let runs: Vec<LearnRun> = tasks(cfg)
        .par_iter()
        .map(|&(_, sigma, seed)| learn(cfg, method, sigma, seed, &cfg.samples))
        .collect::<Result<_, _>>()?;
    for ((si, _, seed), r) in tasks(cfg).iter().zip(&runs) {
        art.write(&format!("trace_sigma{si}_seed{seed}.csv"), &r.trace)?;
    }
    art.write("summary.csv", &summary_csv(&runs))?;
    art.write_json("summary.json", &runs)?;
    let mut v = Vec::new();
    if let Some(c) = cfg.check {
        for r in &runs {
            if !(r.param_residual < c) {
                v.push(format!("sigma {} seed {}: parameter residual {:e} ≥ {c:e}", r.sigma, r.seed, r.param_residual));
            }
        }
    }
    Ok(v)
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SigmaSummary {
    sigma: f64,
    median_closed: f64,
    median_open: f64,
    closed_wins: usize,
    runs: usize,
}

fn run_noise_eval(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Vec<String>, CliError> {
    let jobs: Vec<(usize, f64, u64, Method)> =
        tasks(cfg).into_iter().flat_map(|(i, s, seed)| [Method::Closed, Method::Open].map(|m| (i, s, seed, m))).collect();
    let runs: Vec<LearnRun> = jobs
        .par_iter()
        .map(|&(_, sigma, seed, m)| learn(cfg, m, sigma, seed, &cfg.samples))
        .collect::<Result<_, _>>()?;
    art.write("noise_eval.csv", &summary_csv(&runs))?;
    let mut sums = Vec::new();
    for &sigma in &cfg.noise_sigma {
        let pick = |m: Method| -> Vec<f64> {
            runs.iter().filter(|r| r.sigma == sigma && r.method == m).map(|r| r.param_residual).collect()
        };
        let (mut c, mut o) = (pick(Method::Closed), pick(Method::Open));
        let closed_wins = c.iter().zip(&o).filter(|(a, b)| a < b).count();
        sums.push(SigmaSummary { sigma, median_closed: median(&mut c), median_open: median(&mut o), closed_wins, runs: c.len() });
    }
    art.write_json("summary.json", &sums)?;
    let mut v = Vec::new();
    if cfg.check.is_some() {
        for s in &sums {
            if !(s.median_closed < s.median_open) {
                v.push(format!("sigma {}: closed-loop median {:e} not below open-loop {:e}", s.sigma, s.median_closed, s.median_open));
            }
        }
    }
    Ok(v)
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SweepRow {
    sigma: f64,
    seed: u64,
    samples: usize,
    rank: usize,
    iterations: usize,
    loss_cl: f64,
    param_residual: f64,
}

#[derive(Serialize)]
struct SweepSummary {
    sigma: f64,
    seed: u64,
    n_theta: usize,
    /// Smallest sample count whose final Jacobian has full column rank.
    first_full_rank: Option<usize>,
}

fn run_rank_sweep(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Vec<String>, CliError> {
    let sys = cfg.system()?;
    let d = sys.problem.dims();
    let lengths: Vec<usize> = if cfg.lengths.is_empty() { (1..=d.horizon + 1).collect() } else { cfg.lengths.clone() };
    if let Some(&l) = lengths.iter().find(|&&l| l > d.horizon + 1) {
        return Err(CliError::Config(format!("lengths: {l} exceeds the {} stages available", d.horizon + 1)));
    }
    let jobs: Vec<(f64, u64, usize)> =
        tasks(cfg).into_iter().flat_map(|(_, s, seed)| lengths.iter().map(move |&l| (s, seed, l))).collect();
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(sigma, seed, n)| -> Result<SweepRow, CliError> {
            let sys = cfg.system()?;
            let p = sys.problem.as_ref();
            let ts = sys.spec.theta_star();
            let demos = make_demos(cfg, &sys, sigma, seed, &SampleSpec::First(n))?;
            let (lo, hi) = sys.spec.bounds();
            let mut lm = LmConfig::new(cfg.theta0(&sys), lo, hi, cfg.t_max);
            lm.solver = cfg.solver;
            lm.solver_config = cfg.solver_config.clone();
            let tr = run_closed_loop(p, &demos, &lm, Some(&ts))
                .map_err(|e| solver_err(&format!("sweep |S| = {n}, seed {seed}"), e))?;
            let last = tr.records.last().expect("at least one record");
            Ok(SweepRow {
                sigma,
                seed,
                samples: n,
                rank: last.rank,
                iterations: last.t,
                loss_cl: last.loss_cl,
                param_residual: parameter_residual(&Vector::from_vec(tr.theta), &ts).unwrap_or(f64::NAN),
            })
        })
        .collect::<Result<_, _>>()?;
    let mut csv = Csv::new(&["sigma", "seed", "samples", "rank", "iterations", "loss_cl", "param_residual"]);
    for r in &rows {
        csv.row(vec![
            num(r.sigma),
            r.seed.to_string(),
            r.samples.to_string(),
            r.rank.to_string(),
            r.iterations.to_string(),
            num(r.loss_cl),
            num(r.param_residual),
        ]);
    }
    art.write("rank_sweep.csv", &csv.into_string())?;
    let mut sums = Vec::new();
    let mut v = Vec::new();
    for (_, sigma, seed) in tasks(cfg) {
        let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.sigma == sigma && r.seed == seed).collect();
        let first = mine.iter().filter(|r| r.rank == d.n_theta).map(|r| r.samples).min();
        if let (Some(c), Some(f)) = (cfg.check, first) {
            for r in mine.iter().filter(|r| r.samples >= f && !(r.param_residual < c)) {
                v.push(format!("sigma {sigma} seed {seed} |S| {}: residual {:e} ≥ {c:e}", r.samples, r.param_residual));
            }
        }
        sums.push(SweepSummary { sigma, seed, n_theta: d.n_theta, first_full_rank: first });
    }
    art.write_json("summary.json", &serde_json::json!({ "rows": rows, "summary": sums }))?;
    Ok(v)
}

// ---------------------------------------------------------------------------

fn ioc_err(context: &str, e: IocError) -> CliError {
    match e {
        IocError::NotCostLinear(_) | IocError::Dimension(_) | IocError::TooShort { .. } | IocError::BadMu(_) => {
            CliError::Config(format!("{context}: {e}"))
        }
        other => solver_err(context, other),
    }
}

#[derive(Serialize)]
struct IocReport {
    demo: usize,
    x0: Vec<f64>,
    mu: f64,
    length: usize,
    theta_star: Vec<f64>,
    param_residual: f64,
    recovery: ddp_irl::ioc::Recovery,
}

fn run_ioc(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Vec<String>, CliError> {
    let sys = cfg.system()?;
    let p = sys.problem.as_ref();
    let ts = sys.spec.theta_star();
    let n = p.dims().horizon;
    let lengths: Vec<usize> = if cfg.lengths.is_empty() { (1..=n).collect() } else { cfg.lengths.clone() };
    let full = *lengths.iter().max().expect("nonempty lengths");
    let mut csv = Csv::new(&["demo", "length", "mu", "rank", "param_residual"]);
    let mut reports = Vec::new();
    let mut v = Vec::new();
    for (i, x0) in spread_initial_states(&sys.spec.x0(), cfg.demos).iter().enumerate() {
        let demo = generate_ioc_demo(p, &ts, x0, cfg.mu_demo, &cfg.solver_config).map_err(|e| ioc_err("demonstration", e))?;
        for row in rank_profile(p, &demo, &lengths, &cfg.mus, &ts).map_err(|e| ioc_err("rank profile", e))? {
            csv.row(vec![i.to_string(), row.length.to_string(), num(row.mu), row.rank.to_string(), num(row.residual)]);
        }
        for &mu in &cfg.mus {
            let rs = build_recovery_system(p, &demo, mu, full).map_err(|e| ioc_err("recovery system", e))?;
            let rec = recover_parameters(&rs).map_err(|e| ioc_err("recovery", e))?;
            let res = parameter_residual(&Vector::from_vec(rec.theta_hat.clone()), &ts).unwrap_or(f64::NAN);
            if let Some(c) = cfg.check {
                if mu == cfg.mu_demo && !(res < c) {
                    v.push(format!("demo {i}: residual {res:e} ≥ {c:e} at the demonstration barrier"));
                }
            }
            reports.push(IocReport {
                demo: i,
                x0: x0.iter().copied().collect(),
                mu,
                length: full,
                theta_star: ts.iter().copied().collect(),
                param_residual: res,
                recovery: rec,
            });
        }
    }
    art.write("profile.csv", &csv.into_string())?;
    art.write_json("recovery.json", &reports)?;
    Ok(v)
}
