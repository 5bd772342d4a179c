//! Solve and check drivers with their exit codes.

use std::path::{Path, PathBuf};

use dshoot::costate::costate_ode_residual;
use dshoot::prelude::*;
use dshoot::problems::example1_analytic_report;
use dshoot::projection::{projection_invariants, stationarity_functions, theorem3_check};
use dshoot::sensitivity::{build_bundle, gradient_check};
use serde::Serialize;

use crate::config::{ConfigError, ResolvedRun, RunConfig};
use crate::output::{self, write_json, AnalyticErrors, Report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;
pub const EXIT_CHECK_FAILED: i32 = 5;

/// Relative tolerance of the gradient oracle.
pub const GRADIENT_TOL: f64 = 1e-3;
/// Tolerance of the projection invariants.
pub const PROJECTION_TOL: f64 = 1e-8;

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Solver(String),
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Solver(_) | RunError::Io(_) => EXIT_SOLVER,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "configuration error: {m}"),
            RunError::Solver(m) => write!(f, "solver error: {m}"),
            RunError::Io(m) => write!(f, "output error: {m}"),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e.to_string())
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => RunError::Config(m),
            other => RunError::Solver(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |e| RunError::Io(format!("{}: {e}", path.display()))
}

/// Output directory: the command line wins over the config, which wins over
/// `out/<config stem>`.
pub fn out_dir_for(config_path: &Path, cfg: &RunConfig, cli_out: Option<&Path>, batch: bool) -> PathBuf {
    let stem = config_path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    match (cli_out, &cfg.out_dir) {
        (Some(dir), _) if batch => dir.join(stem),
        (Some(dir), _) => dir.to_path_buf(),
        (None, Some(dir)) => dir.clone(),
        (None, None) => PathBuf::from("out").join(stem),
    }
}

fn load(config_path: &Path, cli_out: Option<&Path>, batch: bool) -> Result<(ResolvedRun, PathBuf), RunError> {
    let cfg = RunConfig::load(config_path)?;
    let run = cfg.resolve()?;
    let dir = out_dir_for(config_path, &cfg, cli_out, batch);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok((run, dir))
}

/// Runs one solve and writes `trace.csv`, `trajectory.csv`, `costates.csv`
/// and `report.json`. Returns the exit code.
pub fn solve(config_path: &Path, cli_out: Option<&Path>, batch: bool) -> i32 {
    match solve_inner(config_path, cli_out, batch) {
        Ok((code, dir)) => {
            log::info!("{}: results in {}", config_path.display(), dir.display());
            code
        }
        Err(e) => {
            eprintln!("{}: {e}", config_path.display());
            e.exit_code()
        }
    }
}

fn solve_inner(config_path: &Path, cli_out: Option<&Path>, batch: bool) -> Result<(i32, PathBuf), RunError> {
    let (run, dir) = load(config_path, cli_out, batch)?;
    let b = &run.builtin;
    let out = solve_evolution(run.mode, &b.problem, &run.par, &run.gains, &run.init, &run.stop, &run.settings)?;
    let costate = reconstruct_costate(&b.problem, &out.bundle, &out.report.pi_final)?;

    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(io_err(&path))
    };
    write("trace.csv", output::trace_csv(&out.trace))?;
    write("trajectory.csv", output::trajectory_csv(&run.par, &out.bundle)?)?;
    write("costates.csv", output::costates_csv(&out.bundle, &costate)?)?;

    let mut report = Report::new(b.name, run.mode_name.as_str(), &run.par_label, &out.report);
    // interval midpoints keep the samples off the breakpoints of local bases
    let times: Vec<f64> = (0..100)
        .map(|k| b.problem.t0 + (out.bundle.tf - b.problem.t0) * (k as f64 + 0.5) / 100.0)
        .collect();
    report.costate_ode_residual = Some(costate_ode_residual(&b.problem, &run.par, &out.bundle, &costate, &times)?);
    if b.example1_oracle.is_some() {
        let errs = example1_analytic_report(
            &run.par,
            &out.report.p_final,
            &out.bundle.x_traj,
            Some(&costate.lam_traj),
            &out.report.pi_final,
            out.report.j_final,
        )?;
        report.analytic_errors = Some(AnalyticErrors::from(&errs));
    }
    let path = dir.join("report.json");
    write_json(&path, &report).map_err(io_err(&path))?;
    if out.report.converged {
        Ok((EXIT_OK, dir))
    } else {
        eprintln!(
            "{}: not converged by tau = {} (residual {:.3e}, |g| {:.3e})",
            config_path.display(),
            out.report.tau_reached,
            out.report.residual_norm,
            out.report.g_norm
        );
        Ok((EXIT_NOT_CONVERGED, dir))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum CheckKind {
    Gradients,
    Projection,
    All,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientReport {
    pub f_rel_err: f64,
    pub g_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProjectionReport {
    pub idempotence: f64,
    pub orthogonality: f64,
    pub pythagoras: f64,
    /// Distance between the projection coordinates and `M_p⁻¹(r_1p + Γ_1p π)`.
    pub coordinate_mismatch: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Contents of `checks.json`.
#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub problem: String,
    pub parameterization: String,
    pub p: Vec<f64>,
    pub tf: f64,
    pub gradients: Option<GradientReport>,
    pub projection: Option<ProjectionReport>,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Runs the oracle checks at the initial point of the config and writes
/// `checks.json`. Returns the exit code.
pub fn check(config_path: &Path, what: CheckKind, cli_out: Option<&Path>) -> i32 {
    match check_inner(config_path, what, cli_out) {
        Ok(report) => {
            for f in &report.failures {
                eprintln!("{}: check failed: {f}", config_path.display());
            }
            if report.passed {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            eprintln!("{}: {e}", config_path.display());
            e.exit_code()
        }
    }
}

pub fn check_inner(config_path: &Path, what: CheckKind, cli_out: Option<&Path>) -> Result<CheckReport, RunError> {
    let (run, dir) = load(config_path, cli_out, false)?;
    let b = &run.builtin;
    let (p, tf) = (&run.init.p, run.init.tf);
    let mut failures = Vec::new();

    let gradients = if matches!(what, CheckKind::Gradients | CheckKind::All) {
        let gc = gradient_check(&b.problem, &run.par, &run.gains, p, tf, 1e-5, &OdeSettings::new(1e-12, 1e-14), 2001)?;
        let passed = gc.f_rel_err <= GRADIENT_TOL && gc.g_rel_err <= GRADIENT_TOL;
        if !passed {
            failures.push(format!(
                "gradients: relative error f_theta {:.3e}, g_theta {:.3e} (tolerance {GRADIENT_TOL:.0e})",
                gc.f_rel_err, gc.g_rel_err
            ));
        }
        Some(GradientReport {
            f_rel_err: gc.f_rel_err,
            g_rel_err: gc.g_rel_err,
            tolerance: GRADIENT_TOL,
            passed,
        })
    } else {
        None
    };

    let projection = if matches!(what, CheckKind::Projection | CheckKind::All) {
        // a suite that cannot even be evaluated counts as a failed check
        match projection_suite(&run) {
            Ok(rep) => {
                if !rep.passed {
                    failures.push(format!(
                        "projection: idempotence {:.3e}, orthogonality {:.3e}, pythagoras {:.3e}, coordinates {:.3e} (tolerance {PROJECTION_TOL:.0e})",
                        rep.idempotence, rep.orthogonality, rep.pythagoras, rep.coordinate_mismatch
                    ));
                }
                Some(rep)
            }
            Err(RunError::Config(m)) => return Err(RunError::Config(m)),
            Err(e) => {
                failures.push(format!("projection: {e}"));
                None
            }
        }
    } else {
        None
    };

    let report = CheckReport {
        problem: b.name.into(),
        parameterization: run.par_label.clone(),
        p: p.as_slice().to_vec(),
        tf,
        gradients,
        projection,
        passed: failures.is_empty(),
        failures,
    };
    let path = dir.join("checks.json");
    write_json(&path, &report).map_err(io_err(&path))?;
    Ok(report)
}

fn projection_suite(run: &ResolvedRun) -> Result<ProjectionReport, RunError> {
    let b = &run.builtin;
    let ev = evolution_rhs(EvolutionMode::Form1, &b.problem, &run.par, &run.gains, &run.init, &run.settings)
        .or_else(|_| {
            // node-based bases with free t_f only evolve in Form 2; the
            // projection itself is independent of the mode
            evolution_rhs(run.mode, &b.problem, &run.par, &run.gains, &run.init, &run.settings)
        })?;
    let bundle = build_bundle(&b.problem, &run.par, &run.init.p, run.init.tf, &run.settings.ode_inner)?;
    let q = run.settings.quad_nodes;
    let (ip, basis, stat) = stationarity_functions(&b.problem, &run.par, &bundle, &run.gains, &ev.pi, q)?;
    let inv = projection_invariants(&ip, &basis, &stat)?;
    let t3 = theorem3_check(&b.problem, &run.par, &bundle, &run.gains, &ev.pi, q)?;
    let f1 = &ev.form1;
    let expected = f1
        .m_p
        .clone()
        .cholesky()
        .ok_or(Error::Rank { what: "M_p" })?
        .solve(&(&f1.r_1p + &f1.gamma_1p * &ev.pi));
    let coordinate_mismatch = (&t3.coords - &expected).amax() / expected.amax().max(1.0);
    Ok(ProjectionReport {
        idempotence: inv.idempotence,
        orthogonality: inv.orthogonality,
        pythagoras: inv.pythagoras,
        coordinate_mismatch,
        tolerance: PROJECTION_TOL,
        passed: inv.worst().max(coordinate_mismatch) <= PROJECTION_TOL,
    })
}

/// Runs `configs` on up to `jobs` threads; the exit code is the largest one.
pub fn solve_batch(configs: &[PathBuf], cli_out: Option<&Path>, jobs: usize) -> i32 {
    let batch = configs.len() > 1;
    let next = std::sync::atomic::AtomicUsize::new(0);
    let codes = std::sync::Mutex::new(vec![EXIT_OK; configs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, configs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(cfg) = configs.get(i) else { break };
                let code = solve(cfg, cli_out, batch);
                codes.lock().unwrap()[i] = code;
            });
        }
    });
    codes.into_inner().unwrap().into_iter().max().unwrap_or(EXIT_OK)
}
