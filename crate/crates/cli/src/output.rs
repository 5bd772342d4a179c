//! Plot-ready CSV files and JSON reports.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use dshoot::prelude::*;
use dshoot::problems::Example1Errors;
use nalgebra::DVector;
use serde::Serialize;

/// 17 significant digits, enough to round-trip every `f64`.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_row(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let row: Vec<String> = values.into_iter().map(num).collect();
    out.push_str(&row.join(","));
    out.push('\n');
}

fn header(out: &mut String, cols: impl IntoIterator<Item = String>) {
    out.push_str(&cols.into_iter().collect::<Vec<_>>().join(","));
    out.push('\n');
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}_{i}"))
}

/// Columns `tau, p_0…, t_f, pi_0…, J, g_norm, residual_norm, V`.
pub fn trace_csv(trace: &SolveTrace) -> String {
    let mut out = String::new();
    let (s, q) = trace.rows.first().map_or((0, 0), |r| (r.p.len(), r.pi.len()));
    header(
        &mut out,
        std::iter::once("tau".to_string())
            .chain(indexed("p", s))
            .chain(["t_f".to_string()])
            .chain(indexed("pi", q))
            .chain(["J", "g_norm", "residual_norm", "V"].map(String::from)),
    );
    for r in &trace.rows {
        push_row(
            &mut out,
            std::iter::once(r.tau)
                .chain(r.p.iter().copied())
                .chain([r.tf])
                .chain(r.pi.iter().copied())
                .chain([r.j, r.g_norm, r.residual_norm, r.v]),
        );
    }
    out
}

/// Inverse of [`trace_csv`].
pub fn parse_trace_csv(text: &str) -> Result<SolveTrace, String> {
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().ok_or("empty trace")?.split(',').collect();
    let s = head.iter().filter(|c| c.starts_with("p_")).count();
    let q = head.iter().filter(|c| c.starts_with("pi_")).count();
    if head.len() != s + q + 6 {
        return Err(format!("unexpected header {head:?}"));
    }
    let mut trace = SolveTrace::default();
    for (k, line) in lines.enumerate() {
        let v: Vec<f64> = line
            .split(',')
            .map(|x| x.parse::<f64>().map_err(|e| format!("row {k}: {e}")))
            .collect::<Result<_, _>>()?;
        if v.len() != head.len() {
            return Err(format!("row {k} has {} columns, expected {}", v.len(), head.len()));
        }
        trace.rows.push(TraceRow {
            tau: v[0],
            p: DVector::from_column_slice(&v[1..1 + s]),
            tf: v[1 + s],
            pi: DVector::from_column_slice(&v[2 + s..2 + s + q]),
            j: v[2 + s + q],
            g_norm: v[3 + s + q],
            residual_norm: v[4 + s + q],
            v: v[5 + s + q],
        });
    }
    Ok(trace)
}

/// Points per uniform output grid of the trajectory files.
pub const OUTPUT_POINTS: usize = 201;

/// Integrator knots merged with a uniform grid, so that smooth solutions
/// integrated in a few large steps still plot well.
pub fn output_times(bundle: &AdjointBundle) -> Vec<f64> {
    let (t0, tf) = (bundle.x_traj.t_first(), bundle.x_traj.t_last());
    let mut times: Vec<f64> = (0..OUTPUT_POINTS)
        .map(|k| t0 + (tf - t0) * k as f64 / (OUTPUT_POINTS - 1) as f64)
        .chain(bundle.x_traj.t_grid().iter().copied())
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (tf - t0));
    times
}

/// Columns `t, x_0…, u_0…` on [`output_times`].
pub fn trajectory_csv(par: &Parameterization, bundle: &AdjointBundle) -> Result<String> {
    let mut out = String::new();
    let n = bundle.x_traj.dim();
    header(
        &mut out,
        std::iter::once("t".to_string()).chain(indexed("x", n)).chain(indexed("u", par.control_dim())),
    );
    for t in output_times(bundle) {
        let x = bundle.x_traj.eval(t)?;
        let u = par.eval_control(&bundle.p, bundle.tf, t)?;
        push_row(&mut out, std::iter::once(t).chain(x.iter().copied()).chain(u.iter().copied()));
    }
    Ok(out)
}

/// Columns `t, lambda_0…` on [`output_times`].
pub fn costates_csv(bundle: &AdjointBundle, costate: &CostateTrajectory) -> Result<String> {
    let mut out = String::new();
    header(&mut out, std::iter::once("t".to_string()).chain(indexed("lambda", costate.lam_traj.dim())));
    for t in output_times(bundle) {
        let l = costate.lam_traj.eval(t)?;
        push_row(&mut out, std::iter::once(t).chain(l.iter().copied()));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalyticErrors {
    pub u_sup: f64,
    pub x_sup: f64,
    pub lambda_sup: Option<f64>,
    pub pi_err: f64,
    pub j_err: f64,
}

impl From<&Example1Errors> for AnalyticErrors {
    fn from(e: &Example1Errors) -> Self {
        Self {
            u_sup: e.u_sup,
            x_sup: e.x_sup,
            lambda_sup: e.lambda_sup,
            pi_err: e.pi_err,
            j_err: e.j_err,
        }
    }
}

/// Contents of `report.json`. Every key is always present.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub problem: String,
    pub mode: String,
    pub parameterization: String,
    pub param_count: usize,
    pub p_final: Vec<f64>,
    pub tf_final: f64,
    pub pi_final: Vec<f64>,
    pub j_final: f64,
    pub residual_norm: f64,
    pub g_norm: f64,
    pub converged: bool,
    pub tau_reached: f64,
    pub wall_time: f64,
    pub costate_ode_residual: Option<f64>,
    pub analytic_errors: Option<AnalyticErrors>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn new(problem: &str, mode: &str, parameterization: &str, report: &SolveReport) -> Self {
        Self {
            problem: problem.into(),
            mode: mode.into(),
            parameterization: parameterization.into(),
            param_count: report.p_final.len(),
            p_final: report.p_final.as_slice().to_vec(),
            tf_final: report.tf_final,
            pi_final: report.pi_final.as_slice().to_vec(),
            j_final: report.j_final,
            residual_norm: report.residual_norm,
            g_norm: report.g_norm,
            converged: report.converged,
            tau_reached: report.tau_reached,
            wall_time: report.wall_time,
            costate_ode_residual: None,
            analytic_errors: None,
            warnings: report.warnings.clone(),
        }
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    let _ = writeln!(text);
    std::fs::write(path, text)
}
