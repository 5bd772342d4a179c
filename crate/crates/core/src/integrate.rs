//! Adaptive Dormand–Prince 5(4) integrator with the standard 4th-order
//! continuous extension.
//!
//! One code path serves forward and backward integration: a backward span is
//! integrated in negated time and the resulting trajectory is stored in
//! increasing time order.

use std::ops::ControlFlow;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const GROW_MIN: f64 = 0.2;
const GROW_MAX: f64 = 5.0;
const PI_BETA: f64 = 0.04;

/// Integrator tolerances and budget.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeSettings {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    pub initial_step: Option<f64>,
    /// Upper bound on the step size.
    pub max_step: Option<f64>,
}

impl Default for OdeSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-3,
            abs_tol: 1e-6,
            max_steps: 100_000,
            initial_step: None,
            max_step: None,
        }
    }
}

impl OdeSettings {
    pub fn new(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            rel_tol,
            abs_tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) || !self.rel_tol.is_finite() {
            return Err(Error::Config(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        if !(self.abs_tol > 0.0) || !self.abs_tol.is_finite() {
            return Err(Error::Config(format!("abs_tol must be positive, got {}", self.abs_tol)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0) {
                return Err(Error::Config(format!("initial_step must be positive, got {h}")));
            }
        }
        if let Some(h) = self.max_step {
            if !(h > 0.0) {
                return Err(Error::Config(format!("max_step must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

/// Coefficients of the continuous extension over one accepted step.
///
/// The interpolant is a polynomial in `theta = (t - t_start) / (t_end - t_start)`
/// where `t_start` is where the step began (the right end for backward steps).
#[derive(Clone, Debug)]
struct Piece {
    t_start: f64,
    t_end: f64,
    cont: [DVector<f64>; 5],
}

impl Piece {
    fn theta(&self, t: f64) -> f64 {
        (t - self.t_start) / (self.t_end - self.t_start)
    }

    fn eval(&self, t: f64) -> DVector<f64> {
        let th = self.theta(t);
        let th1 = 1.0 - th;
        let [c1, c2, c3, c4, c5] = &self.cont;
        let inner = c4 + c5 * th1;
        let a = c3 + inner * th;
        let b = c2 + a * th1;
        c1 + b * th
    }

    fn derivative(&self, t: f64) -> DVector<f64> {
        let th = self.theta(t);
        let th1 = 1.0 - th;
        let [_, c2, c3, c4, c5] = &self.cont;
        let a = c3 + (c4 + c5 * th1) * th;
        let da = c4 + c5 * (1.0 - 2.0 * th);
        let b = c2 + &a * th1;
        let db = -a + da * th1;
        (b + db * th) / (self.t_end - self.t_start)
    }

    fn map_linear(&self, mat: &DMatrix<f64>) -> Piece {
        Piece {
            t_start: self.t_start,
            t_end: self.t_end,
            cont: self.cont.clone().map(|c| mat * c),
        }
    }
}

/// Dense representation of a vector-valued trajectory on a strictly
/// increasing time grid.
#[derive(Clone, Debug)]
pub struct DenseTrajectory {
    t_grid: Vec<f64>,
    values: Vec<DVector<f64>>,
    // pieces[i] spans [t_grid[i], t_grid[i + 1]]
    pieces: Vec<Piece>,
}

impl DenseTrajectory {
    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn t_first(&self) -> f64 {
        self.t_grid[0]
    }

    pub fn t_last(&self) -> f64 {
        *self.t_grid.last().unwrap()
    }

    pub fn first(&self) -> &DVector<f64> {
        &self.values[0]
    }

    pub fn last(&self) -> &DVector<f64> {
        self.values.last().unwrap()
    }

    /// Times within a few ulps outside the span are clamped onto it, so that
    /// endpoints recomputed by the caller still evaluate.
    fn snap(&self, t: f64) -> Result<f64> {
        let (lo, hi) = (self.t_first(), self.t_last());
        let slack = 4.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(hi - lo);
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(Error::Domain { t, lo, hi });
        }
        Ok(t.clamp(lo, hi))
    }

    fn locate(&self, t: f64) -> Result<std::result::Result<usize, usize>> {
        let idx = self.t_grid.partition_point(|&g| g < t);
        if idx < self.t_grid.len() && self.t_grid[idx] == t {
            Ok(Ok(idx))
        } else {
            Ok(Err(idx - 1))
        }
    }

    /// Evaluates the interpolant; grid nodes return the stored values exactly.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        let t = self.snap(t)?;
        Ok(match self.locate(t)? {
            Ok(node) => self.values[node].clone(),
            Err(piece) => self.pieces[piece].eval(t),
        })
    }

    /// Time derivative of the interpolant. At a grid node the piece to the
    /// right is used (the left one at the final node).
    pub fn derivative(&self, t: f64) -> Result<DVector<f64>> {
        let t = self.snap(t)?;
        let piece = match self.locate(t)? {
            Ok(node) => node.min(self.pieces.len() - 1),
            Err(piece) => piece,
        };
        Ok(self.pieces[piece].derivative(t))
    }

    /// Applies a fixed linear map to every value and interpolation coefficient.
    /// The interpolant is linear in its coefficients, so the result interpolates
    /// the mapped trajectory exactly.
    pub fn map_linear(&self, mat: &DMatrix<f64>) -> DenseTrajectory {
        assert_eq!(mat.ncols(), self.dim(), "map_linear: column count must match trajectory dimension");
        DenseTrajectory {
            t_grid: self.t_grid.clone(),
            values: self.values.iter().map(|v| mat * v).collect(),
            pieces: self.pieces.iter().map(|p| p.map_linear(mat)).collect(),
        }
    }

    /// Selects a contiguous block of components.
    pub fn components(&self, start: usize, len: usize) -> DenseTrajectory {
        let mut sel = DMatrix::zeros(len, self.dim());
        for i in 0..len {
            sel[(i, start + i)] = 1.0;
        }
        self.map_linear(&sel)
    }

    /// Joins trajectories that abut in time, in any order.
    pub fn join(mut parts: Vec<DenseTrajectory>) -> DenseTrajectory {
        assert!(!parts.is_empty(), "join needs at least one trajectory");
        parts.sort_by(|a, b| a.t_first().total_cmp(&b.t_first()));
        let mut iter = parts.into_iter();
        let mut out = iter.next().unwrap();
        for next in iter {
            // the shared junction node keeps the earlier segment's value
            out.t_grid.extend_from_slice(&next.t_grid[1..]);
            out.values.extend(next.values.into_iter().skip(1));
            out.pieces.extend(next.pieces);
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    /// Scaled error norm of the last accepted step.
    pub last_error: f64,
}

#[derive(Clone, Debug)]
pub struct DenseSolution {
    pub traj: DenseTrajectory,
    pub stats: StepStats,
}

/// View of a freshly accepted step handed to an observer.
pub struct StepView<'a> {
    pub t_prev: f64,
    pub t: f64,
    pub y: &'a DVector<f64>,
    piece: &'a Piece,
}

impl StepView<'_> {
    /// Interpolates inside the accepted step.
    pub fn interpolate(&self, t: f64) -> DVector<f64> {
        if t == self.t {
            self.y.clone()
        } else {
            self.piece.eval(t)
        }
    }
}

/// Evaluates the continuous interpolant of a solution.
pub fn dense_eval(sol: &DenseSolution, t: f64) -> Result<DVector<f64>> {
    sol.traj.eval(t)
}

/// Integrates `y' = rhs(t, y)` over `span`. `span.1 < span.0` integrates backward.
pub fn integrate_ivp<F>(rhs: F, y0: &DVector<f64>, span: (f64, f64), settings: &OdeSettings) -> Result<DenseSolution>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    integrate_observed(rhs, y0, span, settings, |_| Ok(ControlFlow::Continue(())))
}

/// Integrates piecewise over `knots` (in integration order), restarting the
/// method at every knot so that no step straddles one. The right-hand side
/// receives the index of the current interval `(knots[k], knots[k + 1])`.
pub fn integrate_piecewise<F>(
    mut rhs: F,
    y0: &DVector<f64>,
    knots: &[f64],
    settings: &OdeSettings,
) -> Result<DenseSolution>
where
    F: FnMut(usize, f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    assert!(knots.len() >= 2, "need at least one interval");
    let mut parts = Vec::with_capacity(knots.len() - 1);
    let mut stats = StepStats::default();
    let mut y = y0.clone();
    for (k, w) in knots.windows(2).enumerate() {
        if w[0] == w[1] {
            continue;
        }
        let sol = integrate_ivp(|t, y| rhs(k, t, y), &y, (w[0], w[1]), settings)?;
        y = if w[1] > w[0] {
            sol.traj.last().clone()
        } else {
            sol.traj.first().clone()
        };
        stats.accepted += sol.stats.accepted;
        stats.rejected += sol.stats.rejected;
        stats.rhs_evals += sol.stats.rhs_evals;
        stats.last_error = sol.stats.last_error;
        parts.push(sol.traj);
    }
    Ok(DenseSolution {
        traj: DenseTrajectory::join(parts),
        stats,
    })
}

fn scaled_norm(v: &DVector<f64>, y0: &DVector<f64>, y1: &DVector<f64>, s: &OdeSettings) -> f64 {
    let n = v.len().max(1) as f64;
    let sum: f64 = v
        .iter()
        .zip(y0.iter().zip(y1.iter()))
        .map(|(e, (a, b))| {
            let sk = s.abs_tol + s.rel_tol * a.abs().max(b.abs());
            (e / sk).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// As [`integrate_ivp`], calling `observer` after every accepted step. The
/// observer may stop the integration early; the returned trajectory then ends
/// at the last accepted step.
pub fn integrate_observed<F, O>(
    mut rhs: F,
    y0: &DVector<f64>,
    span: (f64, f64),
    settings: &OdeSettings,
    mut observer: O,
) -> Result<DenseSolution>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    O: FnMut(&StepView<'_>) -> Result<ControlFlow<()>>,
{
    settings.validate()?;
    let (t0, t1) = span;
    if t0 == t1 || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::Config(format!("invalid integration span ({t0}, {t1})")));
    }
    let dir = if t1 > t0 { 1.0 } else { -1.0 };
    let s_end = dir * t1;
    let mut s = dir * t0;
    let span_len = s_end - s;

    let mut stats = StepStats::default();
    let mut eval = |s: f64, y: &DVector<f64>, stats: &mut StepStats| -> Result<DVector<f64>> {
        stats.rhs_evals += 1;
        let t = dir * s;
        let dy = rhs(t, y)?;
        if dy.len() != y.len() {
            return Err(Error::dim("rhs", y.len(), dy.len()));
        }
        if !all_finite(&dy) {
            return Err(Error::Divergence { t });
        }
        Ok(dy * dir)
    };

    let mut y = y0.clone();
    if !all_finite(&y) {
        return Err(Error::Divergence { t: t0 });
    }
    let mut k1 = eval(s, &y, &mut stats)?;

    let mut h = match settings.initial_step {
        Some(h) => h.min(span_len),
        None => initial_step(&mut eval, s, &y, &k1, span_len, settings, &mut stats),
    };
    let h_max = settings.max_step.unwrap_or(f64::INFINITY);
    h = h.min(h_max);

    let mut t_grid = vec![t0];
    let mut values = vec![y.clone()];
    let mut pieces: Vec<Piece> = Vec::new();
    let mut facold = 1e-4_f64;
    let mut last_rejected = false;
    let expo1 = 0.2 - PI_BETA * 0.75;
    let h_min = 16.0 * f64::EPSILON * span_len.abs().max(s.abs()).max(1.0);

    loop {
        let remaining = s_end - s;
        if remaining <= 1e-14 * s_end.abs().max(1.0) {
            break;
        }
        if stats.accepted + stats.rejected >= settings.max_steps {
            return Err(Error::StepBudget {
                max_steps: settings.max_steps,
                t: dir * s,
            });
        }
        if h < h_min {
            return Err(Error::StepUnderflow { t: dir * s });
        }
        let last = h >= remaining;
        if last {
            h = remaining;
        }

        let stages = (|| -> Result<_> {
            let y2 = &y + &k1 * (h * A21);
            let k2 = eval(s + C2 * h, &y2, &mut stats)?;
            let y3 = &y + (&k1 * A31 + &k2 * A32) * h;
            let k3 = eval(s + C3 * h, &y3, &mut stats)?;
            let y4 = &y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h;
            let k4 = eval(s + C4 * h, &y4, &mut stats)?;
            let y5 = &y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h;
            let k5 = eval(s + C5 * h, &y5, &mut stats)?;
            let y6 = &y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h;
            let s_new = if last { s_end } else { s + h };
            let k6 = eval(s_new, &y6, &mut stats)?;
            let y_new = &y + (&k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * h;
            let k7 = eval(s_new, &y_new, &mut stats)?;
            Ok((k3, k4, k5, k6, k7, y_new))
        })();

        let (k3, k4, k5, k6, k7, y_new) = match stages {
            Ok(v) => v,
            Err(Error::RejectStep { .. }) => {
                stats.rejected += 1;
                last_rejected = true;
                h *= 0.5;
                continue;
            }
            Err(e) => return Err(e),
        };

        let err_vec = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
        let err = scaled_norm(&err_vec, &y, &y_new, settings);
        if !err.is_finite() {
            return Err(Error::Divergence { t: dir * s });
        }

        let fac11 = err.powf(expo1);
        if err <= 1.0 {
            let fac = (fac11 / facold.powf(PI_BETA) / SAFETY).clamp(1.0 / GROW_MAX, 1.0 / GROW_MIN);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            h_new = h_new.min(h_max);
            facold = err.max(1e-4);

            let ydiff = &y_new - &y;
            let bspl = &k1 * h - &ydiff;
            let c4 = &ydiff - &k7 * h - &bspl;
            let c5 = (&k1 * D1 + &k3 * D3 + &k4 * D4 + &k5 * D5 + &k6 * D6 + &k7 * D7) * h;
            let s_new = if last { s_end } else { s + h };
            let piece = Piece {
                t_start: dir * s,
                t_end: dir * s_new,
                cont: [y.clone(), ydiff, bspl, c4, c5],
            };

            stats.accepted += 1;
            stats.last_error = err;
            let t_prev = dir * s;
            s = s_new;
            y = y_new;
            k1 = k7;
            last_rejected = false;

            let flow = observer(&StepView {
                t_prev,
                t: dir * s,
                y: &y,
                piece: &piece,
            })?;
            t_grid.push(dir * s);
            values.push(y.clone());
            pieces.push(piece);
            if flow.is_break() {
                break;
            }
            h = h_new;
        } else {
            let fac = (fac11 / SAFETY).min(1.0 / GROW_MIN);
            h /= fac;
            stats.rejected += 1;
            last_rejected = true;
        }
    }

    if dir < 0.0 {
        t_grid.reverse();
        values.reverse();
        pieces.reverse();
    }
    Ok(DenseSolution {
        traj: DenseTrajectory {
            t_grid,
            values,
            pieces,
        },
        stats,
    })
}

fn initial_step<E>(
    eval: &mut E,
    s: f64,
    y: &DVector<f64>,
    f0: &DVector<f64>,
    span_len: f64,
    settings: &OdeSettings,
    stats: &mut StepStats,
) -> f64
where
    E: FnMut(f64, &DVector<f64>, &mut StepStats) -> Result<DVector<f64>>,
{
    let d0 = scaled_norm(y, y, y, settings);
    let d1 = scaled_norm(f0, y, y, settings);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span_len);
    let y1 = y + f0 * h0;
    let d2 = match eval(s + h0, &y1, stats) {
        Ok(f1) => scaled_norm(&(f1 - f0), y, y, settings) / h0,
        Err(_) => return h0,
    };
    let dm = d1.max(d2);
    let h1 = if dm <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dm).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span_len)
}
