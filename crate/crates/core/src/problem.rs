//! Optimal control problem definition, gains, and solve reports.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::integrate::{integrate_piecewise, DenseTrajectory, OdeSettings};

/// Problem dimensions: state `n`, control `m`, terminal constraints `q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub q: usize,
}

/// Dynamics, costs and terminal constraint of a Bolza problem together with
/// their analytic first derivatives.
///
/// The cost and constraint terms default to zero / absent so that Mayer or
/// unconstrained problems only implement what they need.
pub trait OcpModel: Send + Sync {
    fn dims(&self) -> Dims;

    fn f(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DVector<f64>;
    fn f_x(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DMatrix<f64>;
    fn f_u(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DMatrix<f64>;

    fn running_cost(&self, _x: &DVector<f64>, _u: &DVector<f64>, _t: f64) -> f64 {
        0.0
    }
    fn running_cost_x(&self, _x: &DVector<f64>, _u: &DVector<f64>, _t: f64) -> DVector<f64> {
        DVector::zeros(self.dims().n)
    }
    fn running_cost_u(&self, _x: &DVector<f64>, _u: &DVector<f64>, _t: f64) -> DVector<f64> {
        DVector::zeros(self.dims().m)
    }

    fn terminal_cost(&self, _xf: &DVector<f64>, _tf: f64) -> f64 {
        0.0
    }
    fn terminal_cost_x(&self, _xf: &DVector<f64>, _tf: f64) -> DVector<f64> {
        DVector::zeros(self.dims().n)
    }
    fn terminal_cost_t(&self, _xf: &DVector<f64>, _tf: f64) -> f64 {
        0.0
    }

    fn constraint(&self, _xf: &DVector<f64>, _tf: f64) -> DVector<f64> {
        DVector::zeros(self.dims().q)
    }
    fn constraint_x(&self, _xf: &DVector<f64>, _tf: f64) -> DMatrix<f64> {
        DMatrix::zeros(self.dims().q, self.dims().n)
    }
    fn constraint_t(&self, _xf: &DVector<f64>, _tf: f64) -> DVector<f64> {
        DVector::zeros(self.dims().q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TerminalTime {
    Fixed(f64),
    Free,
}

#[derive(Clone)]
pub struct OcpProblem {
    pub model: Arc<dyn OcpModel>,
    pub t0: f64,
    pub x0: DVector<f64>,
    pub tf_mode: TerminalTime,
}

impl std::fmt::Debug for OcpProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OcpProblem")
            .field("dims", &self.model.dims())
            .field("t0", &self.t0)
            .field("x0", &self.x0)
            .field("tf_mode", &self.tf_mode)
            .finish()
    }
}

impl OcpProblem {
    pub fn new(model: Arc<dyn OcpModel>, t0: f64, x0: DVector<f64>, tf_mode: TerminalTime) -> Result<Self> {
        let dims = model.dims();
        if x0.len() != dims.n {
            return Err(Error::dim("x0", dims.n, x0.len()));
        }
        if let TerminalTime::Fixed(tf) = tf_mode {
            if !(tf > t0) {
                return Err(Error::Config(format!("fixed t_f = {tf} must exceed t0 = {t0}")));
            }
        }
        Ok(Self { model, t0, x0, tf_mode })
    }

    pub fn dims(&self) -> Dims {
        self.model.dims()
    }

    pub fn free_tf(&self) -> bool {
        self.tf_mode == TerminalTime::Free
    }
}

/// Control weight and flow gains.
#[derive(Clone)]
pub struct Gains {
    k_inv: KInv,
    /// Terminal-time gain; ignored (treated as 0) for fixed terminal time.
    pub k_tf: f64,
    /// Constraint-decay gain.
    pub k_g: DMatrix<f64>,
    /// Gain of the plain gradient-flow mode.
    pub k_theta: Option<DMatrix<f64>>,
}

#[derive(Clone)]
enum KInv {
    Constant(DMatrix<f64>),
    Varying(Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>),
}

impl std::fmt::Debug for Gains {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let k_inv = match &self.k_inv {
            KInv::Constant(m) => format!("{m:?}"),
            KInv::Varying(_) => "<time-varying>".into(),
        };
        f.debug_struct("Gains")
            .field("k_inv", &k_inv)
            .field("k_tf", &self.k_tf)
            .field("k_g", &self.k_g)
            .field("k_theta", &self.k_theta)
            .finish()
    }
}

impl Gains {
    /// Gains from a constant inverse control weight `K⁻¹`.
    pub fn new(k_inv: DMatrix<f64>, k_tf: f64, k_g: DMatrix<f64>) -> Self {
        Self {
            k_inv: KInv::Constant(k_inv),
            k_tf,
            k_g,
            k_theta: None,
        }
    }

    /// `K = k·I(m)`, `K_g = kg·I(q)`.
    pub fn scalar(k: f64, k_tf: f64, kg: f64, m: usize, q: usize) -> Self {
        Self::new(DMatrix::identity(m, m) / k, k_tf, DMatrix::identity(q, q) * kg)
    }

    pub fn with_time_varying_k_inv(mut self, k_inv: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.k_inv = KInv::Varying(Arc::new(k_inv));
        self
    }

    pub fn with_k_theta(mut self, k_theta: DMatrix<f64>) -> Self {
        self.k_theta = Some(k_theta);
        self
    }

    pub fn k_inv(&self, t: f64) -> DMatrix<f64> {
        match &self.k_inv {
            KInv::Constant(m) => m.clone(),
            KInv::Varying(f) => f(t),
        }
    }

    pub fn is_time_invariant(&self) -> bool {
        matches!(self.k_inv, KInv::Constant(_))
    }

    /// The terminal-time gain actually used: zero when t_f is fixed.
    pub fn effective_k_tf(&self, tf_mode: TerminalTime) -> f64 {
        match tf_mode {
            TerminalTime::Fixed(_) => 0.0,
            TerminalTime::Free => self.k_tf,
        }
    }

    /// Checks dimensions and positive-definiteness; `K⁻¹(t)` is sampled on
    /// `sample_times`.
    pub fn validate(&self, dims: Dims, tf_mode: TerminalTime, sample_times: &[f64]) -> Result<()> {
        let times: Vec<f64> = match self.k_inv {
            KInv::Constant(_) => vec![sample_times.first().copied().unwrap_or(0.0)],
            KInv::Varying(_) => sample_times.to_vec(),
        };
        for t in times {
            let k = self.k_inv(t);
            if k.shape() != (dims.m, dims.m) {
                return Err(Error::dim("K_inv", format!("{}x{}", dims.m, dims.m), format!("{:?}", k.shape())));
            }
            check_spd(&k, "K_inv")?;
        }
        if self.k_g.shape() != (dims.q, dims.q) {
            return Err(Error::dim("K_g", format!("{}x{}", dims.q, dims.q), format!("{:?}", self.k_g.shape())));
        }
        if dims.q > 0 {
            check_spd(&self.k_g, "K_g")?;
        }
        if tf_mode == TerminalTime::Free && !(self.k_tf > 0.0) {
            return Err(Error::Config(format!("k_tf must be positive for free t_f, got {}", self.k_tf)));
        }
        if let Some(kt) = &self.k_theta {
            check_spd(kt, "K_theta")?;
        }
        Ok(())
    }
}

pub(crate) fn check_spd(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Config(format!("{what} must be square")));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Config(format!("{what} must be symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::Config(format!("{what} must be positive-definite")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub tau: f64,
    pub p: DVector<f64>,
    pub tf: f64,
    pub pi: DVector<f64>,
    pub j: f64,
    pub g_norm: f64,
    pub residual_norm: f64,
    pub v: f64,
}

/// Rows recorded along the evolution in virtual time; `tau` strictly increases.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveTrace {
    pub rows: Vec<TraceRow>,
}

impl SolveTrace {
    /// Appends a row; rows whose `tau` does not advance are dropped.
    pub fn push(&mut self, row: TraceRow) -> bool {
        if self.rows.last().is_some_and(|r| row.tau <= r.tau) {
            return false;
        }
        self.rows.push(row);
        true
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub p_final: DVector<f64>,
    pub tf_final: f64,
    pub pi_final: DVector<f64>,
    pub j_final: f64,
    pub residual_norm: f64,
    pub g_norm: f64,
    pub converged: bool,
    pub tau_reached: f64,
    pub wall_time: f64,
    pub warnings: Vec<String>,
}

/// Forward simulation with the running cost carried as an extra state.
/// Returns the `(n + 1)`-dimensional trajectory `[x; ∫L]`.
pub(crate) fn simulate<C>(prob: &OcpProblem, control: C, knots: &[f64], ode: &OdeSettings) -> Result<DenseTrajectory>
where
    C: Fn(usize, f64) -> DVector<f64>,
{
    let n = prob.dims().n;
    let model = &prob.model;
    let mut y0 = DVector::zeros(n + 1);
    y0.rows_mut(0, n).copy_from(&prob.x0);
    let rhs = |seg: usize, t: f64, y: &DVector<f64>| {
        let x = y.rows(0, n).into_owned();
        let u = control(seg, t);
        let mut dy = DVector::zeros(n + 1);
        dy.rows_mut(0, n).copy_from(&model.f(&x, &u, t));
        dy[n] = model.running_cost(&x, &u, t);
        Ok(dy)
    };
    Ok(integrate_piecewise(rhs, &y0, knots, ode)?.traj)
}

fn simulate_closure(
    prob: &OcpProblem,
    u_of_t: &dyn Fn(f64) -> DVector<f64>,
    t_f: f64,
    ode: &OdeSettings,
) -> Result<DVector<f64>> {
    if !(t_f > prob.t0) {
        return Err(Error::Config(format!("t_f = {t_f} must exceed t0 = {}", prob.t0)));
    }
    let traj = simulate(prob, |_, t| u_of_t(t), &[prob.t0, t_f], ode)?;
    Ok(traj.last().clone())
}

/// `J = φ(x(t_f), t_f) + ∫ L dt` for the control `u_of_t`.
pub fn objective_value(
    prob: &OcpProblem,
    u_of_t: &dyn Fn(f64) -> DVector<f64>,
    t_f: f64,
    ode: &OdeSettings,
) -> Result<f64> {
    let n = prob.dims().n;
    let end = simulate_closure(prob, u_of_t, t_f, ode)?;
    let xf = end.rows(0, n).into_owned();
    Ok(prob.model.terminal_cost(&xf, t_f) + end[n])
}

/// `g(x(t_f), t_f)` for the control `u_of_t`.
pub fn constraint_value(
    prob: &OcpProblem,
    u_of_t: &dyn Fn(f64) -> DVector<f64>,
    t_f: f64,
    ode: &OdeSettings,
) -> Result<DVector<f64>> {
    let n = prob.dims().n;
    let end = simulate_closure(prob, u_of_t, t_f, ode)?;
    Ok(prob.model.constraint(&end.rows(0, n).into_owned(), t_f))
}

/// Largest finite-difference discrepancy observed for each derivative.
#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub max_rel_err: Vec<(&'static str, f64)>,
}

impl ValidationReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.max_rel_err.iter().find(|(n, _)| *n == name).map(|(_, e)| *e)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

const FD_REL_TOL: f64 = 1e-4;

fn fd_step(v: f64) -> f64 {
    1e-6 * v.abs().max(1.0)
}

/// Central differences of `func` with respect to every component of `at`.
fn fd_jacobian(at: &DVector<f64>, rows: usize, func: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(rows, at.len());
    for j in 0..at.len() {
        let h = fd_step(at[j]);
        let mut plus = at.clone();
        plus[j] += h;
        let mut minus = at.clone();
        minus[j] -= h;
        jac.set_column(j, &((func(&plus) - func(&minus)) / (2.0 * h)));
    }
    jac
}

fn rel_err(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    (analytic - fd).amax() / fd.amax().max(analytic.amax()).max(1.0)
}

fn check_shape(name: &'static str, got: (usize, usize), expected: (usize, usize)) -> Result<()> {
    if got != expected {
        return Err(Error::dim(
            name,
            format!("{}x{}", expected.0, expected.1),
            format!("{}x{}", got.0, got.1),
        ));
    }
    Ok(())
}

fn col(v: DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    DMatrix::from_column_slice(n, 1, v.as_slice())
}

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Compares every analytic derivative against central finite differences at
/// `samples` pseudo-random points (fixed seed, so the check is repeatable).
pub fn validate_problem(prob: &OcpProblem, samples: usize) -> Result<ValidationReport> {
    if samples == 0 {
        return Err(Error::Config("validate_problem needs at least one sample".into()));
    }
    let Dims { n, m, q } = prob.dims();
    let model = &prob.model;
    let horizon = match prob.tf_mode {
        TerminalTime::Fixed(tf) => tf - prob.t0,
        TerminalTime::Free => 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst: Vec<(&'static str, f64)> = [
        "f_x", "f_u", "L_x", "L_u", "phi_x", "phi_t", "g_x", "g_t",
    ]
    .iter()
    .map(|&n| (n, 0.0))
    .collect();

    for _ in 0..samples {
        let x = DVector::from_fn(n, |i, _| prob.x0[i] + rng.random_range(-1.0..1.0));
        let u = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let t = prob.t0 + horizon * rng.random_range(0.05..1.0);

        check_shape("f", (model.f(&x, &u, t).len(), 1), (n, 1))?;
        check_shape("f_x", model.f_x(&x, &u, t).shape(), (n, n))?;
        check_shape("f_u", model.f_u(&x, &u, t).shape(), (n, m))?;
        check_shape("L_x", (model.running_cost_x(&x, &u, t).len(), 1), (n, 1))?;
        check_shape("L_u", (model.running_cost_u(&x, &u, t).len(), 1), (m, 1))?;
        check_shape("phi_x", (model.terminal_cost_x(&x, t).len(), 1), (n, 1))?;
        check_shape("g", (model.constraint(&x, t).len(), 1), (q, 1))?;
        check_shape("g_x", model.constraint_x(&x, t).shape(), (q, n))?;
        check_shape("g_t", (model.constraint_t(&x, t).len(), 1), (q, 1))?;

        let tv = DVector::from_element(1, t);
        let checks: [(&'static str, DMatrix<f64>, DMatrix<f64>); 8] = [
            ("f_x", model.f_x(&x, &u, t), fd_jacobian(&x, n, |xx| model.f(xx, &u, t))),
            ("f_u", model.f_u(&x, &u, t), fd_jacobian(&u, n, |uu| model.f(&x, uu, t))),
            (
                "L_x",
                col(model.running_cost_x(&x, &u, t)).transpose(),
                fd_jacobian(&x, 1, |xx| DVector::from_element(1, model.running_cost(xx, &u, t))),
            ),
            (
                "L_u",
                col(model.running_cost_u(&x, &u, t)).transpose(),
                fd_jacobian(&u, 1, |uu| DVector::from_element(1, model.running_cost(&x, uu, t))),
            ),
            (
                "phi_x",
                col(model.terminal_cost_x(&x, t)).transpose(),
                fd_jacobian(&x, 1, |xx| DVector::from_element(1, model.terminal_cost(xx, t))),
            ),
            (
                "phi_t",
                scalar(model.terminal_cost_t(&x, t)),
                fd_jacobian(&tv, 1, |tt| DVector::from_element(1, model.terminal_cost(&x, tt[0]))),
            ),
            ("g_x", model.constraint_x(&x, t), fd_jacobian(&x, q, |xx| model.constraint(xx, t))),
            (
                "g_t",
                col(model.constraint_t(&x, t)),
                fd_jacobian(&tv, q, |tt| model.constraint(&x, tt[0])),
            ),
        ];
        for (i, (name, analytic, fd)) in checks.iter().enumerate() {
            if analytic.is_empty() {
                continue;
            }
            let e = rel_err(analytic, fd);
            if !(e <= FD_REL_TOL) {
                let mut point = String::new();
                let _ = write!(point, "x = {:?}, u = {:?}, t = {t}", x.as_slice(), u.as_slice());
                return Err(Error::DerivativeMismatch {
                    evaluator: name,
                    point,
                    rel_err: e,
                });
            }
            worst[i].1 = worst[i].1.max(e);
        }
    }
    Ok(ValidationReport { max_rel_err: worst })
}
