//! Control parameterizations `u(t; p)` and `u(t; p, t_f)` with their
//! sensitivities `u_p` and `u_tf`.
//!
//! Parameters are laid out basis-major: the `m` control components belonging
//! to basis function `i` occupy `p[i*m .. (i+1)*m]`, so `u_p = [b_0(t)·I, b_1(t)·I, …]`.
//!
//! The node-based kinds place their nodes at `t_i = t0 + i (t_f − t0) / N`.
//! They are functions of the normalized time `σ = (t − t0)/(t_f − t0)` only,
//! hence `u_tf = −u_t · (t − t0)/(t_f − t0)` at fixed parameters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::quadrature::QuadratureGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisKind {
    /// `u = Σ p_k t^k`, `k = 0..=order`.
    GlobalPolynomial { order: usize },
    /// Lagrange interpolation through `n + 1` equally spaced nodes.
    LagrangeNodes { n: usize },
    /// Hat functions on `n` equal segments (`n + 1` node values).
    PiecewiseLinear { n: usize },
    /// Right-continuous step function on `n` equal segments.
    PiecewiseConstant { n: usize },
}

impl BasisKind {
    pub fn basis_count(&self) -> usize {
        match *self {
            BasisKind::GlobalPolynomial { order } => order + 1,
            BasisKind::LagrangeNodes { n } | BasisKind::PiecewiseLinear { n } => n + 1,
            BasisKind::PiecewiseConstant { n } => n,
        }
    }

    pub fn is_node_based(&self) -> bool {
        !matches!(self, BasisKind::GlobalPolynomial { .. })
    }

    /// Local kinds have interior breakpoints the integrator must respect.
    pub fn is_local(&self) -> bool {
        matches!(self, BasisKind::PiecewiseLinear { .. } | BasisKind::PiecewiseConstant { .. })
    }
}

/// Whether the control depends on `t_f` explicitly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Form {
    Form1,
    Form2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameterization {
    kind: BasisKind,
    form: Form,
    m: usize,
    t0: f64,
}

// tolerance for t landing marginally outside [t0, t_f] through rounding
const DOMAIN_SLACK: f64 = 1e-12;

impl Parameterization {
    pub fn new(kind: BasisKind, m: usize, t0: f64, form: Form) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("control dimension must be at least 1".into()));
        }
        match kind {
            BasisKind::GlobalPolynomial { .. } if form == Form::Form2 => {
                return Err(Error::Config(
                    "global_polynomial does not depend on t_f; use form1".into(),
                ))
            }
            BasisKind::LagrangeNodes { n } | BasisKind::PiecewiseLinear { n } | BasisKind::PiecewiseConstant { n }
                if n == 0 =>
            {
                return Err(Error::Config("node-based parameterizations need N >= 1".into()))
            }
            _ => {}
        }
        Ok(Self { kind, form, m, t0 })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn form(&self) -> Form {
        self.form
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    /// Number of parameters `s`.
    pub fn param_count(&self) -> usize {
        self.m * self.kind.basis_count()
    }

    fn segments(&self) -> usize {
        match self.kind {
            BasisKind::PiecewiseLinear { n } | BasisKind::PiecewiseConstant { n } => n,
            _ => 1,
        }
    }

    /// Interval endpoints `t0 = k_0 < k_1 < … < k_S = t_f` whose interiors are
    /// smooth for this parameterization.
    pub fn knots(&self, tf: f64) -> Vec<f64> {
        let segs = self.segments();
        (0..=segs)
            .map(|i| {
                if i == segs {
                    tf
                } else {
                    self.t0 + (tf - self.t0) * i as f64 / segs as f64
                }
            })
            .collect()
    }

    /// Index of the smooth interval containing `t`; the last interval is closed
    /// at `t_f`.
    pub fn segment_of(&self, tf: f64, t: f64) -> usize {
        let segs = self.segments();
        if segs == 1 {
            return 0;
        }
        let sigma = (t - self.t0) / (tf - self.t0);
        ((sigma * segs as f64).floor().max(0.0) as usize).min(segs - 1)
    }

    fn check_domain(&self, tf: f64, t: f64) -> Result<()> {
        let slack = DOMAIN_SLACK * (tf - self.t0).abs().max(1.0);
        if !(t >= self.t0 - slack && t <= tf + slack) {
            return Err(Error::Domain { t, lo: self.t0, hi: tf });
        }
        Ok(())
    }

    /// Basis values `b_i(t)` and their `t_f`-derivatives at fixed parameters,
    /// evaluated on interval `seg`.
    fn basis(&self, tf: f64, t: f64, seg: usize) -> (DVector<f64>, DVector<f64>) {
        let k = self.kind.basis_count();
        let mut b = DVector::zeros(k);
        let mut db_dtf = DVector::zeros(k);
        let span = tf - self.t0;
        let sigma = (t - self.t0) / span;
        // dσ/dt_f at fixed t
        let dsigma = -sigma / span;
        match self.kind {
            BasisKind::GlobalPolynomial { .. } => {
                let mut pow = 1.0;
                for i in 0..k {
                    b[i] = pow;
                    pow *= t;
                }
            }
            BasisKind::LagrangeNodes { n } => {
                let nodes: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
                for i in 0..=n {
                    let (val, der) = lagrange_basis(&nodes, i, sigma);
                    b[i] = val;
                    db_dtf[i] = der * dsigma;
                }
            }
            BasisKind::PiecewiseLinear { n } => {
                let local = sigma * n as f64 - seg as f64;
                b[seg] = 1.0 - local;
                b[seg + 1] = local;
                db_dtf[seg] = -(n as f64) * dsigma;
                db_dtf[seg + 1] = n as f64 * dsigma;
            }
            BasisKind::PiecewiseConstant { .. } => {
                // the jump locations move with t_f, but the derivative is zero
                // almost everywhere
                b[seg] = 1.0;
            }
        }
        (b, db_dtf)
    }

    fn expand(&self, b: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let m = self.m;
        let mut u = DVector::zeros(m);
        for (i, bi) in b.iter().enumerate() {
            if *bi != 0.0 {
                u += p.rows(i * m, m) * *bi;
            }
        }
        u
    }

    fn check_p(&self, p: &DVector<f64>) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::dim("p", self.param_count(), p.len()));
        }
        Ok(())
    }

    /// `u(t)` on a given smooth interval (used where the caller already knows
    /// which side of a jump it needs).
    pub fn eval_on(&self, p: &DVector<f64>, tf: f64, t: f64, seg: usize) -> DVector<f64> {
        let (b, _) = self.basis(tf, t, seg);
        self.expand(&b, p)
    }

    /// `(u, u_p, u_tf)` on a given smooth interval.
    pub fn full_on(&self, p: &DVector<f64>, tf: f64, t: f64, seg: usize) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let (b, db) = self.basis(tf, t, seg);
        let m = self.m;
        let mut u_p = DMatrix::zeros(m, self.param_count());
        for (i, bi) in b.iter().enumerate() {
            for j in 0..m {
                u_p[(j, i * m + j)] = *bi;
            }
        }
        let u = self.expand(&b, p);
        let u_tf = match self.form {
            Form::Form1 => DVector::zeros(m),
            Form::Form2 => self.expand(&db, p),
        };
        (u, u_p, u_tf)
    }

    pub fn eval_control(&self, p: &DVector<f64>, tf: f64, t: f64) -> Result<DVector<f64>> {
        self.check_p(p)?;
        self.check_domain(tf, t)?;
        Ok(self.eval_on(p, tf, t, self.segment_of(tf, t)))
    }

    /// `(u_p(t), u_tf(t))`; `u_tf` is zero for Form 1.
    pub fn eval_sensitivities(&self, p: &DVector<f64>, tf: f64, t: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_p(p)?;
        self.check_domain(tf, t)?;
        let (_, u_p, u_tf) = self.full_on(p, tf, t, self.segment_of(tf, t));
        Ok((u_p, u_tf))
    }
}

/// Smallest eigenvalue of the Gram matrix `∫ u_pᵀ u_p dt` at this iterate.
/// A positive value certifies that the parameter directions are independent.
pub fn validate_independence(par: &Parameterization, p: &DVector<f64>, tf: f64, quad_nodes: usize) -> Result<f64> {
    par.check_p(p)?;
    let s = par.param_count();
    if quad_nodes < s {
        return Err(Error::Config(format!("need at least {s} quadrature nodes, got {quad_nodes}")));
    }
    let grid = QuadratureGrid::simpson(&par.knots(tf), quad_nodes)?;
    let mut gram = DMatrix::zeros(s, s);
    for node in &grid.nodes {
        let (_, u_p, _) = par.full_on(p, tf, node.t, node.seg);
        gram += u_p.tr_mul(&u_p) * node.weight;
    }
    gram_min_eigenvalue(&gram)
}

/// Smallest eigenvalue of a symmetric Gram matrix, or a dependent-basis error
/// carrying the null direction when it is below `1e-10 · λ_max`.
pub fn gram_min_eigenvalue(gram: &DMatrix<f64>) -> Result<f64> {
    let eig = gram.clone().symmetric_eigen();
    let (imin, lambda_min) = eig.eigenvalues.argmin();
    let lambda_max = eig.eigenvalues.max();
    if !(lambda_min > 1e-10 * lambda_max) {
        return Err(Error::DependentBasis {
            lambda_min,
            lambda_max,
            direction: eig.eigenvectors.column(imin).into_owned(),
        });
    }
    Ok(lambda_min)
}

/// Value and derivative of the `i`-th Lagrange basis polynomial at `x`.
fn lagrange_basis(nodes: &[f64], i: usize, x: f64) -> (f64, f64) {
    let xi = nodes[i];
    let mut val = 1.0;
    let mut der = 0.0;
    for (j, &xj) in nodes.iter().enumerate() {
        if j == i {
            continue;
        }
        let factor = (x - xj) / (xi - xj);
        der = der * factor + val / (xi - xj);
        val *= factor;
    }
    (val, der)
}
