//! Built-in benchmark problems: the fixed-time double integrator and the
//! free-time Brachistochrone.

use std::sync::Arc;

use nalgebra::{dvector, DMatrix, DVector};

use crate::integrate::DenseTrajectory;
use crate::param::{BasisKind, Form, Parameterization};
use crate::problem::{Dims, Gains, OcpModel, OcpProblem, TerminalTime};

/// `ẋ = [x₂, u]`, `J = ½∫u² dt`, `x(0) = [1, 1]`, `x(2) = [0, 0]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct DoubleIntegrator {
    /// Replaces `f_x` by zero; a deliberately inconsistent model for exercising
    /// the derivative checks.
    pub corrupt_f_x: bool,
}

impl OcpModel for DoubleIntegrator {
    fn dims(&self) -> Dims {
        Dims { n: 2, m: 1, q: 2 }
    }
    fn f(&self, x: &DVector<f64>, u: &DVector<f64>, _t: f64) -> DVector<f64> {
        dvector![x[1], u[0]]
    }
    fn f_x(&self, _x: &DVector<f64>, _u: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        if self.corrupt_f_x {
            DMatrix::zeros(2, 2)
        } else {
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
        }
    }
    fn f_u(&self, _x: &DVector<f64>, _u: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0])
    }
    fn running_cost(&self, _x: &DVector<f64>, u: &DVector<f64>, _t: f64) -> f64 {
        0.5 * u[0] * u[0]
    }
    fn running_cost_u(&self, _x: &DVector<f64>, u: &DVector<f64>, _t: f64) -> DVector<f64> {
        u.clone()
    }
    fn constraint(&self, xf: &DVector<f64>, _tf: f64) -> DVector<f64> {
        xf.clone()
    }
    fn constraint_x(&self, _xf: &DVector<f64>, _tf: f64) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }
}

pub const GRAVITY: f64 = 10.0;

/// `(ẋ, ẏ, V̇) = (V sin u, −V cos u, g cos u)`, `J = t_f`, from rest at the
/// origin to `(x, y) = (2, −2)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Brachistochrone;

impl OcpModel for Brachistochrone {
    fn dims(&self) -> Dims {
        Dims { n: 3, m: 1, q: 2 }
    }
    fn f(&self, x: &DVector<f64>, u: &DVector<f64>, _t: f64) -> DVector<f64> {
        let (s, c) = u[0].sin_cos();
        dvector![x[2] * s, -x[2] * c, GRAVITY * c]
    }
    fn f_x(&self, _x: &DVector<f64>, u: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        let (s, c) = u[0].sin_cos();
        DMatrix::from_row_slice(3, 3, &[0.0, 0.0, s, 0.0, 0.0, -c, 0.0, 0.0, 0.0])
    }
    fn f_u(&self, x: &DVector<f64>, u: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        let (s, c) = u[0].sin_cos();
        DMatrix::from_column_slice(3, 1, &[x[2] * c, x[2] * s, -GRAVITY * s])
    }
    fn terminal_cost(&self, _xf: &DVector<f64>, tf: f64) -> f64 {
        tf
    }
    fn terminal_cost_t(&self, _xf: &DVector<f64>, _tf: f64) -> f64 {
        1.0
    }
    fn constraint(&self, xf: &DVector<f64>, _tf: f64) -> DVector<f64> {
        dvector![xf[0] - 2.0, xf[1] + 2.0]
    }
    fn constraint_x(&self, _xf: &DVector<f64>, _tf: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }
}

/// Closed-form optimum of the double-integrator problem.
#[derive(Clone, Copy, Debug, Default)]
pub struct Example1Oracle;

impl Example1Oracle {
    pub fn u(&self, t: f64) -> f64 {
        3.0 * t - 3.5
    }
    pub fn x(&self, t: f64) -> DVector<f64> {
        dvector![0.5 * t.powi(3) - 1.75 * t * t + t + 1.0, 1.5 * t * t - 3.5 * t + 1.0]
    }
    pub fn lambda(&self, t: f64) -> DVector<f64> {
        dvector![3.0, 3.5 - 3.0 * t]
    }
    pub fn pi(&self) -> DVector<f64> {
        dvector![3.0, -2.5]
    }
    pub fn j(&self) -> f64 {
        3.25
    }
    pub fn p_cubic(&self) -> DVector<f64> {
        dvector![-3.5, 3.0, 0.0, 0.0]
    }
}

/// Published Brachistochrone reference values.
#[derive(Clone, Debug)]
pub struct BrachistochroneReference {
    pub tf: f64,
    pub pi: DVector<f64>,
    /// Quartic polynomial coefficients of the optimal control.
    pub p_case1: DVector<f64>,
    /// Straight-chord descent time, `√0.8`.
    pub tf_straight_line: f64,
}

#[derive(Clone, Debug)]
pub struct NamedParameterization {
    pub name: &'static str,
    pub par: Parameterization,
}

#[derive(Clone, Debug)]
pub struct BuiltinProblem {
    pub name: &'static str,
    pub problem: OcpProblem,
    pub gains: Gains,
    pub parameterizations: Vec<NamedParameterization>,
    /// Starting terminal time for free-time problems (fixed value otherwise).
    pub tf_init: f64,
    pub example1_oracle: Option<Example1Oracle>,
    pub reference: Option<BrachistochroneReference>,
}

fn example1_with(corrupt_f_x: bool, name: &'static str) -> BuiltinProblem {
    let problem = OcpProblem::new(
        Arc::new(DoubleIntegrator { corrupt_f_x }),
        0.0,
        dvector![1.0, 1.0],
        TerminalTime::Fixed(2.0),
    )
    .expect("valid built-in problem");
    let cubic = Parameterization::new(BasisKind::GlobalPolynomial { order: 3 }, 1, 0.0, Form::Form1).unwrap();
    BuiltinProblem {
        name,
        problem,
        gains: Gains::scalar(0.1, 0.1, 0.1, 1, 2),
        parameterizations: vec![NamedParameterization { name: "cubic", par: cubic }],
        tf_init: 2.0,
        example1_oracle: Some(Example1Oracle),
        reference: None,
    }
}

/// Double integrator with fixed `t_f = 2`, `K = 0.1`, `K_g = 0.1·I`.
pub fn make_example1() -> BuiltinProblem {
    example1_with(false, "example1")
}

/// The double integrator with a wrong `f_x`, for exercising failure paths.
pub fn make_example1_corrupt() -> BuiltinProblem {
    example1_with(true, "example1-corrupt-fx")
}

/// Brachistochrone with free `t_f`, `K = 0.1`, `k_tf = 0.1`, `K_g = 0.1·I`,
/// starting from `t_f = 1`.
pub fn make_example2() -> BuiltinProblem {
    let problem = OcpProblem::new(Arc::new(Brachistochrone), 0.0, DVector::zeros(3), TerminalTime::Free)
        .expect("valid built-in problem");
    let par = |kind, form| Parameterization::new(kind, 1, 0.0, form).unwrap();
    BuiltinProblem {
        name: "brachistochrone",
        problem,
        gains: Gains::scalar(0.1, 0.1, 0.1, 1, 2),
        parameterizations: vec![
            NamedParameterization {
                name: "case1",
                par: par(BasisKind::GlobalPolynomial { order: 4 }, Form::Form1),
            },
            NamedParameterization {
                name: "case2",
                par: par(BasisKind::LagrangeNodes { n: 4 }, Form::Form2),
            },
            NamedParameterization {
                name: "case3",
                par: par(BasisKind::PiecewiseLinear { n: 20 }, Form::Form2),
            },
            NamedParameterization {
                name: "case4",
                par: par(BasisKind::PiecewiseConstant { n: 20 }, Form::Form2),
            },
        ],
        tf_init: 1.0,
        example1_oracle: None,
        reference: Some(BrachistochroneReference {
            tf: 0.8165,
            pi: dvector![-0.1477, 0.0564],
            p_case1: dvector![0.0, 1.4771, 0.0, 0.0, 0.0],
            tf_straight_line: 0.8f64.sqrt(),
        }),
    }
}

pub const NAMES: [&str; 3] = ["example1", "brachistochrone", "example1-corrupt-fx"];

pub fn by_name(name: &str) -> Option<BuiltinProblem> {
    match name {
        "example1" | "double-integrator" => Some(make_example1()),
        "brachistochrone" | "example2" => Some(make_example2()),
        "example1-corrupt-fx" => Some(make_example1_corrupt()),
        _ => None,
    }
}

/// Sup-norm errors of a candidate double-integrator solution against the
/// closed-form optimum.
#[derive(Clone, Debug, PartialEq)]
pub struct Example1Errors {
    pub u_sup: f64,
    pub x_sup: f64,
    pub lambda_sup: Option<f64>,
    pub pi_err: f64,
    pub j_err: f64,
}

/// `state` is the state trajectory (extra columns beyond `n = 2` are ignored);
/// `costate` is optional.
pub fn example1_analytic_report(
    par: &Parameterization,
    p: &DVector<f64>,
    state: &DenseTrajectory,
    costate: Option<&DenseTrajectory>,
    pi: &DVector<f64>,
    j: f64,
) -> crate::Result<Example1Errors> {
    let oracle = Example1Oracle;
    let tf = 2.0;
    let mut errs = Example1Errors {
        u_sup: 0.0,
        x_sup: 0.0,
        lambda_sup: costate.map(|_| 0.0),
        pi_err: (pi - oracle.pi()).amax(),
        j_err: (j - oracle.j()).abs(),
    };
    for k in 0..=200 {
        let t = tf * k as f64 / 200.0;
        let u = par.eval_control(p, tf, t)?[0];
        errs.u_sup = errs.u_sup.max((u - oracle.u(t)).abs());
        let x = state.eval(t)?;
        errs.x_sup = errs.x_sup.max((x.rows(0, 2) - oracle.x(t)).amax());
        if let (Some(lam), Some(sup)) = (costate, errs.lambda_sup.as_mut()) {
            *sup = sup.max((lam.eval(t)? - oracle.lambda(t)).amax());
        }
    }
    Ok(errs)
}
