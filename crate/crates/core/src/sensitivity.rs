//! Forward state solve, backward adjoint solves, and the matrices the
//! evolution equations are built from.
//!
//! The state transition matrix of the linearized dynamics is never formed.
//! Its only uses are contracted with `φ_x` and `g_xᵀ`, which gives two
//! backward adjoints: `μ̇ = −f_xᵀμ − L_x` with `μ(t_f) = φ_x`, and
//! `Ψ̇ = −f_xᵀΨ` with `Ψ(t_f) = g_xᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrate::{integrate_piecewise, DenseTrajectory, OdeSettings};
use crate::param::Parameterization;
use crate::problem::{simulate, Gains, OcpProblem};
use crate::quadrature::QuadratureGrid;

/// Everything derived from one forward and one backward solve at `(p, t_f)`.
#[derive(Clone, Debug)]
pub struct AdjointBundle {
    pub p: DVector<f64>,
    pub tf: f64,
    /// `x(t)`, `n` components.
    pub x_traj: DenseTrajectory,
    /// `μ(t)`, `n` components.
    pub mu_traj: DenseTrajectory,
    /// `Ψ(t)` flattened column-major: entry `(i, j)` is component `i + n·j`.
    pub psi_traj: DenseTrajectory,
    /// `[μ; Ψ]` as integrated.
    pub adjoint_traj: DenseTrajectory,
    pub xf: DVector<f64>,
    pub j: f64,
    pub g: DVector<f64>,
}

impl AdjointBundle {
    pub fn psi_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let n = self.x_traj.dim();
        let q = self.g.len();
        Ok(DMatrix::from_column_slice(n, q, self.psi_traj.eval(t)?.as_slice()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Form1Quantities {
    pub m_p: DMatrix<f64>,
    pub r_1p: DVector<f64>,
    pub gamma_1p: DMatrix<f64>,
    /// `(φ_t + φ_xᵀf + L)` at `t_f`.
    pub tf_scalar: f64,
    /// `(g_x f + g_t)` at `t_f`.
    pub tf_row: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Form2Quantities {
    pub m_ptf: DMatrix<f64>,
    pub r_2ptf: DVector<f64>,
    pub gamma_2ptf: DMatrix<f64>,
}

/// Gradient of `J(θ)` and Jacobian of `g(θ)` for `θ = [p; t_f]`, or `θ = p`
/// when `t_f` is fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct NlpGradients {
    pub f_theta: DVector<f64>,
    pub g_theta: DMatrix<f64>,
}

/// Integrand values at one quadrature node.
#[derive(Clone, Debug)]
pub struct NodeSample {
    pub t: f64,
    pub weight: f64,
    pub seg: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub u_p: DMatrix<f64>,
    pub u_tf: DVector<f64>,
    /// `L_u + f_uᵀμ`
    pub p_u: DVector<f64>,
    /// `f_uᵀΨ`, `m × q`
    pub fu_psi: DMatrix<f64>,
    pub k_inv: DMatrix<f64>,
}

fn check_iterate(prob: &OcpProblem, par: &Parameterization, p: &DVector<f64>, tf: f64) -> Result<()> {
    if p.len() != par.param_count() {
        return Err(Error::dim("p", par.param_count(), p.len()));
    }
    if par.control_dim() != prob.dims().m {
        return Err(Error::dim("parameterization control dimension", prob.dims().m, par.control_dim()));
    }
    if par.t0() != prob.t0 {
        return Err(Error::Config(format!(
            "parameterization starts at {} but the problem starts at {}",
            par.t0(),
            prob.t0
        )));
    }
    if !(tf > prob.t0) || !tf.is_finite() {
        return Err(Error::Config(format!("t_f = {tf} must exceed t0 = {}", prob.t0)));
    }
    Ok(())
}

/// Forward solve of the dynamics under `u(t; p, t_f)`. The result carries the
/// accumulated running cost as an extra last component, `[x; ∫L dt]`.
pub fn solve_state(
    prob: &OcpProblem,
    par: &Parameterization,
    p: &DVector<f64>,
    tf: f64,
    ode: &OdeSettings,
) -> Result<DenseTrajectory> {
    check_iterate(prob, par, p, tf)?;
    simulate(prob, |seg, t| par.eval_on(p, tf, t, seg), &par.knots(tf), ode)
}

/// Backward solve of both adjoints along the state from [`solve_state`].
pub fn solve_adjoints(
    prob: &OcpProblem,
    par: &Parameterization,
    p: &DVector<f64>,
    state: &DenseTrajectory,
    tf: f64,
    ode: &OdeSettings,
) -> Result<AdjointBundle> {
    check_iterate(prob, par, p, tf)?;
    let dims = prob.dims();
    let (n, q) = (dims.n, dims.q);
    if state.dim() != n + 1 {
        return Err(Error::dim("state trajectory", n + 1, state.dim()));
    }
    let model = &prob.model;
    let end = state.last();
    let xf = end.rows(0, n).into_owned();
    let j = model.terminal_cost(&xf, tf) + end[n];
    let g = model.constraint(&xf, tf);
    if g.len() != q {
        return Err(Error::dim("g", q, g.len()));
    }
    let phi_x = model.terminal_cost_x(&xf, tf);
    if phi_x.len() != n {
        return Err(Error::dim("phi_x", n, phi_x.len()));
    }
    let g_x = model.constraint_x(&xf, tf);
    if g_x.shape() != (q, n) {
        return Err(Error::dim("g_x", format!("{q}x{n}"), format!("{}x{}", g_x.nrows(), g_x.ncols())));
    }

    let mut y0 = DVector::zeros(n + n * q);
    y0.rows_mut(0, n).copy_from(&phi_x);
    y0.rows_mut(n, n * q).copy_from_slice(g_x.transpose().as_slice());

    let knots: Vec<f64> = par.knots(tf).into_iter().rev().collect();
    let last_seg = knots.len() - 2;
    let rhs = |k: usize, t: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let seg = last_seg - k;
        let x = state.eval(t)?.rows(0, n).into_owned();
        let u = par.eval_on(p, tf, t, seg);
        let fx = model.f_x(&x, &u, t);
        if fx.shape() != (n, n) {
            return Err(Error::dim("f_x", format!("{n}x{n}"), format!("{}x{}", fx.nrows(), fx.ncols())));
        }
        let lx = model.running_cost_x(&x, &u, t);
        if lx.len() != n {
            return Err(Error::dim("L_x", n, lx.len()));
        }
        let mut dy = DVector::zeros(y.len());
        let dmu = -fx.tr_mul(&y.rows(0, n)) - lx;
        dy.rows_mut(0, n).copy_from(&dmu);
        if q > 0 {
            let psi = DMatrix::from_column_slice(n, q, &y.as_slice()[n..]);
            let dpsi = -fx.tr_mul(&psi);
            dy.rows_mut(n, n * q).copy_from_slice(dpsi.as_slice());
        }
        Ok(dy)
    };
    let adj = integrate_piecewise(rhs, &y0, &knots, ode)?.traj;
    Ok(AdjointBundle {
        p: p.clone(),
        tf,
        x_traj: state.components(0, n),
        mu_traj: adj.components(0, n),
        psi_traj: adj.components(n, n * q),
        adjoint_traj: adj,
        xf,
        j,
        g,
    })
}

/// State and adjoint solves in one call.
pub fn build_bundle(
    prob: &OcpProblem,
    par: &Parameterization,
    p: &DVector<f64>,
    tf: f64,
    ode: &OdeSettings,
) -> Result<AdjointBundle> {
    let state = solve_state(prob, par, p, tf, ode)?;
    solve_adjoints(prob, par, p, &state, tf, ode)
}

/// Quadrature grid used for every integral at this iterate.
pub fn quadrature_for(par: &Parameterization, tf: f64, quad_nodes: usize) -> Result<QuadratureGrid> {
    QuadratureGrid::simpson(&par.knots(tf), quad_nodes)
}

/// Integrand values on the quadrature grid.
pub fn sample_nodes(
    prob: &OcpProblem,
    par: &Parameterization,
    bundle: &AdjointBundle,
    gains: &Gains,
    grid: &QuadratureGrid,
) -> Result<Vec<NodeSample>> {
    let model = &prob.model;
    let dims = prob.dims();
    let (n, m, q) = (dims.n, dims.m, dims.q);
    let (p, tf) = (&bundle.p, bundle.tf);
    grid.nodes
        .iter()
        .map(|node| {
            let t = node.t;
            let x = bundle.x_traj.eval(t)?;
            let (u, u_p, u_tf) = par.full_on(p, tf, t, node.seg);
            let mu = bundle.mu_traj.eval(t)?;
            let fu = model.f_u(&x, &u, t);
            if fu.shape() != (n, m) {
                return Err(Error::dim("f_u", format!("{n}x{m}"), format!("{}x{}", fu.nrows(), fu.ncols())));
            }
            let lu = model.running_cost_u(&x, &u, t);
            if lu.len() != m {
                return Err(Error::dim("L_u", m, lu.len()));
            }
            let psi = DMatrix::from_column_slice(n, q, bundle.psi_traj.eval(t)?.as_slice());
            Ok(NodeSample {
                t,
                weight: node.weight,
                seg: node.seg,
                p_u: lu + fu.tr_mul(&mu),
                fu_psi: fu.tr_mul(&psi),
                k_inv: gains.k_inv(t),
                x,
                u,
                u_p,
                u_tf,
            })
        })
        .collect()
}

fn terminal_brackets(prob: &OcpProblem, par: &Parameterization, bundle: &AdjointBundle) -> (f64, DVector<f64>) {
    let model = &prob.model;
    let (xf, tf) = (&bundle.xf, bundle.tf);
    let last = par.knots(tf).len() - 2;
    let uf = par.eval_on(&bundle.p, tf, tf, last);
    let f = model.f(xf, &uf, tf);
    let scalar = model.terminal_cost_t(xf, tf) + model.terminal_cost_x(xf, tf).dot(&f) + model.running_cost(xf, &uf, tf);
    let row = model.constraint_x(xf, tf) * &f + model.constraint_t(xf, tf);
    (scalar, row)
}

fn require_spd(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) && m.clone().cholesky().is_some() {
        Ok(())
    } else {
        Err(Error::Rank { what })
    }
}

pub(crate) fn form1_from_samples(
    prob: &OcpProblem,
    par: &Parameterization,
    bundle: &AdjointBundle,
    samples: &[NodeSample],
) -> Result<Form1Quantities> {
    let s = par.param_count();
    let q = prob.dims().q;
    let mut m_p = DMatrix::zeros(s, s);
    let mut r_1p = DVector::zeros(s);
    let mut gamma_1p = DMatrix::zeros(s, q);
    for smp in samples {
        let w = smp.weight;
        let up_t = smp.u_p.transpose();
        m_p += &up_t * (&smp.k_inv * &smp.u_p) * w;
        r_1p += &up_t * &smp.p_u * w;
        gamma_1p += &up_t * &smp.fu_psi * w;
    }
    // symmetrize away rounding so factorizations see an exactly symmetric matrix
    let m_p = (&m_p + m_p.transpose()) * 0.5;
    require_spd(&m_p, "M_p")?;
    let (tf_scalar, tf_row) = terminal_brackets(prob, par, bundle);
    Ok(Form1Quantities {
        m_p,
        r_1p,
        gamma_1p,
        tf_scalar,
        tf_row,
    })
}

/// `∫u_tfᵀK⁻¹u_p`, `∫u_tfᵀK⁻¹u_tf`, `∫u_tfᵀp_u` and `∫u_tfᵀf_uᵀΨ`.
struct TfIntegrals {
    k_up: DVector<f64>,
    k_tf: f64,
    p_u: f64,
    fu_psi: DVector<f64>,
}

fn tf_integrals(s: usize, q: usize, samples: &[NodeSample]) -> TfIntegrals {
    let mut out = TfIntegrals {
        k_up: DVector::zeros(s),
        k_tf: 0.0,
        p_u: 0.0,
        fu_psi: DVector::zeros(q),
    };
    for smp in samples {
        let w = smp.weight;
        let k_utf = &smp.k_inv * &smp.u_tf;
        out.k_up += smp.u_p.tr_mul(&k_utf) * w;
        out.k_tf += smp.u_tf.dot(&k_utf) * w;
        out.p_u += smp.u_tf.dot(&smp.p_u) * w;
        out.fu_psi += smp.fu_psi.tr_mul(&smp.u_tf) * w;
    }
    out
}

pub(crate) fn form2_from_samples(
    prob: &OcpProblem,
    par: &Parameterization,
    gains: &Gains,
    f1: &Form1Quantities,
    samples: &[NodeSample],
) -> Result<Form2Quantities> {
    let k_tf = gains.effective_k_tf(prob.tf_mode);
    if !(k_tf > 0.0) {
        return Err(Error::Config("form 2 needs a free terminal time and k_tf > 0".into()));
    }
    let s = par.param_count();
    let q = prob.dims().q;
    let tfi = tf_integrals(s, q, samples);
    let mut m_ptf = DMatrix::zeros(s + 1, s + 1);
    m_ptf.view_mut((0, 0), (s, s)).copy_from(&f1.m_p);
    m_ptf.view_mut((0, s), (s, 1)).copy_from(&tfi.k_up);
    m_ptf.view_mut((s, 0), (1, s)).copy_from(&tfi.k_up.transpose());
    m_ptf[(s, s)] = 1.0 / k_tf + tfi.k_tf;
    require_spd(&m_ptf, "M_ptf")?;
    let mut r_2ptf = DVector::zeros(s + 1);
    r_2ptf.rows_mut(0, s).copy_from(&f1.r_1p);
    r_2ptf[s] = f1.tf_scalar + tfi.p_u;
    let mut gamma_2ptf = DMatrix::zeros(s + 1, q);
    gamma_2ptf.view_mut((0, 0), (s, q)).copy_from(&f1.gamma_1p);
    gamma_2ptf.view_mut((s, 0), (1, q)).copy_from(&(&f1.tf_row + &tfi.fu_psi).transpose());
    Ok(Form2Quantities {
        m_ptf,
        r_2ptf,
        gamma_2ptf,
    })
}

pub(crate) fn gradients_from_samples(
    prob: &OcpProblem,
    par: &Parameterization,
    f1: &Form1Quantities,
    samples: &[NodeSample],
) -> NlpGradients {
    let s = par.param_count();
    let q = prob.dims().q;
    if !prob.free_tf() {
        return NlpGradients {
            f_theta: f1.r_1p.clone(),
            g_theta: f1.gamma_1p.transpose(),
        };
    }
    let tfi = tf_integrals(s, q, samples);
    let mut f_theta = DVector::zeros(s + 1);
    f_theta.rows_mut(0, s).copy_from(&f1.r_1p);
    f_theta[s] = f1.tf_scalar + tfi.p_u;
    let mut g_theta = DMatrix::zeros(q, s + 1);
    g_theta.view_mut((0, 0), (q, s)).copy_from(&f1.gamma_1p.transpose());
    g_theta.column_mut(s).copy_from(&(&f1.tf_row + &tfi.fu_psi));
    NlpGradients { f_theta, g_theta }
}

/// `M_p = ∫u_pᵀK⁻¹u_p dt`, `r_1p = ∫u_pᵀp_u dt`, `Γ_1p = ∫u_pᵀf_uᵀΨ dt` and the
/// terminal brackets, by composite Simpson with `quad_nodes` nodes.
pub fn assemble_form1(
    prob: &OcpProblem,
    par: &Parameterization,
    bundle: &AdjointBundle,
    gains: &Gains,
    quad_nodes: usize,
) -> Result<Form1Quantities> {
    let grid = quadrature_for(par, bundle.tf, quad_nodes)?;
    let samples = sample_nodes(prob, par, bundle, gains, &grid)?;
    form1_from_samples(prob, par, bundle, &samples)
}

/// The `(s + 1)`-block matrices for a parameterization that depends on `t_f`.
pub fn assemble_form2(
    prob: &OcpProblem,
    par: &Parameterization,
    bundle: &AdjointBundle,
    gains: &Gains,
    quad_nodes: usize,
) -> Result<Form2Quantities> {
    let grid = quadrature_for(par, bundle.tf, quad_nodes)?;
    let samples = sample_nodes(prob, par, bundle, gains, &grid)?;
    let f1 = form1_from_samples(prob, par, bundle, &samples)?;
    form2_from_samples(prob, par, gains, &f1, &samples)
}

/// Gradient of `J` and Jacobian of `g` with respect to `θ`. With a free
/// terminal time the last entry is the total `t_f`-derivative at fixed `p`,
/// which includes the `u_tf` terms for parameterizations that stretch with
/// `t_f`.
pub fn nlp_gradients(
    prob: &OcpProblem,
    par: &Parameterization,
    bundle: &AdjointBundle,
    gains: &Gains,
    quad_nodes: usize,
) -> Result<NlpGradients> {
    let grid = quadrature_for(par, bundle.tf, quad_nodes)?;
    let samples = sample_nodes(prob, par, bundle, gains, &grid)?;
    let f1 = form1_from_samples(prob, par, bundle, &samples)?;
    Ok(gradients_from_samples(prob, par, &f1, &samples))
}

/// Adjoint gradients next to central finite differences of the simulated
/// `J` and `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub analytic: NlpGradients,
    pub f_fd: DVector<f64>,
    pub g_fd: DMatrix<f64>,
    /// `max|f_θ − fd| / max(max|fd|, 1e-12)`
    pub f_rel_err: f64,
    pub g_rel_err: f64,
}

/// Compares [`nlp_gradients`] with central differences of step
/// `h·max(1, |θ_i|)`. The state solves of the differences use `ode`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    prob: &OcpProblem,
    par: &Parameterization,
    gains: &Gains,
    p: &DVector<f64>,
    tf: f64,
    h: f64,
    ode: &OdeSettings,
    quad_nodes: usize,
) -> Result<GradientCheck> {
    let bundle = build_bundle(prob, par, p, tf, ode)?;
    let analytic = nlp_gradients(prob, par, &bundle, gains, quad_nodes)?;
    let s = par.param_count();
    let dim_theta = analytic.f_theta.len();
    let q = prob.dims().q;
    let mut f_fd = DVector::zeros(dim_theta);
    let mut g_fd = DMatrix::zeros(q, dim_theta);
    for i in 0..dim_theta {
        let eval = |sign: f64| -> Result<(f64, DVector<f64>)> {
            let (mut pp, mut tt) = (p.clone(), tf);
            let step = if i < s { h * p[i].abs().max(1.0) } else { h * tf.abs().max(1.0) };
            if i < s {
                pp[i] += sign * step;
            } else {
                tt += sign * step;
            }
            let state = solve_state(prob, par, &pp, tt, ode)?;
            let n = prob.dims().n;
            let end = state.last();
            let xf = end.rows(0, n).into_owned();
            Ok((prob.model.terminal_cost(&xf, tt) + end[n], prob.model.constraint(&xf, tt)))
        };
        let step = if i < s { h * p[i].abs().max(1.0) } else { h * tf.abs().max(1.0) };
        let (jp, gp) = eval(1.0)?;
        let (jm, gm) = eval(-1.0)?;
        f_fd[i] = (jp - jm) / (2.0 * step);
        g_fd.column_mut(i).copy_from(&((gp - gm) / (2.0 * step)));
    }
    let rel = |a: f64, scale: f64| a / scale.max(1e-12);
    Ok(GradientCheck {
        f_rel_err: rel((&analytic.f_theta - &f_fd).amax(), f_fd.amax()),
        g_rel_err: rel((&analytic.g_theta - &g_fd).amax(), g_fd.amax()),
        analytic,
        f_fd,
        g_fd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{BasisKind, Form};
    use crate::problems::{make_example1, make_example2};
    use crate::quadrature::DEFAULT_QUAD_NODES;
    use nalgebra::dvector;

    fn tight() -> OdeSettings {
        OdeSettings::new(1e-10, 1e-12)
    }

    fn cubic() -> Parameterization {
        Parameterization::new(BasisKind::GlobalPolynomial { order: 3 }, 1, 0.0, Form::Form1).unwrap()
    }

    fn ex1_bundle(p: DVector<f64>) -> (crate::problems::BuiltinProblem, AdjointBundle) {
        let b = make_example1();
        let bundle = build_bundle(&b.problem, &cubic(), &p, 2.0, &tight()).unwrap();
        (b, bundle)
    }

    #[test]
    fn state_at_analytic_optimum() {
        let b = make_example1();
        let x = solve_state(&b.problem, &cubic(), &dvector![-3.5, 3.0, 0.0, 0.0], 2.0, &tight()).unwrap();
        for k in 0..=20 {
            let t = 0.1 * k as f64;
            let xa = dvector![0.5 * t.powi(3) - 1.75 * t * t + t + 1.0, 1.5 * t * t - 3.5 * t + 1.0];
            assert!((x.eval(t).unwrap().rows(0, 2) - xa).amax() < 1e-5);
        }
        assert!((x.last()[2] - 3.25).abs() < 1e-8);
    }

    #[test]
    fn trivial_states() {
        let b = make_example1();
        let x = solve_state(&b.problem, &cubic(), &DVector::zeros(4), 2.0, &tight()).unwrap();
        assert!((x.last().rows(0, 2) - dvector![3.0, 1.0]).amax() < 1e-9);

        let b2 = make_example2();
        let par = &b2.parameterizations[0].par;
        let x = solve_state(&b2.problem, par, &DVector::zeros(5), 1.0, &tight()).unwrap();
        assert!((x.last() - dvector![0.0, -5.0, 10.0, 0.0]).amax() < 1e-9);
    }

    #[test]
    fn example1_adjoints() {
        let (_, bundle) = ex1_bundle(dvector![0.3, -0.2, 0.1, 0.05]);
        for k in 0..=10 {
            let t = 0.2 * k as f64;
            assert!(bundle.mu_traj.eval(t).unwrap().amax() == 0.0);
            let psi = bundle.psi_at(t).unwrap();
            let want = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0 - t, 1.0]);
            assert!((psi - want).amax() < 1e-9, "t = {t}");
        }
        assert_eq!(bundle.psi_at(2.0).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn example1_form1_matrices() {
        let (b, bundle) = ex1_bundle(DVector::zeros(4));
        let f1 = assemble_form1(&b.problem, &cubic(), &bundle, &b.gains, DEFAULT_QUAD_NODES).unwrap();
        #[rustfmt::skip]
        let m_p = DMatrix::from_row_slice(4, 4, &[
            20.0, 20.0, 80.0 / 3.0, 40.0,
            20.0, 80.0 / 3.0, 40.0, 64.0,
            80.0 / 3.0, 40.0, 64.0, 320.0 / 3.0,
            40.0, 64.0, 320.0 / 3.0, 1280.0 / 7.0,
        ]);
        assert!((&f1.m_p - m_p).amax() < 1e-6);
        // ∫tⁱ(2 − t) dt and ∫tⁱ dt over [0, 2]
        let gamma: Vec<f64> = (0..4)
            .flat_map(|i| {
                let i = i as f64;
                let m = |k: f64| 2f64.powf(k + 1.0) / (k + 1.0);
                [2.0 * m(i) - m(i + 1.0), m(i)]
            })
            .collect();
        let gamma = DMatrix::from_row_slice(4, 2, &gamma);
        assert!((&f1.gamma_1p - DMatrix::from_row_slice(4, 2, &[2.0, 2.0, 4.0 / 3.0, 2.0, 4.0 / 3.0, 8.0 / 3.0, 1.6, 4.0])).amax() < 1e-6);
        assert!((&f1.gamma_1p - gamma).amax() < 1e-6);
        assert_eq!(f1.r_1p, DVector::zeros(4));
        // fixed t_f: L at t_f plus φ terms vanish for u = 0; g_x f = x₂(2) = 1
        assert_eq!(f1.tf_row, dvector![1.0, 0.0]);
    }

    #[test]
    fn gradient_moments_for_unit_control() {
        let (b, bundle) = ex1_bundle(dvector![1.0, 0.0, 0.0, 0.0]);
        let grads = nlp_gradients(&b.problem, &cubic(), &bundle, &b.gains, DEFAULT_QUAD_NODES).unwrap();
        assert!((&grads.f_theta - dvector![2.0, 2.0, 8.0 / 3.0, 4.0]).amax() < 1e-10);
        let f1 = assemble_form1(&b.problem, &cubic(), &bundle, &b.gains, DEFAULT_QUAD_NODES).unwrap();
        assert_eq!(grads.g_theta, f1.gamma_1p.transpose());
        assert_eq!(grads.f_theta, f1.r_1p);
    }

    #[test]
    fn quadrature_refinement_is_stable_for_polynomials() {
        // a linear basis keeps every integrand within Simpson's exact degree
        let b = make_example1();
        let lin = Parameterization::new(BasisKind::GlobalPolynomial { order: 1 }, 1, 0.0, Form::Form1).unwrap();
        let bundle = build_bundle(&b.problem, &lin, &dvector![0.5, -1.0], 2.0, &tight()).unwrap();
        let a = assemble_form1(&b.problem, &lin, &bundle, &b.gains, 101).unwrap();
        let c = assemble_form1(&b.problem, &lin, &bundle, &b.gains, 201).unwrap();
        assert!((&a.m_p - &c.m_p).amax() < 1e-8);
        assert!((&a.r_1p - &c.r_1p).amax() < 1e-8);
        assert!((&a.gamma_1p - &c.gamma_1p).amax() < 1e-8);
    }

    #[test]
    fn form2_without_tf_dependence_degrades_to_form1() {
        let b = make_example2();
        let par = Parameterization::new(BasisKind::PiecewiseConstant { n: 6 }, 1, 0.0, Form::Form2).unwrap();
        let p = DVector::from_fn(6, |i, _| 0.2 + 0.15 * i as f64);
        let bundle = build_bundle(&b.problem, &par, &p, 0.9, &tight()).unwrap();
        let f1 = assemble_form1(&b.problem, &par, &bundle, &b.gains, DEFAULT_QUAD_NODES).unwrap();
        let f2 = assemble_form2(&b.problem, &par, &bundle, &b.gains, DEFAULT_QUAD_NODES).unwrap();
        let mut m = DMatrix::zeros(7, 7);
        m.view_mut((0, 0), (6, 6)).copy_from(&f1.m_p);
        m[(6, 6)] = 1.0 / 0.1;
        assert_eq!(f2.m_ptf, m);
        assert_eq!(f2.r_2ptf.rows(0, 6), f1.r_1p);
        assert_eq!(f2.r_2ptf[6], f1.tf_scalar);
        assert_eq!(f2.gamma_2ptf.row(6).transpose(), f1.tf_row);
    }

    #[test]
    fn form2_tf_entry_matches_finite_difference() {
        let b = make_example2();
        let par = b.parameterizations[1].par.clone();
        let p = dvector![0.1, 0.5, 0.9, 1.2, 1.4];
        let tf = 0.9;
        let ode = tight();
        let bundle = build_bundle(&b.problem, &par, &p, tf, &ode).unwrap();
        let f2 = assemble_form2(&b.problem, &par, &bundle, &b.gains, DEFAULT_QUAD_NODES).unwrap();
        let h = 1e-5;
        let j = |tf: f64| build_bundle(&b.problem, &par, &p, tf, &ode).unwrap().j;
        let fd = (j(tf + h) - j(tf - h)) / (2.0 * h);
        assert!(((f2.r_2ptf[5] - fd) / fd).abs() < 1e-3, "{} vs {fd}", f2.r_2ptf[5]);
        let gv = |tf: f64| build_bundle(&b.problem, &par, &p, tf, &ode).unwrap().g;
        let gfd = (gv(tf + h) - gv(tf - h)) / (2.0 * h);
        assert!((f2.gamma_2ptf.row(5).transpose() - &gfd).amax() < 1e-3 * gfd.amax());
        // top-left block is the form-1 matrix
        let f1 = assemble_form1(&b.problem, &par, &bundle, &b.gains, DEFAULT_QUAD_NODES).unwrap();
        assert_eq!(f2.m_ptf.view((0, 0), (5, 5)), f1.m_p);
    }

    #[test]
    fn bad_iterates_are_rejected() {
        let b = make_example1();
        assert!(matches!(
            solve_state(&b.problem, &cubic(), &DVector::zeros(3), 2.0, &tight()),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            solve_state(&b.problem, &cubic(), &DVector::zeros(4), 0.0, &tight()),
            Err(Error::Config(_))
        ));
        let (_, bundle) = ex1_bundle(DVector::zeros(4));
        let fixed = make_example1();
        let par2 = Parameterization::new(BasisKind::LagrangeNodes { n: 3 }, 1, 0.0, Form::Form2).unwrap();
        assert!(matches!(
            assemble_form2(&fixed.problem, &par2, &bundle, &fixed.gains, 51),
            Err(Error::Config(_))
        ));
    }
}
