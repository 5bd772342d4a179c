//! Costates, the continuous multiplier and optimality residuals recovered
//! from a primal iterate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrate::DenseTrajectory;
use crate::param::Parameterization;
use crate::problem::{Gains, OcpProblem};
use crate::sensitivity::{quadrature_for, sample_nodes, AdjointBundle, Form1Quantities, Form2Quantities};

#[derive(Clone, Debug)]
pub struct CostateTrajectory {
    pub lam_traj: DenseTrajectory,
    pub pi_used: DVector<f64>,
}

/// `λ(t) = μ(t) + Ψ(t)π`, as an exact linear combination of the adjoints.
pub fn reconstruct_costate(prob: &OcpProblem, bundle: &AdjointBundle, pi: &DVector<f64>) -> Result<CostateTrajectory> {
    let dims = prob.dims();
    let (n, q) = (dims.n, dims.q);
    if pi.len() != q {
        return Err(Error::dim("pi", q, pi.len()));
    }
    if bundle.adjoint_traj.dim() != n + n * q {
        return Err(Error::dim("adjoint trajectory", n + n * q, bundle.adjoint_traj.dim()));
    }
    let mut combo = DMatrix::zeros(n, n + n * q);
    for i in 0..n {
        combo[(i, i)] = 1.0;
        for j in 0..q {
            combo[(i, n + i + n * j)] = pi[j];
        }
    }
    Ok(CostateTrajectory {
        lam_traj: bundle.adjoint_traj.map_linear(&combo),
        pi_used: pi.clone(),
    })
}

/// Sup over `times` of `‖λ̇ + f_xᵀλ + L_x‖`, with `λ̇` from the interpolant.
pub fn costate_ode_residual(
    prob: &OcpProblem,
    par: &Parameterization,
    bundle: &AdjointBundle,
    costate: &CostateTrajectory,
    times: &[f64],
) -> Result<f64> {
    let model = &prob.model;
    let mut sup = 0.0f64;
    for &t in times {
        let x = bundle.x_traj.eval(t)?;
        let u = par.eval_on(&bundle.p, bundle.tf, t, par.segment_of(bundle.tf, t));
        let lam = costate.lam_traj.eval(t)?;
        let dlam = costate.lam_traj.derivative(t)?;
        let res = dlam + model.f_x(&x, &u, t).tr_mul(&lam) + model.running_cost_x(&x, &u, t);
        sup = sup.max(res.norm());
    }
    Ok(sup)
}

/// Assembled quantities of either form.
#[derive(Clone, Copy, Debug)]
pub enum Quantities<'a> {
    Form1(&'a Form1Quantities),
    Form2(&'a Form2Quantities),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimalityResiduals {
    /// `r + Γπ` over the parameters.
    pub param_residual: DVector<f64>,
    /// Terminal-time condition; zero for fixed `t_f`.
    pub tf_residual: f64,
    /// `sup_t ‖p_u + f_uᵀΨπ‖` on the quadrature grid.
    pub continuous_residual_sup: f64,
    pub feasibility: f64,
}

pub fn optimality_residuals(
    prob: &OcpProblem,
    par: &Parameterization,
    gains: &Gains,
    quantities: Quantities<'_>,
    bundle: &AdjointBundle,
    pi: &DVector<f64>,
    quad_nodes: usize,
) -> Result<OptimalityResiduals> {
    if pi.len() != prob.dims().q {
        return Err(Error::dim("pi", prob.dims().q, pi.len()));
    }
    let s = par.param_count();
    let (param_residual, tf_residual) = match quantities {
        Quantities::Form1(f1) => {
            let tf_res = if prob.free_tf() { f1.tf_scalar + pi.dot(&f1.tf_row) } else { 0.0 };
            (&f1.r_1p + &f1.gamma_1p * pi, tf_res)
        }
        Quantities::Form2(f2) => {
            let res = &f2.r_2ptf + &f2.gamma_2ptf * pi;
            (res.rows(0, s).into_owned(), res[s])
        }
    };
    let grid = quadrature_for(par, bundle.tf, quad_nodes)?;
    let samples = sample_nodes(prob, par, bundle, gains, &grid)?;
    let continuous_residual_sup = samples
        .iter()
        .map(|smp| (&smp.p_u + &smp.fu_psi * pi).norm())
        .fold(0.0, f64::max);
    Ok(OptimalityResiduals {
        param_residual,
        tf_residual: tf_residual.abs(),
        continuous_residual_sup,
        feasibility: bundle.g.norm(),
    })
}

/// Multiplier of the unparameterized problem,
/// `π_c = −M_π⁻¹r_π` with `M_π = ∫(f_uᵀΨ)ᵀK(f_uᵀΨ) dt + k_tf·row·rowᵀ` and
/// `r_π = ∫(f_uᵀΨ)ᵀK p_u dt + k_tf·row·scalar − K_g·g`.
pub fn continuous_multiplier(
    prob: &OcpProblem,
    par: &Parameterization,
    bundle: &AdjointBundle,
    gains: &Gains,
    quad_nodes: usize,
) -> Result<DVector<f64>> {
    let q = prob.dims().q;
    if q == 0 {
        return Ok(DVector::zeros(0));
    }
    let grid = quadrature_for(par, bundle.tf, quad_nodes)?;
    let samples = sample_nodes(prob, par, bundle, gains, &grid)?;
    let mut m_pi = DMatrix::zeros(q, q);
    let mut r_pi = DVector::zeros(q);
    for smp in &samples {
        let k = smp.k_inv.clone().try_inverse().ok_or(Error::Rank { what: "K_inv" })?;
        let k_fu_psi = &k * &smp.fu_psi;
        m_pi += smp.fu_psi.tr_mul(&k_fu_psi) * smp.weight;
        r_pi += k_fu_psi.tr_mul(&smp.p_u) * smp.weight;
    }
    if prob.free_tf() {
        let f1 = crate::sensitivity::form1_from_samples(prob, par, bundle, &samples)?;
        let k_tf = gains.effective_k_tf(prob.tf_mode);
        m_pi += &f1.tf_row * f1.tf_row.transpose() * k_tf;
        r_pi += &f1.tf_row * (k_tf * f1.tf_scalar);
    }
    r_pi -= &gains.k_g * &bundle.g;
    let m_pi = (&m_pi + m_pi.transpose()) * 0.5;
    let chol = m_pi.cholesky().ok_or(Error::MultiplierRank { context: "continuous multiplier" })?;
    Ok(-chol.solve(&r_pi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::OdeSettings;
    use crate::param::{BasisKind, Form};
    use crate::problems::make_example1;
    use crate::quadrature::DEFAULT_QUAD_NODES;
    use crate::sensitivity::{assemble_form1, build_bundle};
    use nalgebra::dvector;

    fn setup(p: DVector<f64>) -> (crate::problems::BuiltinProblem, Parameterization, AdjointBundle) {
        let b = make_example1();
        let par = Parameterization::new(BasisKind::GlobalPolynomial { order: 3 }, 1, 0.0, Form::Form1).unwrap();
        let bundle = build_bundle(&b.problem, &par, &p, 2.0, &OdeSettings::new(1e-10, 1e-12)).unwrap();
        (b, par, bundle)
    }

    #[test]
    fn analytic_costate_at_optimum() {
        let (b, _, bundle) = setup(dvector![-3.5, 3.0, 0.0, 0.0]);
        let lam = reconstruct_costate(&b.problem, &bundle, &dvector![3.0, -2.5]).unwrap();
        for k in 0..=40 {
            let t = 0.05 * k as f64;
            let l = lam.lam_traj.eval(t).unwrap();
            assert!((l[0] - 3.0).abs() < 1e-9);
            assert!((l[1] - (3.5 - 3.0 * t)).abs() < 1e-9);
        }
        assert!((lam.lam_traj.eval(0.0).unwrap() - dvector![3.0, 3.5]).amax() < 1e-9);
    }

    #[test]
    fn transversality_is_exact() {
        let (b, _, bundle) = setup(dvector![0.2, -0.7, 0.4, 0.1]);
        let pi = dvector![1.25, -0.5];
        let lam = reconstruct_costate(&b.problem, &bundle, &pi).unwrap();
        // φ_x = 0 and g_x = I
        assert_eq!(*lam.lam_traj.last(), pi);
    }

    #[test]
    fn zero_multiplier_gives_zero_costate() {
        let (b, _, bundle) = setup(dvector![0.2, -0.7, 0.4, 0.1]);
        let lam = reconstruct_costate(&b.problem, &bundle, &dvector![0.0, 0.0]).unwrap();
        assert!(lam.lam_traj.values().iter().all(|v| v.amax() == 0.0));
        assert!(reconstruct_costate(&b.problem, &bundle, &dvector![0.0]).is_err());
    }

    #[test]
    fn costate_ode_holds() {
        let (b, par, bundle) = setup(dvector![0.2, -0.7, 0.4, 0.1]);
        let lam = reconstruct_costate(&b.problem, &bundle, &dvector![0.7, 0.3]).unwrap();
        let times: Vec<f64> = (0..20).map(|k| 0.05 + 0.1 * k as f64).collect();
        assert!(costate_ode_residual(&b.problem, &par, &bundle, &lam, &times).unwrap() < 1e-8);
    }

    #[test]
    fn residuals_at_zero_parameters() {
        let (b, par, bundle) = setup(DVector::zeros(4));
        let f1 = assemble_form1(&b.problem, &par, &bundle, &b.gains, DEFAULT_QUAD_NODES).unwrap();
        let pi = dvector![3.0, -2.5];
        let res = optimality_residuals(&b.problem, &par, &b.gains, Quantities::Form1(&f1), &bundle, &pi, DEFAULT_QUAD_NODES)
            .unwrap();
        assert!((res.param_residual[0] - 1.0).abs() < 1e-12);
        assert_eq!(res.tf_residual, 0.0);
        assert!((res.feasibility - 10f64.sqrt()).abs() < 1e-9);
        // p_u = 0, so the residual is sup|(2 − t)·3 − 2.5| = 3.5
        assert!((res.continuous_residual_sup - 3.5).abs() < 1e-9);
    }

    #[test]
    fn continuous_multiplier_at_optimum() {
        let (b, par, bundle) = setup(dvector![-3.5, 3.0, 0.0, 0.0]);
        let pi_c = continuous_multiplier(&b.problem, &par, &bundle, &b.gains, DEFAULT_QUAD_NODES).unwrap();
        assert!((pi_c - dvector![3.0, -2.5]).amax() < 1e-6);
    }

    #[test]
    fn spanning_basis_gives_same_multiplier_matrix() {
        let (_, par, bundle) = setup(dvector![0.3, 0.1, -0.2, 0.0]);
        let b = make_example1();
        let f1 = assemble_form1(&b.problem, &par, &bundle, &b.gains, DEFAULT_QUAD_NODES).unwrap();
        let m2 = f1.gamma_1p.tr_mul(&f1.m_p.clone().cholesky().unwrap().solve(&f1.gamma_1p));
        // ∫(f_uᵀΨ)ᵀK(f_uᵀΨ) with f_uᵀΨ = [2 − t, 1], K = 0.1
        let m1 = DMatrix::from_row_slice(2, 2, &[0.8 / 3.0, 0.2, 0.2, 0.2]);
        assert!((m2 - m1).amax() < 1e-6);
    }
}
