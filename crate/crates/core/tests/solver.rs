//! Behaviour of complete evolution runs on the built-in problems.

use dshoot::costate::{continuous_multiplier, optimality_residuals, Quantities};
use dshoot::prelude::*;
use dshoot::problems::{example1_analytic_report, make_example1, make_example2, BuiltinProblem};
use dshoot::quadrature::DEFAULT_QUAD_NODES;
use dshoot::sensitivity::build_bundle;
use nalgebra::{dvector, DVector};

fn run(b: &BuiltinProblem, idx: usize) -> (Parameterization, EvolutionOutcome) {
    let par = b.parameterizations[idx].par.clone();
    let mode = match par.form() {
        Form::Form1 => EvolutionMode::Form1,
        Form::Form2 => EvolutionMode::Form2,
    };
    let init = EvolutionState::zeros(par.param_count(), b.tf_init);
    let out = solve_evolution(mode, &b.problem, &par, &b.gains, &init, &StopCriteria::default(), &SolverSettings::default())
        .unwrap();
    (par, out)
}

#[test]
fn converged_state_satisfies_optimality_conditions() {
    let stop = StopCriteria::default();
    let b = make_example2();
    let (par, out) = run(&b, 0);
    assert!(out.report.converged);
    let f1 = &out.form1;
    let res = optimality_residuals(
        &b.problem,
        &par,
        &b.gains,
        Quantities::Form1(f1),
        &out.bundle,
        &out.report.pi_final,
        DEFAULT_QUAD_NODES,
    )
    .unwrap();
    assert!(res.param_residual.norm() <= stop.tol_opt, "{}", res.param_residual.norm());
    assert!(res.tf_residual <= stop.tol_opt, "{}", res.tf_residual);
    assert!(res.feasibility <= stop.tol_feas);
}

#[test]
fn example1_converges_to_the_analytic_optimum() {
    let b = make_example1();
    let (par, out) = run(&b, 0);
    let lam = reconstruct_costate(&b.problem, &out.bundle, &out.report.pi_final).unwrap();
    let errs = example1_analytic_report(
        &par,
        &out.report.p_final,
        &out.bundle.x_traj,
        Some(&lam.lam_traj),
        &out.report.pi_final,
        out.report.j_final,
    )
    .unwrap();
    assert!(errs.u_sup <= 1e-3 && errs.x_sup <= 1e-3 && errs.pi_err <= 1e-3 && errs.j_err <= 1e-3, "{errs:?}");
    assert!(errs.lambda_sup.unwrap() <= 1e-3);
    let res = optimality_residuals(
        &b.problem,
        &par,
        &b.gains,
        Quantities::Form1(&out.form1),
        &out.bundle,
        &out.report.pi_final,
        DEFAULT_QUAD_NODES,
    )
    .unwrap();
    assert!(res.param_residual.norm() <= 1e-3 && res.continuous_residual_sup <= 1e-3, "{res:?}");
}

#[test]
fn analytic_report_at_zero_parameters() {
    let b = make_example1();
    let par = b.parameterizations[0].par.clone();
    let p = DVector::zeros(4);
    let bundle = build_bundle(&b.problem, &par, &p, 2.0, &OdeSettings::new(1e-10, 1e-12)).unwrap();
    let errs = example1_analytic_report(&par, &p, &bundle.x_traj, None, &dvector![0.0, 0.0], 0.0).unwrap();
    // |0 − û(0)| with û(0) = −3.5
    assert!((errs.u_sup - 3.5).abs() < 1e-12);
    assert!(errs.lambda_sup.is_none());
}

#[test]
fn polynomial_and_lagrange_cases_agree() {
    let b = make_example2();
    let (par1, out1) = run(&b, 0);
    let (par2, out2) = run(&b, 1);
    assert!((&out1.report.pi_final - &out2.report.pi_final).amax() <= 1e-3);
    let tf = out1.report.tf_final.min(out2.report.tf_final);
    for k in 0..=200 {
        let t = tf * k as f64 / 200.0;
        let u1 = par1.eval_control(&out1.report.p_final, out1.report.tf_final, t).unwrap()[0];
        let u2 = par2.eval_control(&out2.report.p_final, out2.report.tf_final, t).unwrap()[0];
        assert!((u1 - u2).abs() <= 2e-3, "t = {t}: {u1} vs {u2}");
    }
}

#[test]
fn case1_control_is_linear_in_time() {
    let b = make_example2();
    let (par, out) = run(&b, 0);
    let p = &out.report.p_final;
    let tf = out.report.tf_final;
    for k in 0..=200 {
        let t = tf * k as f64 / 200.0;
        let u = par.eval_control(p, tf, t).unwrap()[0];
        assert!((u - (p[0] + p[1] * t)).abs() <= 2e-3, "t = {t}");
    }
}

#[test]
fn step_control_leaves_a_larger_continuous_residual() {
    let b = make_example2();
    let residual = |idx: usize| {
        let (par, out) = run(&b, idx);
        let f2 = assemble_form2(&b.problem, &par, &out.bundle, &b.gains, DEFAULT_QUAD_NODES).ok();
        let q = match (&f2, par.form()) {
            (Some(f2), Form::Form2) => Quantities::Form2(f2),
            _ => Quantities::Form1(&out.form1),
        };
        optimality_residuals(&b.problem, &par, &b.gains, q, &out.bundle, &out.report.pi_final, DEFAULT_QUAD_NODES)
            .unwrap()
            .continuous_residual_sup
    };
    let (r1, r4) = (residual(0), residual(3));
    assert!(r4 > r1, "case 4 {r4} vs case 1 {r1}");
}

#[test]
fn costate_error_follows_control_error() {
    // along the Example-1 trace, whenever the control error has halved the
    // costate error must have dropped as well
    let b = make_example1();
    let (par, out) = run(&b, 0);
    let settings = SolverSettings::default();
    let mut errs = Vec::new();
    for row in &out.trace.rows {
        let state = EvolutionState::new(row.p.clone(), row.tf);
        let ev = evolution_rhs(EvolutionMode::Form1, &b.problem, &par, &b.gains, &state, &settings).unwrap();
        let lam = reconstruct_costate(&b.problem, &ev.bundle, &ev.pi).unwrap();
        let e = example1_analytic_report(&par, &row.p, &ev.bundle.x_traj, Some(&lam.lam_traj), &ev.pi, row.j).unwrap();
        errs.push((e.u_sup, e.lambda_sup.unwrap()));
    }
    for (i, &(u_i, l_i)) in errs.iter().enumerate() {
        for &(u_j, l_j) in &errs[i + 1..] {
            if u_j <= 0.5 * u_i && l_i > 1e-9 {
                assert!(l_j < l_i, "control error {u_i:.3e} -> {u_j:.3e} but costate error {l_i:.3e} -> {l_j:.3e}");
            }
        }
    }
    // the ratio stays bounded along the trace
    let c = errs.iter().filter(|e| e.0 > 1e-6).map(|e| e.1 / e.0).fold(0.0, f64::max);
    assert!(c.is_finite() && c < 10.0, "C = {c}");
}

#[test]
fn parameterized_and_continuous_multipliers_coincide_at_optimum() {
    let b = make_example1();
    let (par, out) = run(&b, 0);
    let pi_c = continuous_multiplier(&b.problem, &par, &out.bundle, &b.gains, DEFAULT_QUAD_NODES).unwrap();
    assert!((&pi_c - &out.report.pi_final).amax() <= 1e-3, "{pi_c} vs {}", out.report.pi_final);
}

#[test]
fn constraint_norm_decays_exponentially() {
    let b = make_example1();
    let (_, out) = run(&b, 0);
    let rows = &out.trace.rows;
    let g0 = rows[0].g_norm;
    for r in rows.iter().filter(|r| r.tau <= 40.0) {
        let expected = g0 * (-0.1 * r.tau).exp();
        assert!((r.g_norm - expected).abs() <= 0.2 * expected, "tau = {}: {} vs {expected}", r.tau, r.g_norm);
    }
}

#[test]
fn solves_are_deterministic() {
    let b = make_example2();
    let (_, a) = run(&b, 2);
    let (_, c) = run(&b, 2);
    assert_eq!(a.trace, c.trace);
    assert_eq!(a.report.p_final, c.report.p_final);
}
