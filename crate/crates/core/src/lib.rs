//! Direct-shooting optimal control solved as an initial-value problem in a
//! virtual time `tau`.
//!
//! The control is parameterized ([`param`]), the parameters (and a free
//! terminal time) flow along an evolution equation ([`evolution`]) whose
//! equilibrium satisfies the optimality conditions, and the costates and
//! terminal multipliers are reconstructed from the primal solution
//! ([`costate`]). Every quantity the flow needs comes from one forward state
//! solve and one backward adjoint solve per iterate ([`sensitivity`]).
//!
//! ```no_run
//! use dshoot::prelude::*;
//!
//! let builtin = problems::make_example1();
//! let par = Parameterization::new(BasisKind::GlobalPolynomial { order: 3 }, 1, 0.0, Form::Form1).unwrap();
//! let init = EvolutionState::zeros(par.param_count(), 2.0);
//! let out = solve_evolution(
//!     EvolutionMode::Form1,
//!     &builtin.problem,
//!     &par,
//!     &builtin.gains,
//!     &init,
//!     &StopCriteria::default(),
//!     &SolverSettings::default(),
//! )
//! .unwrap();
//! println!("{:?}", out.report.p_final);
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod costate;
pub mod error;
pub mod evolution;
pub mod integrate;
pub mod param;
pub mod problem;
pub mod problems;
pub mod projection;
pub mod quadrature;
pub mod sensitivity;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::costate::{continuous_multiplier, optimality_residuals, reconstruct_costate, CostateTrajectory};
    pub use crate::error::{Error, Result};
    pub use crate::evolution::{
        evolution_rhs, gradient_flow_generic, lyapunov_diagnostic, multiplier, solve_evolution, EvolutionMode,
        EvolutionOutcome, EvolutionState, SolverSettings, StopCriteria,
    };
    pub use crate::integrate::{dense_eval, integrate_ivp, DenseSolution, DenseTrajectory, OdeSettings};
    pub use crate::param::{BasisKind, Form, Parameterization};
    pub use crate::problem::{
        constraint_value, objective_value, validate_problem, Gains, OcpModel, OcpProblem, SolveReport, SolveTrace,
        TerminalTime, TraceRow,
    };
    pub use crate::problems;
    pub use crate::quadrature::QuadratureGrid;
    pub use crate::sensitivity::{
        assemble_form1, assemble_form2, nlp_gradients, solve_adjoints, solve_state, AdjointBundle,
        Form1Quantities, Form2Quantities, NlpGradients,
    };
}
