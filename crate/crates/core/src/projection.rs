//! Weighted projection onto a finite set of basis functions, and the reading
//! of the parameter optimality condition as a projection identity.
//!
//! Functions are handled through their samples on a quadrature grid; a
//! function with values in `R^d` and `c` components is a `d × c` matrix per
//! node. A single-node grid with unit weight turns everything into plain
//! finite-dimensional linear algebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::param::{gram_min_eigenvalue, Parameterization};
use crate::problem::{check_spd, Gains, OcpProblem};
use crate::quadrature::{QuadNode, QuadratureGrid};
use crate::sensitivity::{quadrature_for, sample_nodes, AdjointBundle};

/// `⟨a, b⟩ = ∫ aᵀ W b dt` evaluated by quadrature.
#[derive(Clone, Debug)]
pub struct InnerProduct {
    pub grid: QuadratureGrid,
    weights: Vec<DMatrix<f64>>,
}

/// A function sampled on the nodes of an [`InnerProduct`].
pub type Sampled = Vec<DMatrix<f64>>;

impl InnerProduct {
    pub fn new(grid: QuadratureGrid, weight: impl Fn(f64) -> DMatrix<f64>) -> Result<Self> {
        let weights: Vec<_> = grid.nodes.iter().map(|n| weight(n.t)).collect();
        if let Some(first) = weights.first() {
            for w in &weights {
                if w.shape() != first.shape() {
                    return Err(Error::dim("weight", format!("{:?}", first.shape()), format!("{:?}", w.shape())));
                }
                check_spd(w, "W")?;
            }
        }
        Ok(Self { grid, weights })
    }

    /// Finite-dimensional inner product `aᵀWb`.
    pub fn finite(w: DMatrix<f64>) -> Result<Self> {
        Self::new(QuadratureGrid::point(0.0), move |_| w.clone())
    }

    pub fn sample(&self, f: impl Fn(&QuadNode) -> DMatrix<f64>) -> Sampled {
        self.grid.nodes.iter().map(f).collect()
    }

    /// Matrix of pairwise inner products of the columns of `a` and `b`.
    pub fn inner(&self, a: &Sampled, b: &Sampled) -> DMatrix<f64> {
        let (ca, cb) = (a[0].ncols(), b[0].ncols());
        let mut out = DMatrix::zeros(ca, cb);
        for ((node, w), (ak, bk)) in self.grid.nodes.iter().zip(&self.weights).zip(a.iter().zip(b)) {
            out += ak.tr_mul(&(w * bk)) * node.weight;
        }
        out
    }

    pub fn norm(&self, a: &Sampled) -> f64 {
        self.inner(a, a).trace().max(0.0).sqrt()
    }

    fn check(&self, a: &Sampled, what: &'static str) -> Result<()> {
        if a.len() != self.grid.len() {
            return Err(Error::dim(what, self.grid.len(), a.len()));
        }
        let d = self.weights[0].nrows();
        if let Some(bad) = a.iter().find(|v| v.nrows() != d || v.ncols() != a[0].ncols()) {
            return Err(Error::dim(what, format!("{d}x{}", a[0].ncols()), format!("{:?}", bad.shape())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Projection {
    /// `k × c` coordinates, one column per component of the projected function.
    pub coords: DMatrix<f64>,
    pub values: Sampled,
    pub gram: DMatrix<f64>,
}

/// Projects `f` onto the span of the columns of `basis`:
/// `coords = (∫AᵀWA)⁻¹∫AᵀWf`, values `A·coords`.
///
/// The coordinates come from a QR least-squares solve on the weighted
/// samples `√w·Lᵀ A` (`W = L Lᵀ`), which avoids squaring the condition
/// number of the basis.
pub fn project(ip: &InnerProduct, basis: &Sampled, f: &Sampled) -> Result<Projection> {
    ip.check(basis, "basis")?;
    ip.check(f, "function")?;
    let gram = ip.inner(basis, basis);
    let gram = (&gram + gram.transpose()) * 0.5;
    gram_min_eigenvalue(&gram)?;
    let d = ip.weights[0].nrows();
    let (k, c) = (basis[0].ncols(), f[0].ncols());
    let rows = d * ip.grid.len();
    let mut a = DMatrix::zeros(rows, k);
    let mut b = DMatrix::zeros(rows, c);
    for (i, ((node, w), (ak, fk))) in ip.grid.nodes.iter().zip(&ip.weights).zip(basis.iter().zip(f)).enumerate() {
        let lt = w.clone().cholesky().ok_or(Error::Rank { what: "W" })?.l().transpose() * node.weight.sqrt();
        a.view_mut((i * d, 0), (d, k)).copy_from(&(&lt * ak));
        b.view_mut((i * d, 0), (d, c)).copy_from(&(&lt * fk));
    }
    let qr = a.qr();
    let coords = qr
        .r()
        .solve_upper_triangular(&qr.q().tr_mul(&b))
        .ok_or(Error::Rank { what: "Gram matrix" })?;
    let values = basis.iter().map(|a| a * &coords).collect();
    Ok(Projection { coords, values, gram })
}

/// Deviations from the defining properties of an orthogonal projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionInvariants {
    /// `max |coords(P(P f)) − coords(P f)|`
    pub idempotence: f64,
    /// `max |⟨f − P f, a_i⟩|`
    pub orthogonality: f64,
    /// `|⟨f, f⟩ − ⟨P f, P f⟩ − ⟨f − P f, f − P f⟩|`
    pub pythagoras: f64,
}

impl ProjectionInvariants {
    pub fn worst(&self) -> f64 {
        self.idempotence.max(self.orthogonality).max(self.pythagoras)
    }
}

pub fn projection_invariants(ip: &InnerProduct, basis: &Sampled, f: &Sampled) -> Result<ProjectionInvariants> {
    let pf = project(ip, basis, f)?;
    let ppf = project(ip, basis, &pf.values)?;
    let resid: Sampled = f.iter().zip(&pf.values).map(|(a, b)| a - b).collect();
    let ff = ip.inner(f, f).trace();
    let pp = ip.inner(&pf.values, &pf.values).trace();
    let rr = ip.inner(&resid, &resid).trace();
    Ok(ProjectionInvariants {
        idempotence: (&ppf.coords - &pf.coords).amax(),
        orthogonality: ip.inner(basis, &resid).amax(),
        pythagoras: (ff - pp - rr).abs(),
    })
}

/// The two equivalent readings of the parameter optimality condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Theorem3Report {
    /// `‖Pro(p_u) + Pro(f_uᵀΨ)π‖` in the `K`-weighted norm.
    pub function_residual: f64,
    /// `‖M_p⁻¹(r_1p + Γ_1p π)‖`.
    pub coordinate_residual: f64,
    /// Coordinates of `Pro(p_u) + Pro(f_uᵀΨ)π` in the basis `K⁻¹u_p`.
    pub coords: DVector<f64>,
}

/// The `K`-weighted inner product on the quadrature grid of the iterate,
/// the basis `K⁻¹u_p` and the stationarity function `p_u + f_uᵀΨπ`.
pub fn stationarity_functions(
    prob: &OcpProblem,
    par: &Parameterization,
    bundle: &AdjointBundle,
    gains: &Gains,
    pi: &DVector<f64>,
    quad_nodes: usize,
) -> Result<(InnerProduct, Sampled, Sampled)> {
    if pi.len() != prob.dims().q {
        return Err(Error::dim("pi", prob.dims().q, pi.len()));
    }
    let grid = quadrature_for(par, bundle.tf, quad_nodes)?;
    let samples = sample_nodes(prob, par, bundle, gains, &grid)?;
    let k: Vec<DMatrix<f64>> = samples
        .iter()
        .map(|s| s.k_inv.clone().try_inverse().ok_or(Error::Rank { what: "K_inv" }))
        .collect::<Result<_>>()?;
    let ip = InnerProduct { grid, weights: k };
    let basis: Sampled = samples.iter().map(|s| &s.k_inv * &s.u_p).collect();
    let stationarity: Sampled = samples
        .iter()
        .map(|s| {
            let v = &s.p_u + &s.fu_psi * pi;
            DMatrix::from_column_slice(v.len(), 1, v.as_slice())
        })
        .collect();
    Ok((ip, basis, stationarity))
}

/// Projects `p_u` and `f_uᵀΨ` onto the span of the columns of `K⁻¹u_p` under
/// the `K`-weighted inner product. The Gram matrix of that basis is `M_p`
/// and its pairings with `p_u` and `f_uᵀΨ` are `r_1p` and `Γ_1p`, so the
/// coordinates of the projected stationarity function are `M_p⁻¹(r_1p + Γ_1p π)`.
pub fn theorem3_check(
    prob: &OcpProblem,
    par: &Parameterization,
    bundle: &AdjointBundle,
    gains: &Gains,
    pi: &DVector<f64>,
    quad_nodes: usize,
) -> Result<Theorem3Report> {
    let (ip, basis, stationarity) = stationarity_functions(prob, par, bundle, gains, pi, quad_nodes)?;
    let proj = project(&ip, &basis, &stationarity)?;
    let coords = proj.coords.column(0).into_owned();
    Ok(Theorem3Report {
        function_residual: ip.norm(&proj.values),
        coordinate_residual: coords.norm(),
        coords,
    })
}
