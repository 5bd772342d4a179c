//! Composite Simpson quadrature on `[t0, t_f]`, split at parameterization
//! knots so that every panel sees a smooth integrand.

use crate::error::{Error, Result};

pub const DEFAULT_QUAD_NODES: usize = 201;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadNode {
    pub t: f64,
    pub weight: f64,
    /// Smooth interval the node belongs to. Knots shared by two intervals
    /// appear twice, once per side.
    pub seg: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureGrid {
    pub nodes: Vec<QuadNode>,
}

impl QuadratureGrid {
    /// Uniform composite Simpson rule with (about) `n_nodes` nodes over the
    /// intervals delimited by `knots`. Each interval gets an even number of
    /// panels, at least two.
    pub fn simpson(knots: &[f64], n_nodes: usize) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Config("quadrature needs at least one interval".into()));
        }
        if n_nodes < 3 {
            return Err(Error::Config(format!("quadrature needs at least 3 nodes, got {n_nodes}")));
        }
        let segs = knots.len() - 1;
        let per = ((n_nodes - 1) as f64 / segs as f64).round() as usize;
        let panels = (per + per % 2).max(2);
        let mut nodes = Vec::with_capacity(segs * (panels + 1));
        for (seg, w) in knots.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            if !(b > a) {
                return Err(Error::Config(format!("quadrature knots must increase: {a} then {b}")));
            }
            let h = (b - a) / panels as f64;
            for i in 0..=panels {
                let t = if i == panels { b } else { a + h * i as f64 };
                let c = if i == 0 || i == panels {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                nodes.push(QuadNode {
                    t,
                    weight: c * h / 3.0,
                    seg,
                });
            }
        }
        Ok(Self { nodes })
    }

    /// Single-node "grid" with unit weight: turns integrals into plain
    /// finite-dimensional inner products.
    pub fn point(t: f64) -> Self {
        Self {
            nodes: vec![QuadNode { t, weight: 1.0, seg: 0 }],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().map(|n| n.weight * f(n.t)).sum()
    }
}
