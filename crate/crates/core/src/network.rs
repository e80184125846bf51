//! Graph and topology algebra for the microgrid: incidence matrix, electrical
//! and communication Laplacians, and the rating-weighted current-sharing
//! projector.
//!
//! All outputs are plain dense matrices; operations are pure functions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance on singular values for rank decisions, scaled by the
/// largest singular value.
pub const RANK_TOL: f64 = 1e-9;

/// One bidirectional communication link with weight `a_ij > 0`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CommLink {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Electrical and communication topology of the microgrid.
///
/// Lines carry an arbitrary assigned direction that only fixes the sign
/// convention for positive currents. Communication weights are symmetric by
/// construction (stored as undirected links).
#[derive(Debug, Clone, PartialEq)]
pub struct MicrogridTopology {
    pub n_dgus: usize,
    pub lines: Vec<(usize, usize)>,
    pub comm_links: Vec<CommLink>,
}

impl MicrogridTopology {
    pub fn new(n_dgus: usize, lines: Vec<(usize, usize)>, comm_links: Vec<CommLink>) -> Result<Self> {
        let topo = Self {
            n_dgus,
            lines,
            comm_links,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    /// Checks endpoint indices, self-loops, and weight signs. Connectivity is
    /// checked separately because primary-only operation of disconnected
    /// islands is legitimate.
    pub fn validate(&self) -> Result<()> {
        for (l, &(s, t)) in self.lines.iter().enumerate() {
            if s >= self.n_dgus || t >= self.n_dgus {
                return Err(Error::InvalidTopology(format!(
                    "line {l} endpoint out of range ({s}, {t}) with {} nodes",
                    self.n_dgus
                )));
            }
            if s == t {
                return Err(Error::InvalidTopology(format!("line {l} is a self-loop at node {s}")));
            }
        }
        for link in &self.comm_links {
            if link.a >= self.n_dgus || link.b >= self.n_dgus {
                return Err(Error::InvalidTopology(format!(
                    "communication link ({}, {}) out of range",
                    link.a, link.b
                )));
            }
            if link.a == link.b {
                return Err(Error::InvalidTopology(format!(
                    "communication self-loop at node {}",
                    link.a
                )));
            }
            if link.weight < 0.0 || !link.weight.is_finite() {
                return Err(Error::BadCommWeights(format!(
                    "weight a_({},{}) = {}",
                    link.a, link.b, link.weight
                )));
            }
        }
        Ok(())
    }

    /// Symmetric N x N matrix of communication weights.
    pub fn comm_weight_matrix(&self) -> DMatrix<f64> {
        let n = self.n_dgus;
        let mut w = DMatrix::zeros(n, n);
        for link in &self.comm_links {
            w[(link.a, link.b)] += link.weight;
            w[(link.b, link.a)] += link.weight;
        }
        w
    }

    pub fn electrical_connected(&self) -> bool {
        let mut uf = UnionFind::new(self.n_dgus);
        for &(s, t) in &self.lines {
            uf.union(s, t);
        }
        uf.n_components() == 1
    }

    pub fn comm_connected(&self) -> bool {
        let mut uf = UnionFind::new(self.n_dgus);
        for link in &self.comm_links {
            if link.weight > 0.0 {
                uf.union(link.a, link.b);
            }
        }
        uf.n_components() == 1
    }
}

/// Node incidence matrix B (N x M): +1 at the source of a line, -1 at the sink.
pub fn incidence_matrix(topology: &MicrogridTopology) -> Result<DMatrix<f64>> {
    topology.validate()?;
    let n = topology.n_dgus;
    let m = topology.n_lines();
    let mut b = DMatrix::zeros(n, m);
    for (l, &(s, t)) in topology.lines.iter().enumerate() {
        b[(s, l)] = 1.0;
        b[(t, l)] = -1.0;
    }
    Ok(b)
}

/// Electrical Laplacian L_e = B R^-1 B^T, with R the diagonal matrix of line
/// resistances.
pub fn electrical_laplacian(b: &DMatrix<f64>, resistances: &DVector<f64>) -> Result<DMatrix<f64>> {
    let m = b.ncols();
    if resistances.len() != m {
        return Err(Error::DimensionMismatch {
            what: "line resistances",
            expected: m,
            got: resistances.len(),
        });
    }
    for (l, &r) in resistances.iter().enumerate() {
        if r <= 0.0 || !r.is_finite() {
            return Err(Error::NonPositive {
                name: "line resistance",
                value: r,
            });
        }
        let _ = l;
    }
    let mut scaled = b.clone();
    for l in 0..m {
        let g = 1.0 / resistances[l];
        scaled.column_mut(l).scale_mut(g);
    }
    Ok(&scaled * b.transpose())
}

/// Weighted graph Laplacian from a symmetric weight matrix. The diagonal is
/// accumulated in the same order as the off-diagonal sums so that row sums
/// cancel exactly in floating point.
pub fn laplacian_from_weights(weights: &DMatrix<f64>) -> DMatrix<f64> {
    let n = weights.nrows();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut degree = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = weights[(i, j)];
            degree += w;
            l[(i, j)] = -w;
        }
        l[(i, i)] = degree;
    }
    l
}

/// Communication Laplacian L_c over the weight map. Requires symmetric
/// nonnegative weights and a connected communication graph.
pub fn comm_laplacian(weights: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = weights.nrows();
    if weights.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "communication weights",
            expected: n,
            got: weights.ncols(),
        });
    }
    for i in 0..n {
        for j in 0..n {
            let w = weights[(i, j)];
            if w < 0.0 || !w.is_finite() {
                return Err(Error::BadCommWeights(format!("a_({i},{j}) = {w}")));
            }
            if (w - weights[(j, i)]).abs() > 0.0 {
                return Err(Error::BadCommWeights(format!(
                    "a_({i},{j}) = {w} != a_({j},{i}) = {}",
                    weights[(j, i)]
                )));
            }
        }
    }
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if weights[(i, j)] > 0.0 {
                uf.union(i, j);
            }
        }
    }
    if uf.n_components() != 1 {
        return Err(Error::Disconnected {
            graph: "communication",
        });
    }
    Ok(laplacian_from_weights(weights))
}

/// Rating-weighted current-sharing projector
/// L_t = [I_s] - (1^T [I_s] 1)^-1 [I_s] 1 1^T [I_s].
///
/// Symmetric, PSD, and annihilates the all-ones vector.
pub fn sharing_projector(ratings: &DVector<f64>) -> Result<DMatrix<f64>> {
    for &r in ratings.iter() {
        if r <= 0.0 || !r.is_finite() {
            return Err(Error::NonPositive {
                name: "rated current",
                value: r,
            });
        }
    }
    let n = ratings.len();
    let total: f64 = ratings.sum();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let rank1 = ratings[i] * ratings[j] / total;
            l[(i, j)] = if i == j { ratings[i] - rank1 } else { -rank1 };
        }
    }
    Ok(l)
}

/// Numerical rank via singular values, relative tolerance scaled by the
/// largest singular value.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let svd = m.clone().svd(false, false);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if max_sv == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&s| s > RANK_TOL * max_sv)
        .count()
}

/// Disjoint-set forest used for connectivity checks at config validation and
/// after every topology event.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            self.parent[ra] = rb;
        }
    }

    pub fn connected(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }

    pub fn n_components(&mut self) -> usize {
        let n = self.parent.len();
        let mut roots = vec![false; n];
        for x in 0..n {
            let r = self.find(x);
            roots[r] = true;
        }
        roots.iter().filter(|&&b| b).count()
    }
}
