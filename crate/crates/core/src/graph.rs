//! Areal adjacency structure and the Laplacian algebra built on it.
//!
//! Sites are indexed `0..n_sites` internally. Edge files and the
//! [`AdjacencyGraph::from_one_based`] constructor use 1-based indices.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Symmetric binary adjacency over a connected set of areal units.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    n_sites: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    /// Builds a graph from 0-based unordered pairs. Duplicates (in either
    /// orientation) collapse to one edge.
    pub fn new(n_sites: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_sites < 2 {
            return Err(Error::TooFewSites(n_sites));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a == b || a >= n_sites || b >= n_sites {
                return Err(Error::InvalidEdge {
                    a: a + 1,
                    b: b + 1,
                    n_sites,
                });
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n_sites];
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        let graph = Self {
            n_sites,
            edges,
            neighbors,
        };
        // Any isolated site already splits the graph, so it is reported as
        // a disconnection.
        let components = graph.component_count();
        if components > 1 {
            return Err(Error::DisconnectedGraph { components });
        }
        Ok(graph)
    }

    /// Builds a graph from 1-based pairs, as stored in adjacency files.
    pub fn from_one_based(n_sites: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut zero_based = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == 0 || b == 0 {
                return Err(Error::InvalidEdge { a, b, n_sites });
            }
            zero_based.push((a - 1, b - 1));
        }
        Self::new(n_sites, &zero_based)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// Deduplicated 0-based edges with `a < b`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, site: usize) -> &[usize] {
        &self.neighbors[site]
    }

    /// m_i, the number of neighbors of each site.
    pub fn neighbor_counts(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    fn component_count(&self) -> usize {
        let mut seen = vec![false; self.n_sites];
        let mut components = 0;
        for start in 0..self.n_sites {
            if seen[start] {
                continue;
            }
            components += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(v) = stack.pop() {
                for &w in &self.neighbors[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        components
    }

    /// Dense D − W.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.n_sites, self.n_sites);
        for &(a, b) in &self.edges {
            l[(a, b)] -= 1.0;
            l[(b, a)] -= 1.0;
            l[(a, a)] += 1.0;
            l[(b, b)] += 1.0;
        }
        l
    }

    /// Greedy coloring: no two adjacent sites share a class.
    pub fn coloring(&self) -> Vec<Vec<usize>> {
        let mut color = vec![usize::MAX; self.n_sites];
        let mut classes: Vec<Vec<usize>> = Vec::new();
        for v in 0..self.n_sites {
            let used: BTreeSet<usize> = self.neighbors[v]
                .iter()
                .map(|&w| color[w])
                .filter(|&c| c != usize::MAX)
                .collect();
            let c = (0..).find(|c| !used.contains(c)).unwrap_or(0);
            color[v] = c;
            if c == classes.len() {
                classes.push(Vec::new());
            }
            classes[c].push(v);
        }
        classes
    }
}

/// Σ over edges of (z_i − z_j)ᵀ P (z_i − z_j), which equals
/// zᵀ ((D − W) ⊗ P) z for a site-major stacked field with block length q.
pub fn laplacian_quadratic_form(
    graph: &AdjacencyGraph,
    field: &[f64],
    inner_precision: &DMatrix<f64>,
) -> Result<f64> {
    let q = inner_precision.nrows();
    if inner_precision.ncols() != q {
        return Err(Error::DimensionMismatch {
            context: "inner precision (square)",
            expected: q,
            actual: inner_precision.ncols(),
        });
    }
    if field.len() != graph.n_sites() * q {
        return Err(Error::DimensionMismatch {
            context: "field length",
            expected: graph.n_sites() * q,
            actual: field.len(),
        });
    }
    let mut diff = DVector::zeros(q);
    let mut total = 0.0;
    for &(a, b) in graph.edges() {
        for c in 0..q {
            diff[c] = field[a * q + c] - field[b * q + c];
        }
        total += (inner_precision * &diff).dot(&diff);
    }
    Ok(total)
}

/// Eigendecomposition of D − W with eigenvalues in ascending order.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    pub eigenvalues: DVector<f64>,
    /// Column `j` is the unit eigenvector for `eigenvalues[j]`.
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralBasis {
    /// Zero threshold: |λ| < 1e-9 · max λ.
    pub fn zero_threshold(&self) -> f64 {
        1e-9 * self.eigenvalues.max().abs()
    }

    pub fn rank(&self) -> usize {
        let thr = self.zero_threshold();
        self.eigenvalues.iter().filter(|l| l.abs() >= thr).count()
    }

    /// Indices of the eigenpairs with nonzero eigenvalue.
    pub fn positive_indices(&self) -> Vec<usize> {
        let thr = self.zero_threshold();
        (0..self.eigenvalues.len())
            .filter(|&j| self.eigenvalues[j].abs() >= thr)
            .collect()
    }

    /// V Λ Vᵀ.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        v * DMatrix::from_diagonal(&self.eigenvalues) * v.transpose()
    }
}

pub fn spectral_basis(graph: &AdjacencyGraph) -> Result<SpectralBasis> {
    let eig = SymmetricEigen::try_new(graph.laplacian(), 1e-14, 0).ok_or(Error::EigenFailure)?;
    let n = graph.n_sites();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&j| eig.eigenvalues[j]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SpectralBasis {
        eigenvalues,
        eigenvectors,
    })
}
