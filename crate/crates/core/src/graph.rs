//! Areal adjacency graphs and CAR precision matrices.
//!
//! An [`AdjacencyGraph`] stores a validated, symmetric neighbor structure;
//! [`car_precision`] assembles the conditional autoregressive precision
//! `tau * (D - phi * W)` where `D = diag(|neighbors(i)|)` and `W` is the 0/1
//! adjacency matrix.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skyline::{reverse_cuthill_mckee, SkylineMatrix};

/// Validated undirected adjacency structure on nodes `0..n`.
///
/// Invariants enforced at construction: neighbor lists are sorted and
/// deduplicated, symmetric, contain no self-loops, every index is in range,
/// and no node is isolated (a zero-degree node makes the CAR conditionals
/// undefined, so it is rejected here rather than downstream).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyGraph {
    n: usize,
    neighbors: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    /// Builds a graph from raw neighbor lists, validating all invariants.
    pub fn new(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        if n == 0 {
            return Err(Error::InvalidGraph("graph has no nodes".into()));
        }
        let mut cleaned = Vec::with_capacity(n);
        for (i, list) in neighbors.iter().enumerate() {
            let mut set = BTreeSet::new();
            for &j in list {
                if j >= n {
                    return Err(Error::InvalidGraph(format!(
                        "node {i} lists neighbor {j} outside 0..{n}"
                    )));
                }
                if j == i {
                    return Err(Error::InvalidGraph(format!("node {i} lists itself")));
                }
                set.insert(j);
            }
            cleaned.push(set.into_iter().collect::<Vec<_>>());
        }
        for i in 0..n {
            for &j in &cleaned[i] {
                if cleaned[j].binary_search(&i).is_err() {
                    return Err(Error::InvalidGraph(format!(
                        "edge ({i}, {j}) is not symmetric"
                    )));
                }
            }
            if cleaned[i].is_empty() {
                return Err(Error::InvalidGraph(format!(
                    "node {i} is isolated; CAR precision would be singular"
                )));
            }
        }
        Ok(Self { n, neighbors: cleaned })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.degree(i) as f64).collect()
    }

    /// Edges as (i, j) pairs with i < j.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for &j in &self.neighbors[i] {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(|l| l.len()).sum::<usize>() / 2
    }

    /// Fill-reducing node ordering for envelope factorizations.
    pub fn rcm_order(&self) -> Vec<usize> {
        reverse_cuthill_mckee(self.n, |i| self.neighbors[i].iter().copied())
    }
}

/// `(tau, phi)` pair of a CAR block: precision scale and spatial dependence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarParams {
    pub tau: f64,
    pub phi: f64,
}

impl CarParams {
    pub fn new(tau: f64, phi: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        if !(phi.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!("|phi| must be < 1, got {phi}")));
        }
        Ok(Self { tau, phi })
    }
}

/// Sparse symmetric matrix stored as upper-triangle triplets (row <= col),
/// one entry per symmetric pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSymMatrix {
    dim: usize,
    triplets: Vec<(usize, usize, f64)>,
}

impl SparseSymMatrix {
    pub fn new(dim: usize) -> Self {
        Self { dim, triplets: Vec::new() }
    }

    /// Inserts a symmetric entry; `(i, j)` and `(j, i)` are the same slot.
    pub fn push(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.dim && j < self.dim);
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        self.triplets.push((r, c, value));
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stored (row, col, value) triplets with row <= col.
    pub fn triplets(&self) -> &[(usize, usize, f64)] {
        &self.triplets
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        let dim = m.nrows();
        let mut out = Self::new(dim);
        for i in 0..dim {
            for j in i..dim {
                if m[(i, j)] != 0.0 {
                    out.push(i, j, m[(i, j)]);
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(i, j, v) in &self.triplets {
            m[(i, j)] += v;
            if i != j {
                m[(j, i)] += v;
            }
        }
        m
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        for &(i, j, v) in &self.triplets {
            if i == j {
                d[i] += v;
            }
        }
        d
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.dim];
        for &(i, j, v) in &self.triplets {
            s[i] += v;
            if i != j {
                s[j] += v;
            }
        }
        s
    }

    /// y = M x using the symmetric structure.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        let mut y = vec![0.0; self.dim];
        for &(i, j, v) in &self.triplets {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }

    /// x' M x.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        let mut q = 0.0;
        for &(i, j, v) in &self.triplets {
            if i == j {
                q += v * x[i] * x[i];
            } else {
                q += 2.0 * v * x[i] * x[j];
            }
        }
        q
    }
}

/// Ring graph: node `i` adjacent to `(i ± 1) mod n`. Requires `n >= 3`.
pub fn ring(n: usize) -> Result<AdjacencyGraph> {
    if n < 3 {
        return Err(Error::InvalidGraph(format!("ring needs n >= 3, got {n}")));
    }
    let neighbors = (0..n)
        .map(|i| {
            let mut l = vec![(i + n - 1) % n, (i + 1) % n];
            l.sort_unstable();
            l.dedup();
            l
        })
        .collect();
    AdjacencyGraph::new(neighbors)
}

/// Regular grid with rook (4-neighbor) adjacency, row-major node ids.
pub fn grid(rows: usize, cols: usize) -> Result<AdjacencyGraph> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidGraph("grid dimensions must be positive".into()));
    }
    if rows * cols < 2 {
        return Err(Error::InvalidGraph("1x1 grid has an isolated node".into()));
    }
    let idx = |r: usize, c: usize| r * cols + c;
    let mut neighbors = vec![Vec::new(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut l = Vec::with_capacity(4);
            if r > 0 {
                l.push(idx(r - 1, c));
            }
            if r + 1 < rows {
                l.push(idx(r + 1, c));
            }
            if c > 0 {
                l.push(idx(r, c - 1));
            }
            if c + 1 < cols {
                l.push(idx(r, c + 1));
            }
            l.sort_unstable();
            neighbors[idx(r, c)] = l;
        }
    }
    AdjacencyGraph::new(neighbors)
}

/// Builds a graph from an undirected edge list; duplicates and reversed
/// duplicates collapse to a single edge.
pub fn from_edge_list(n: usize, edges: &[(usize, usize)]) -> Result<AdjacencyGraph> {
    let mut neighbors = vec![Vec::new(); n];
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::InvalidGraph(format!(
                "edge ({i}, {j}) out of range for n = {n}"
            )));
        }
        if i == j {
            return Err(Error::InvalidGraph(format!("self-loop at node {i}")));
        }
        neighbors[i].push(j);
        neighbors[j].push(i);
    }
    AdjacencyGraph::new(neighbors)
}

/// CAR precision `tau * (D - phi * W)` as a sparse symmetric matrix.
pub fn car_precision(g: &AdjacencyGraph, p: CarParams) -> Result<SparseSymMatrix> {
    CarParams::new(p.tau, p.phi)?;
    let mut m = SparseSymMatrix::new(g.n());
    for i in 0..g.n() {
        let deg = g.degree(i);
        if deg == 0 {
            return Err(Error::DegeneratePrecision(format!("node {i} has degree 0")));
        }
        m.push(i, i, p.tau * deg as f64);
        for &j in g.neighbors(i) {
            if i < j {
                m.push(i, j, -p.tau * p.phi);
            }
        }
    }
    Ok(m)
}

/// True iff a symmetric factorization of `m` succeeds with strictly positive
/// pivots. Densifies below [`DENSE_THRESHOLD`], otherwise uses an envelope
/// Cholesky with a fill-reducing ordering.
pub fn is_positive_definite(m: &SparseSymMatrix) -> bool {
    if m.dim() <= DENSE_THRESHOLD {
        nalgebra::Cholesky::new(m.to_dense()).is_some()
    } else {
        SkylineMatrix::from_sparse(m).factorize_logdet().is_some()
    }
}

/// Log-determinant of a symmetric positive definite sparse matrix, or `None`
/// if the factorization fails.
pub fn log_det_spd(m: &SparseSymMatrix) -> Option<f64> {
    if m.dim() <= DENSE_THRESHOLD {
        nalgebra::Cholesky::new(m.to_dense())
            .map(|ch| 2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
    } else {
        SkylineMatrix::from_sparse(m).factorize_logdet()
    }
}

/// Problem size below which factorizations densify; desk-scale problems are
/// tractable dense and the dense path has less overhead.
pub const DENSE_THRESHOLD: usize = 512;

/// Reads an undirected edge list CSV with header `src,dst`. String ids are
/// mapped to contiguous indices in order of first appearance; the id map is
/// returned alongside the graph.
pub fn read_edge_list_csv<R: Read>(reader: R) -> Result<(AdjacencyGraph, Vec<String>)> {
    let mut ids: Vec<String> = Vec::new();
    let mut index = std::collections::HashMap::new();
    let mut edges = Vec::new();
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let (si, di) = (
        headers.iter().position(|h| h.trim() == "src"),
        headers.iter().position(|h| h.trim() == "dst"),
    );
    let (si, di) = match (si, di) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InvalidData("edge list needs `src,dst` header".into())),
    };
    for rec in rdr.records() {
        let rec = rec?;
        let mut id_of = |s: &str| -> usize {
            let s = s.trim().to_string();
            *index.entry(s.clone()).or_insert_with(|| {
                ids.push(s);
                ids.len() - 1
            })
        };
        let a = id_of(rec.get(si).unwrap_or(""));
        let b = id_of(rec.get(di).unwrap_or(""));
        edges.push((a, b));
    }
    let g = from_edge_list(ids.len(), &edges)?;
    Ok((g, ids))
}

/// Writes a graph as an edge-list CSV (`src,dst`, numeric ids).
pub fn write_edge_list_csv<W: Write>(g: &AdjacencyGraph, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["src", "dst"])?;
    for (i, j) in g.edges() {
        wtr.write_record([i.to_string(), j.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
