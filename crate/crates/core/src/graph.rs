//! Small-area adjacency graphs.
//!
//! Node indices are stable: they follow the roster (or first appearance in an
//! edge file) and are the indices used for ψ, φ and γ in the model.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::{Error, Result};

/// Undirected 0/1 neighbourhood structure.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    names: Vec<String>,
    /// Normalized edges with `node1 < node2`, sorted, no duplicates.
    edges: Vec<(usize, usize)>,
    degrees: Vec<usize>,
}

impl AdjacencyGraph {
    /// Builds a graph, normalizing and deduplicating the edges.
    pub fn new(names: Vec<String>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let l = names.len();
        let mut norm = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::Graph(format!("self-loop on node '{}'", names.get(a).map_or("?", |s| s.as_str()))));
            }
            if a >= l || b >= l {
                return Err(Error::Graph(format!("edge ({a}, {b}) references a node outside 0..{l}")));
            }
            norm.push((a.min(b), a.max(b)));
        }
        norm.sort_unstable();
        norm.dedup();
        let mut degrees = vec![0; l];
        for &(a, b) in &norm {
            degrees[a] += 1;
            degrees[b] += 1;
        }
        Ok(AdjacencyGraph { names, edges: norm, degrees })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Dense graph Laplacian `D - W`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let l = self.len();
        let mut q = DMatrix::zeros(l, l);
        for (i, &d) in self.degrees.iter().enumerate() {
            q[(i, i)] = d as f64;
        }
        for &(a, b) in &self.edges {
            q[(a, b)] = -1.0;
            q[(b, a)] = -1.0;
        }
        q
    }

    /// Dense 0/1 adjacency matrix.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let l = self.len();
        let mut w = DMatrix::zeros(l, l);
        for &(a, b) in &self.edges {
            w[(a, b)] = 1.0;
            w[(b, a)] = 1.0;
        }
        w
    }

    /// Neighbour lists.
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Returns a graph with nodes reordered so that new node `k` is old node
    /// `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut new_of_old = vec![usize::MAX; self.len()];
        for (new, &old) in order.iter().enumerate() {
            new_of_old[old] = new;
        }
        if order.len() != self.len() || new_of_old.contains(&usize::MAX) {
            return Err(Error::Graph("node order is not a permutation".into()));
        }
        let names = order.iter().map(|&o| self.names[o].clone()).collect();
        AdjacencyGraph::new(names, self.edges.iter().map(|&(a, b)| (new_of_old[a], new_of_old[b])))
    }

    /// Induced subgraph on `nodes` (in the given order).
    pub fn subgraph(&self, nodes: &[usize]) -> Result<Self> {
        let mut new_of_old = HashMap::new();
        for (k, &n) in nodes.iter().enumerate() {
            new_of_old.insert(n, k);
        }
        let names = nodes.iter().map(|&n| self.names[n].clone()).collect();
        let edges = self.edges.iter().filter_map(|(a, b)| Some((*new_of_old.get(a)?, *new_of_old.get(b)?)));
        AdjacencyGraph::new(names, edges)
    }

    /// Fails unless the graph is a single component with at least two nodes.
    pub fn ensure_connected(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::Graph("an ICAR graph needs at least two nodes".into()));
        }
        let comps = connected_components(self);
        if comps.len() > 1 {
            let sizes: Vec<usize> = comps.iter().map(Vec::len).collect();
            return Err(Error::Graph(format!(
                "graph is disconnected: {} components with sizes {sizes:?}",
                comps.len()
            )));
        }
        Ok(())
    }
}

/// Reads an `idA,idB` edge list. Blank lines and `#` comments are skipped.
///
/// With a roster, node order follows the roster and unknown ids are errors;
/// without one, nodes are indexed in order of first appearance.
pub fn load_edge_list(path: &Path, roster: Option<&[String]>) -> Result<AdjacencyGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut names: Vec<String> = roster.map(<[String]>::to_vec).unwrap_or_default();
    let mut index: HashMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    if index.len() != names.len() {
        return Err(Error::Graph("roster contains duplicate ids".into()));
    }
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split([',', '\t']).map(str::trim);
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Graph(format!("{}:{}: expected 'idA,idB'", path.display(), lineno + 1)));
        };
        if a == b {
            return Err(Error::Graph(format!("{}:{}: self-loop on '{a}'", path.display(), lineno + 1)));
        }
        let mut idx = |id: &str| -> Result<usize> {
            if let Some(&i) = index.get(id) {
                return Ok(i);
            }
            if roster.is_some() {
                return Err(Error::Graph(format!(
                    "{}:{}: node '{id}' is not on the roster",
                    path.display(),
                    lineno + 1
                )));
            }
            names.push(id.to_string());
            index.insert(id.to_string(), names.len() - 1);
            Ok(names.len() - 1)
        };
        let ia = idx(a)?;
        let ib = idx(b)?;
        edges.push((ia, ib));
    }
    AdjacencyGraph::new(names, edges)
}

/// Reads a roster file: one node id per line.
pub fn load_roster(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Four-neighbour lattice with row-major node order and names `1..=rows*cols`.
pub fn grid_graph(rows: usize, cols: usize) -> Result<AdjacencyGraph> {
    if rows * cols < 2 {
        return Err(Error::Graph(format!("a {rows}x{cols} lattice has fewer than two nodes")));
    }
    let id = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::with_capacity(2 * rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((id(r, c), id(r, c + 1)));
            }
            if r + 1 < rows {
                edges.push((id(r, c), id(r + 1, c)));
            }
        }
    }
    let names = (1..=rows * cols).map(|k| k.to_string()).collect();
    AdjacencyGraph::new(names, edges)
}

/// Connected components via breadth-first search, each sorted, ordered by
/// smallest member.
pub fn connected_components(graph: &AdjacencyGraph) -> Vec<Vec<usize>> {
    let adj = graph.neighbours();
    let mut seen = vec![false; graph.len()];
    let mut comps = Vec::new();
    for start in 0..graph.len() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    comp.push(v);
                    queue.push_back(v);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Eigendecomposition of the Laplacian of a connected graph with the single
/// null direction identified.
#[derive(Debug, Clone)]
pub struct LaplacianSpectrum {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    /// Index of the dropped (near-)zero eigenvalue.
    pub null_index: usize,
}

impl LaplacianSpectrum {
    pub fn new(graph: &AdjacencyGraph) -> Result<Self> {
        graph.ensure_connected()?;
        let eig = SymmetricEigen::new(graph.laplacian());
        let lmax = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let threshold = 1e-9 * lmax;
        let null: Vec<usize> = (0..graph.len()).filter(|&k| eig.eigenvalues[k].abs() < threshold).collect();
        if null.len() != 1 {
            return Err(Error::Graph(format!(
                "expected one null eigenvalue, found {}",
                null.len()
            )));
        }
        Ok(LaplacianSpectrum { eigenvalues: eig.eigenvalues, eigenvectors: eig.eigenvectors, null_index: null[0] })
    }

    /// Generalized inverse restricted to the sum-to-zero subspace.
    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        let l = self.eigenvalues.len();
        let mut out = DMatrix::zeros(l, l);
        for k in (0..l).filter(|&k| k != self.null_index) {
            let v = self.eigenvectors.column(k);
            out += (v * v.transpose()) / self.eigenvalues[k];
        }
        out
    }

    /// Draws from the sum-to-zero Gaussian with precision `D - W`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let l = self.eigenvalues.len();
        let mut x = DVector::zeros(l);
        for k in (0..l).filter(|&k| k != self.null_index) {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            x += self.eigenvectors.column(k) * (z / self.eigenvalues[k].sqrt());
        }
        let m = x.mean();
        x.iter().map(|v| v - m).collect()
    }
}

/// BYM2 scaling factor: geometric mean of the marginal ICAR variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFactor(pub f64);

impl ScalingFactor {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `s = exp(mean(log(diag(Q⁺))))` with `Q = D - W`.
pub fn scaling_factor(graph: &AdjacencyGraph) -> Result<ScalingFactor> {
    let q_plus = LaplacianSpectrum::new(graph)?.pseudo_inverse();
    let l = graph.len();
    let mean_log = (0..l).map(|i| q_plus[(i, i)].ln()).sum::<f64>() / l as f64;
    Ok(ScalingFactor(mean_log.exp()))
}

/// Global Moran's I with unnormalized binary weights.
pub fn morans_i(values: &[f64], graph: &AdjacencyGraph) -> Result<f64> {
    if values.len() != graph.len() {
        return Err(Error::Graph(format!(
            "{} values for a graph with {} nodes",
            values.len(),
            graph.len()
        )));
    }
    if values.len() < 2 || graph.edges().is_empty() {
        return Err(Error::Graph("Moran's I needs two values and at least one edge".into()));
    }
    let m = crate::math::mean(values);
    let z: Vec<f64> = values.iter().map(|v| v - m).collect();
    let denom: f64 = z.iter().map(|v| v * v).sum();
    if denom <= f64::EPSILON * values.len() as f64 * m.abs().max(1.0) {
        return Err(Error::Graph("Moran's I is undefined for constant values".into()));
    }
    let cross: f64 = graph.edges().iter().map(|&(a, b)| 2.0 * z[a] * z[b]).sum();
    let w_sum = 2.0 * graph.edges().len() as f64;
    Ok(values.len() as f64 / w_sum * cross / denom)
}

/// Moran's I over individuals, where two individuals are neighbours when their
/// areas are adjacent in `graph`.
pub fn morans_i_individuals(values: &[f64], area: &[usize], graph: &AdjacencyGraph) -> Result<f64> {
    if values.len() != area.len() || values.len() < 2 {
        return Err(Error::Graph("need matching values and area ids, at least two".into()));
    }
    let m = crate::math::mean(values);
    let mut sums = vec![0.0; graph.len()];
    let mut counts = vec![0.0; graph.len()];
    let mut denom = 0.0;
    for (&v, &a) in values.iter().zip(area) {
        if a >= graph.len() {
            return Err(Error::Graph(format!("area index {a} outside graph")));
        }
        sums[a] += v - m;
        counts[a] += 1.0;
        denom += (v - m) * (v - m);
    }
    if denom == 0.0 {
        return Err(Error::Graph("Moran's I is undefined for constant values".into()));
    }
    let cross: f64 = graph.edges().iter().map(|&(a, b)| 2.0 * sums[a] * sums[b]).sum();
    let w_sum: f64 = graph.edges().iter().map(|&(a, b)| 2.0 * counts[a] * counts[b]).sum();
    if w_sum == 0.0 {
        return Err(Error::Graph("no neighbouring pairs among the individuals".into()));
    }
    Ok(values.len() as f64 / w_sum * cross / denom)
}

/// Expected Moran's I under the null of no autocorrelation.
pub fn morans_i_null_expectation(n: usize) -> f64 {
    -1.0 / (n as f64 - 1.0)
}

/// Randomization distribution of Moran's I.
#[derive(Debug, Clone, Copy)]
pub struct MoranPermutation {
    pub observed: f64,
    pub null_mean: f64,
    pub null_sd: f64,
    /// Two-sided permutation p-value.
    pub p_value: f64,
}

pub fn morans_i_permutation<R: Rng + ?Sized>(
    values: &[f64],
    graph: &AdjacencyGraph,
    n_perm: usize,
    rng: &mut R,
) -> Result<MoranPermutation> {
    use rand::seq::SliceRandom;
    let observed = morans_i(values, graph)?;
    let mut v = values.to_vec();
    let mut stats = Vec::with_capacity(n_perm);
    for _ in 0..n_perm {
        v.shuffle(rng);
        stats.push(morans_i(&v, graph)?);
    }
    let null_mean = crate::math::mean(&stats);
    let null_sd = crate::math::sd(&stats);
    let extreme = stats
        .iter()
        .filter(|&&s| (s - null_mean).abs() >= (observed - null_mean).abs())
        .count();
    Ok(MoranPermutation {
        observed,
        null_mean,
        null_sd,
        p_value: (extreme + 1) as f64 / (n_perm + 1) as f64,
    })
}
