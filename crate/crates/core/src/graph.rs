//! Undirected graph storage, adjacency normalization and the sparse-dense
//! product every propagation step is built on.

use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::real::Real;

/// Undirected, unweighted graph in compressed-row form. Every edge is stored
/// in both directions; rows are sorted and free of duplicates and self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsrGraph {
    num_nodes: usize,
    num_edges: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    degrees: Vec<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub self_loops_dropped: usize,
    pub duplicates_merged: usize,
}

/// Builds the symmetrized CSR graph. Self-loops in the input are dropped
/// (a warning reports how many).
pub fn build_graph(edges: &[(u32, u32)], num_nodes: usize) -> Result<CsrGraph> {
    let (graph, stats) = build_graph_with_stats(edges, num_nodes)?;
    if stats.self_loops_dropped > 0 {
        warn!("dropped {} self-loop(s) from edge list", stats.self_loops_dropped);
    }
    Ok(graph)
}

pub fn build_graph_with_stats(
    edges: &[(u32, u32)],
    num_nodes: usize,
) -> Result<(CsrGraph, BuildStats)> {
    if num_nodes == 0 {
        return Err(Error::Input("graph must have at least one node".into()));
    }
    if num_nodes > u32::MAX as usize {
        return Err(Error::Input(format!("{num_nodes} nodes exceeds u32 id space")));
    }
    let mut stats = BuildStats::default();
    let mut directed: Vec<(u32, u32)> = Vec::with_capacity(edges.len() * 2);
    for &(u, v) in edges {
        if u as usize >= num_nodes || v as usize >= num_nodes {
            return Err(Error::Input(format!(
                "edge ({u}, {v}) has an endpoint outside 0..{num_nodes}"
            )));
        }
        if u == v {
            stats.self_loops_dropped += 1;
            continue;
        }
        directed.push((u, v));
        directed.push((v, u));
    }
    directed.sort_unstable();
    let before = directed.len();
    directed.dedup();
    stats.duplicates_merged = (before - directed.len()) / 2;

    let mut row_offsets = vec![0usize; num_nodes + 1];
    for &(u, _) in &directed {
        row_offsets[u as usize + 1] += 1;
    }
    for i in 0..num_nodes {
        row_offsets[i + 1] += row_offsets[i];
    }
    let degrees = (0..num_nodes)
        .map(|i| (row_offsets[i + 1] - row_offsets[i]) as u32)
        .collect();
    let col_indices = directed.into_iter().map(|(_, v)| v).collect::<Vec<_>>();

    let graph = CsrGraph {
        num_nodes,
        num_edges: col_indices.len() / 2,
        row_offsets,
        col_indices,
        degrees,
    };
    Ok((graph, stats))
}

impl CsrGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Undirected edge count `M`.
    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    /// Degree without the self-loop.
    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        (0..self.num_nodes)
            .flat_map(|u| {
                self.neighbors(u)
                    .iter()
                    .filter(move |&&v| (v as usize) > u)
                    .map(move |&v| (u as u32, v))
            })
            .collect()
    }

    /// Connected-component id per node (ids are dense, in order of first node).
    pub fn components(&self) -> (Vec<usize>, usize) {
        let mut comp = vec![usize::MAX; self.num_nodes];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.num_nodes {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = count;
            stack.push(start);
            while let Some(u) = stack.pop() {
                for &v in self.neighbors(u) {
                    let v = v as usize;
                    if comp[v] == usize::MAX {
                        comp[v] = count;
                        stack.push(v);
                    }
                }
            }
            count += 1;
        }
        (comp, count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyKind {
    /// r = 0.5
    Symmetric,
    /// r = 1, column-stochastic
    Transition,
    /// r = 0, row-stochastic
    ReverseTransition,
    Custom,
}

impl AdjacencyKind {
    pub fn of(r: f64) -> Self {
        if r == 0.5 {
            AdjacencyKind::Symmetric
        } else if r == 1.0 {
            AdjacencyKind::Transition
        } else if r == 0.0 {
            AdjacencyKind::ReverseTransition
        } else {
            AdjacencyKind::Custom
        }
    }
}

/// `D̃^(r-1) (A + I) D̃^(-r)` stored over the self-loop-augmented structure.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency<T> {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<T>,
    r: f64,
    kind: AdjacencyKind,
}

pub fn normalize<T: Real>(graph: &CsrGraph, r: f64) -> Result<NormalizedAdjacency<T>> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("normalization exponent r={r} outside [0, 1]")));
    }
    let n = graph.num_nodes;
    let deg: Vec<f64> = graph.degrees.iter().map(|&d| d as f64 + 1.0).collect();
    // The three named normalizations get exact closed forms; a product of two
    // fractional powers is off by an ulp (2^-1/2 · 2^-1/2 ≠ 1/2).
    let kind = AdjacencyKind::of(r);
    let entry = |i: usize, j: usize| -> f64 {
        match kind {
            AdjacencyKind::ReverseTransition => 1.0 / deg[i],
            AdjacencyKind::Transition => 1.0 / deg[j],
            AdjacencyKind::Symmetric => 1.0 / (deg[i] * deg[j]).sqrt(),
            AdjacencyKind::Custom => deg[i].powf(r - 1.0) * deg[j].powf(-r),
        }
    };

    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::with_capacity(graph.col_indices.len() + n);
    let mut values = Vec::with_capacity(graph.col_indices.len() + n);
    row_offsets.push(0);
    for i in 0..n {
        let mut self_done = false;
        for &j in graph.neighbors(i) {
            if !self_done && j as usize > i {
                col_indices.push(i as u32);
                values.push(T::lit(entry(i, i)));
                self_done = true;
            }
            col_indices.push(j);
            values.push(T::lit(entry(i, j as usize)));
        }
        if !self_done {
            col_indices.push(i as u32);
            values.push(T::lit(entry(i, i)));
        }
        row_offsets.push(col_indices.len());
    }

    Ok(NormalizedAdjacency {
        num_nodes: n,
        row_offsets,
        col_indices,
        values,
        r,
        kind,
    })
}

impl<T: Real> NormalizedAdjacency<T> {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn kind(&self) -> AdjacencyKind {
        self.kind
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Entry `(i, j)`, zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> T {
        let lo = self.row_offsets[i];
        let hi = self.row_offsets[i + 1];
        match self.col_indices[lo..hi].binary_search(&(j as u32)) {
            Ok(pos) => self.values[lo + pos],
            Err(_) => T::zero(),
        }
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.num_nodes, self.num_nodes);
        for i in 0..self.num_nodes {
            for p in self.row_offsets[i]..self.row_offsets[i + 1] {
                m[(i, self.col_indices[p] as usize)] = self.values[p];
            }
        }
        m
    }
}

/// `Â · X`. Output rows are computed in parallel; within a row the
/// accumulation runs over ascending column index in `f64`, so results do not
/// depend on thread scheduling.
pub fn spmm<T: Real>(adj: &NormalizedAdjacency<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    if x.rows() != adj.num_nodes {
        return Err(Error::Input(format!(
            "spmm: feature matrix has {} rows, graph has {} nodes",
            x.rows(),
            adj.num_nodes
        )));
    }
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    if d == 0 {
        return Ok(out);
    }
    out.row_chunks_mut()
        .enumerate()
        .for_each_init(
            || vec![0.0f64; d],
            |acc, (i, out_row)| {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for p in adj.row_offsets[i]..adj.row_offsets[i + 1] {
                    let w = adj.values[p].as_f64();
                    let src = x.row(adj.col_indices[p] as usize);
                    for (a, &v) in acc.iter_mut().zip(src) {
                        *a += w * v.as_f64();
                    }
                }
                for (o, &a) in out_row.iter_mut().zip(acc.iter()) {
                    *o = T::lit(a);
                }
            },
        );
    Ok(out)
}

/// Reads a `src<TAB>dst` edge list. Lines starting with `#` and blank lines
/// are skipped. Returns the edges and the largest node id seen plus one.
pub fn read_edge_list(path: &Path) -> Result<(Vec<(u32, u32)>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edge_list(&text).map_err(|lines| {
        Error::format(path, format!("unparseable edge lines: {}", lines.join("; ")))
    })
}

/// Edges and id bound, or every unparseable line.
type ParsedEdges = std::result::Result<(Vec<(u32, u32)>, usize), Vec<String>>;

fn parse_edge_list(text: &str) -> ParsedEdges {
    let mut edges = Vec::new();
    let mut bad = Vec::new();
    let mut max_id = None::<u32>;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let parsed = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => a.trim().parse::<u32>().ok().zip(b.trim().parse::<u32>().ok()),
            _ => None,
        };
        match parsed {
            Some((u, v)) => {
                max_id = Some(max_id.map_or(u.max(v), |m| m.max(u).max(v)));
                edges.push((u, v));
            }
            None => bad.push(format!("line {}: {line:?}", lineno + 1)),
        }
    }
    if bad.is_empty() {
        Ok((edges, max_id.map_or(0, |m| m as usize + 1)))
    } else {
        Err(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> CsrGraph {
        build_graph(&[(0, 1), (1, 2)], 3).unwrap()
    }

    #[test]
    fn single_edge_is_symmetrized() {
        let g = build_graph(&[(0, 1)], 2).unwrap();
        assert_eq!(g.row_offsets(), &[0, 1, 2]);
        assert_eq!(g.col_indices(), &[1, 0]);
        assert_eq!(g.degrees(), &[1, 1]);
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn duplicate_and_reversed_edges_collapse() {
        let a = build_graph(&[(0, 1)], 2).unwrap();
        let b = build_graph(&[(0, 1), (1, 0), (0, 1)], 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_graph() {
        let g = build_graph(&[], 3).unwrap();
        assert_eq!(g.row_offsets(), &[0, 0, 0, 0]);
        assert_eq!(g.degrees(), &[0, 0, 0]);
    }

    #[test]
    fn self_loops_are_dropped_and_counted() {
        let (g, stats) = build_graph_with_stats(&[(0, 0), (0, 1), (1, 1)], 2).unwrap();
        assert_eq!(stats.self_loops_dropped, 2);
        assert_eq!(g, build_graph(&[(0, 1)], 2).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(build_graph(&[(0, 3)], 3), Err(Error::Input(_))));
        assert!(matches!(build_graph(&[], 0), Err(Error::Input(_))));
    }

    #[test]
    fn normalize_rejects_exponent_out_of_range() {
        let g = path3();
        assert!(matches!(normalize::<f64>(&g, 1.5), Err(Error::Config(_))));
        assert!(matches!(normalize::<f64>(&g, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn two_node_symmetric_entries_are_half() {
        let g = build_graph(&[(0, 1)], 2).unwrap();
        let adj = normalize::<f64>(&g, 0.5).unwrap();
        let dense = adj.to_dense();
        for i in 0..2 {
            for j in 0..2 {
                assert!((dense[(i, j)] - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn path_transition_and_reverse_transition_entries() {
        let g = path3();
        let t = normalize::<f64>(&g, 1.0).unwrap();
        assert!((t.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        let rt = normalize::<f64>(&g, 0.0).unwrap();
        assert!((rt.get(0, 1) - 0.5).abs() < 1e-15);
        assert_eq!(t.kind(), AdjacencyKind::Transition);
        assert_eq!(rt.kind(), AdjacencyKind::ReverseTransition);
    }

    #[test]
    fn isolated_nodes_get_unit_self_loop() {
        let g = build_graph(&[(0, 1)], 3).unwrap();
        for r in [0.0, 0.3, 0.5, 1.0] {
            let adj = normalize::<f64>(&g, r).unwrap();
            assert_eq!(adj.get(2, 2), 1.0);
        }
    }

    #[test]
    fn spmm_on_empty_graph_is_identity() {
        let g = build_graph(&[], 4).unwrap();
        let adj = normalize::<f64>(&g, 0.5).unwrap();
        let x = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 - 2.5);
        assert_eq!(spmm(&adj, &x).unwrap(), x);
    }

    #[test]
    fn spmm_two_node_identity_input() {
        let g = build_graph(&[(0, 1)], 2).unwrap();
        let adj = normalize::<f64>(&g, 0.5).unwrap();
        let out = spmm(&adj, &Matrix::identity(2)).unwrap();
        assert_eq!(out, Matrix::filled(2, 2, 0.5));
    }

    #[test]
    fn spmm_zeros_and_shape_errors() {
        let g = path3();
        let adj = normalize::<f32>(&g, 0.5).unwrap();
        assert_eq!(spmm(&adj, &Matrix::zeros(3, 2)).unwrap(), Matrix::zeros(3, 2));
        assert!(matches!(spmm(&adj, &Matrix::zeros(2, 2)), Err(Error::Input(_))));
    }

    #[test]
    fn edge_list_parsing() {
        let (edges, n) = parse_edge_list("# header\n0\t1\n\n2\t1\n").unwrap();
        assert_eq!(edges, vec![(0, 1), (2, 1)]);
        assert_eq!(n, 3);
        let err = parse_edge_list("0\t1\n0 1\nx\t2\n").unwrap_err();
        assert_eq!(err.len(), 2);
        assert!(err[0].starts_with("line 2"));
    }
}
