//! Spatial graphs, graph shift operators and the message-passing matrix.
//!
//! Adjacency entry `(u, v)` is the weight of the edge carrying information
//! from node `u` to node `v`. Undirected graphs store each edge once and
//! expand it to both directions in [`SpatialGraph::adjacency`].

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::matrix_power;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid graph size: {0}")]
    InvalidSize(String),
    #[error("node {node} out of range for {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("edge ({0}, {1}) has a negative or non-finite weight")]
    BadWeight(usize, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGraph {
    num_nodes: usize,
    directed: bool,
    edges: Vec<(usize, usize, f64)>,
}

impl SpatialGraph {
    pub fn new(
        num_nodes: usize,
        directed: bool,
        edges: Vec<(usize, usize, f64)>,
    ) -> Result<Self, GraphError> {
        if num_nodes == 0 {
            return Err(GraphError::InvalidSize("graph needs at least one node".into()));
        }
        let mut seen = HashSet::new();
        for &(u, v, w) in &edges {
            for node in [u, v] {
                if node >= num_nodes {
                    return Err(GraphError::NodeOutOfRange { node, num_nodes });
                }
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(GraphError::BadWeight(u, v));
            }
            let key = if directed { (u, v) } else { (u.min(v), u.max(v)) };
            if !seen.insert(key) {
                return Err(GraphError::DuplicateEdge(u, v));
            }
        }
        Ok(Self {
            num_nodes,
            directed,
            edges,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Number of nonzero adjacency entries, i.e. messages sent per layer.
    pub fn num_messages(&self) -> usize {
        self.edges
            .iter()
            .map(|&(u, v, _)| if self.directed || u == v { 1 } else { 2 })
            .sum()
    }

    pub fn adjacency(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.num_nodes, self.num_nodes));
        for &(u, v, w) in &self.edges {
            a[[u, v]] = w;
            if !self.directed {
                a[[v, u]] = w;
            }
        }
        a
    }

    fn out_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.num_nodes];
        for &(u, v, _) in &self.edges {
            lists[u].push(v);
            if !self.directed && u != v {
                lists[v].push(u);
            }
        }
        lists
    }

    fn check_node(&self, node: usize) -> Result<(), GraphError> {
        if node >= self.num_nodes {
            Err(GraphError::NodeOutOfRange {
                node,
                num_nodes: self.num_nodes,
            })
        } else {
            Ok(())
        }
    }

    /// Hop distances from `source`, ignoring weights; `None` for unreachable nodes.
    pub fn distances_from(&self, source: usize) -> Result<Vec<Option<usize>>, GraphError> {
        self.check_node(source)?;
        let lists = self.out_lists();
        let mut dist = vec![None; self.num_nodes];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let next = dist[u].unwrap() + 1;
            for &v in &lists[u] {
                if dist[v].is_none() {
                    dist[v] = Some(next);
                    queue.push_back(v);
                }
            }
        }
        Ok(dist)
    }

    /// Nodes at hop distance exactly `k` from `v`; `{v}` for `k = 0`.
    pub fn k_hop_set(&self, v: usize, k: usize) -> Result<BTreeSet<usize>, GraphError> {
        Ok(self
            .distances_from(v)?
            .into_iter()
            .enumerate()
            .filter_map(|(node, d)| (d == Some(k)).then_some(node))
            .collect())
    }

    pub fn eccentricity(&self, v: usize) -> Result<Option<usize>, GraphError> {
        let dist = self.distances_from(v)?;
        Ok(dist
            .iter()
            .try_fold(0, |acc, d| d.map(|d| acc.max(d))))
    }

    /// Longest shortest path, or `None` when some pair is disconnected.
    pub fn diameter(&self) -> Option<usize> {
        (0..self.num_nodes)
            .map(|v| self.eccentricity(v).ok().flatten())
            .try_fold(0, |acc, e| e.map(|e| acc.max(e)))
    }

    /// Reads one `u v weight` triple per line; `#` starts a comment.
    ///
    /// When `num_nodes` is not given it is inferred from the largest index.
    pub fn from_edge_list(
        text: &str,
        directed: bool,
        num_nodes: Option<usize>,
    ) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |message: String| GraphError::Parse {
                line: idx + 1,
                message,
            };
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, got {}", fields.len())));
            }
            let u = fields[0]
                .parse::<usize>()
                .map_err(|e| parse_err(e.to_string()))?;
            let v = fields[1]
                .parse::<usize>()
                .map_err(|e| parse_err(e.to_string()))?;
            let w = fields[2]
                .parse::<f64>()
                .map_err(|e| parse_err(e.to_string()))?;
            edges.push((u, v, w));
        }
        let inferred = edges.iter().map(|&(u, v, _)| u.max(v) + 1).max().unwrap_or(0);
        Self::new(num_nodes.unwrap_or(inferred), directed, edges)
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = format!(
            "# nodes {} {}\n",
            self.num_nodes,
            if self.directed { "directed" } else { "undirected" }
        );
        for &(u, v, w) in &self.edges {
            let _ = writeln!(out, "{u} {v} {w}");
        }
        out
    }
}

/// Undirected cycle on `n >= 3` nodes with unit weights.
pub fn build_ring(n: usize) -> Result<SpatialGraph, GraphError> {
    if n < 3 {
        return Err(GraphError::InvalidSize(format!("ring needs >= 3 nodes, got {n}")));
    }
    let edges = (0..n).map(|u| (u, (u + 1) % n, 1.0)).collect();
    SpatialGraph::new(n, false, edges)
}

/// Complete graph on `clique` nodes (indices `0..clique`) joined by one edge
/// from node `clique - 1` to the head of a path of `path` nodes. The path tail
/// is the last node index.
pub fn build_lollipop(clique: usize, path: usize) -> Result<SpatialGraph, GraphError> {
    if clique < 3 || path < 1 {
        return Err(GraphError::InvalidSize(format!(
            "lollipop needs clique >= 3 and path >= 1, got ({clique}, {path})"
        )));
    }
    let mut edges = Vec::new();
    for u in 0..clique {
        for v in u + 1..clique {
            edges.push((u, v, 1.0));
        }
    }
    edges.push((clique - 1, clique, 1.0));
    for u in clique..clique + path - 1 {
        edges.push((u, u + 1, 1.0));
    }
    SpatialGraph::new(clique + path, false, edges)
}

/// `S = (theta_u / theta_m) I + c1 diag(Ã^T 1) + c2 Ã`.
#[derive(Debug, Clone, PartialEq)]
pub struct MessagePassingMatrix {
    pub entries: Array2<f64>,
    pub theta_ratio: f64,
    pub c1: f64,
    pub c2: f64,
}

impl MessagePassingMatrix {
    pub fn power(&self, k: usize) -> Array2<f64> {
        matrix_power(&self.entries, k)
    }
}

/// Message-passing matrix with the raw adjacency as graph shift operator.
pub fn message_passing_matrix(
    g: &SpatialGraph,
    theta_ratio: f64,
    c1: f64,
    c2: f64,
) -> Result<MessagePassingMatrix, GraphError> {
    message_passing_matrix_from_shift(&g.adjacency(), theta_ratio, c1, c2)
}

pub fn message_passing_matrix_from_shift(
    shift: &Array2<f64>,
    theta_ratio: f64,
    c1: f64,
    c2: f64,
) -> Result<MessagePassingMatrix, GraphError> {
    if !(c1 >= 0.0 && c2 >= 0.0) {
        return Err(GraphError::Precondition(format!(
            "c1 and c2 must be nonnegative, got ({c1}, {c2})"
        )));
    }
    if !shift.is_square() {
        return Err(GraphError::InvalidSize("shift operator must be square".into()));
    }
    let n = shift.nrows();
    let in_weight = shift.sum_axis(ndarray::Axis(0));
    let mut s = shift.mapv(|a| c2 * a);
    for v in 0..n {
        s[[v, v]] += theta_ratio + c1 * in_weight[v];
    }
    Ok(MessagePassingMatrix {
        entries: s,
        theta_ratio,
        c1,
        c2,
    })
}

/// `(S^L)_{uv}`.
pub fn spatial_power_entry(
    s: &Array2<f64>,
    layers: usize,
    u: usize,
    v: usize,
) -> Result<f64, GraphError> {
    let n = s.nrows();
    for node in [u, v] {
        if node >= n {
            return Err(GraphError::NodeOutOfRange { node, num_nodes: n });
        }
    }
    Ok(matrix_power(s, layers)[[u, v]])
}

/// Mean over incoming neighbours: entry `(v, u)` is `a^{uv} / sum_w a^{wv}`.
///
/// Rows are indexed by the receiving node so that `Q H` aggregates features.
pub fn incoming_transition(g: &SpatialGraph) -> Array2<f64> {
    normalize_rows(g.adjacency().reversed_axes())
}

/// Mean over outgoing neighbours: entry `(v, u)` is `a^{vu} / sum_w a^{vw}`.
pub fn outgoing_transition(g: &SpatialGraph) -> Array2<f64> {
    normalize_rows(g.adjacency())
}

fn normalize_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.outer_iter_mut() {
        let sum = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|x| x / sum);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_examples() {
        let g = build_ring(4).unwrap();
        assert_eq!(g.num_edges(), 4);
        let a = g.adjacency();
        assert!(a.sum_axis(ndarray::Axis(1)).iter().all(|&d| d == 2.0));
        assert_eq!(build_ring(16).unwrap().diameter(), Some(8));
        let tri = build_ring(3).unwrap();
        assert_eq!(tri.adjacency().sum(), 6.0);
        assert!(build_ring(2).is_err());
    }

    #[test]
    fn lollipop_examples() {
        let g = build_lollipop(3, 1).unwrap();
        assert_eq!((g.num_nodes(), g.num_edges()), (4, 4));
        let g = build_lollipop(8, 8).unwrap();
        assert_eq!((g.num_nodes(), g.num_edges()), (16, 36));
        assert_eq!(g.diameter(), Some(9));
        assert!(build_lollipop(2, 3).is_err());
        assert!(build_lollipop(3, 0).is_err());
    }

    #[test]
    fn lollipop_tail_distance_by_bfs() {
        let g = build_lollipop(4, 2).unwrap();
        let tail = g.num_nodes() - 1;
        let far = (0..4)
            .map(|c| g.distances_from(tail).unwrap()[c].unwrap())
            .max()
            .unwrap();
        assert_eq!(far, 3);
    }

    #[test]
    fn graph_validation() {
        assert!(matches!(
            SpatialGraph::new(3, false, vec![(0, 3, 1.0)]),
            Err(GraphError::NodeOutOfRange { .. })
        ));
        assert!(matches!(
            SpatialGraph::new(3, false, vec![(0, 1, -1.0)]),
            Err(GraphError::BadWeight(0, 1))
        ));
        assert!(matches!(
            SpatialGraph::new(3, false, vec![(0, 1, 1.0), (1, 0, 2.0)]),
            Err(GraphError::DuplicateEdge(1, 0))
        ));
        assert!(SpatialGraph::new(3, true, vec![(0, 1, 1.0), (1, 0, 2.0)]).is_ok());
    }

    #[test]
    fn message_passing_examples() {
        let g = build_ring(4).unwrap();
        let s = message_passing_matrix(&g, 1.0, 0.0, 1.0).unwrap();
        assert_eq!(s.entries, Array2::<f64>::eye(4) + g.adjacency());
        let s0 = message_passing_matrix(&g, 2.5, 0.0, 0.0).unwrap();
        assert_eq!(s0.entries, Array2::<f64>::eye(4) * 2.5);

        let edge = SpatialGraph::new(2, true, vec![(0, 1, 1.0)]).unwrap();
        let s = message_passing_matrix(&edge, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(s.entries[[1, 1]], 1.0);
        assert_eq!(s.entries[[0, 1]], 1.0);
        assert_eq!(s.entries[[0, 0]], 0.0);
        assert_eq!(s.entries[[1, 0]], 0.0);
        assert!(message_passing_matrix(&g, 1.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn spatial_power_examples() {
        let g = build_ring(16).unwrap();
        let s = message_passing_matrix(&g, 1.0, 0.0, 1.0).unwrap().entries;
        assert_eq!(spatial_power_entry(&s, 0, 3, 3).unwrap(), 1.0);
        assert_eq!(spatial_power_entry(&s, 0, 3, 4).unwrap(), 0.0);
        assert_eq!(spatial_power_entry(&s, 7, 0, 8).unwrap(), 0.0);
        assert_eq!(spatial_power_entry(&s, 8, 0, 8).unwrap(), 2.0);
        assert!(spatial_power_entry(&s, 1, 0, 16).is_err());
    }

    #[test]
    fn k_hop_examples() {
        let g = build_ring(16).unwrap();
        assert_eq!(g.k_hop_set(0, 8).unwrap(), BTreeSet::from([8]));
        assert_eq!(g.k_hop_set(0, 3).unwrap(), BTreeSet::from([3, 13]));
        assert_eq!(g.k_hop_set(5, 0).unwrap(), BTreeSet::from([5]));
        assert!(g.k_hop_set(0, 9).unwrap().is_empty());
        assert!(g.k_hop_set(16, 0).is_err());
    }

    #[test]
    fn directed_distances_follow_edges() {
        let g = SpatialGraph::new(3, true, vec![(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        assert_eq!(g.distances_from(0).unwrap(), vec![Some(0), Some(1), Some(2)]);
        assert_eq!(g.distances_from(2).unwrap(), vec![None, None, Some(0)]);
        assert_eq!(g.diameter(), None);
    }

    #[test]
    fn transitions_are_row_stochastic() {
        let g = build_lollipop(4, 3).unwrap();
        for q in [incoming_transition(&g), outgoing_transition(&g)] {
            for row in q.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-15);
            }
        }
        let d = SpatialGraph::new(3, true, vec![(0, 2, 1.0), (1, 2, 3.0)]).unwrap();
        let q = incoming_transition(&d);
        assert_eq!(q[[2, 0]], 0.25);
        assert_eq!(q[[2, 1]], 0.75);
        assert_eq!(q.row(0).sum(), 0.0);
    }

    #[test]
    fn edge_list_round_trip() {
        let g = build_lollipop(3, 2).unwrap();
        let text = g.to_edge_list();
        let back = SpatialGraph::from_edge_list(&text, false, None).unwrap();
        assert_eq!(back, g);
        let err = SpatialGraph::from_edge_list("0 1\n", false, None).unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 1, .. }));
        let json = serde_json::to_value(&g).unwrap();
        assert_eq!(json["num_nodes"], 5);
        assert_eq!(json["directed"], false);
    }
}
