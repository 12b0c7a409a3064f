//! Undirected attributed graphs and labeled graph collections.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Undirected simple graph with a dense node-feature matrix.
///
/// Adjacency is stored as sorted neighbor lists. Graphs built through
/// [`Graph::new`] are symmetric and loop-free; [`Graph::from_raw_parts`]
/// skips validation so that [`validate_dataset`] has something to find.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    features: Matrix,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an unordered edge list. Duplicate and reversed
    /// pairs collapse to one undirected edge.
    pub fn new(node_count: usize, edges: &[(usize, usize)], features: Matrix) -> Result<Self> {
        if features.rows() != node_count {
            return Err(Error::FeatureRows {
                rows: features.rows(),
                node_count,
            });
        }
        let mut canonical = BTreeSet::new();
        for &(u, v) in edges {
            if u >= node_count || v >= node_count {
                return Err(Error::EdgeOutOfRange { u, v, node_count });
            }
            if u == v {
                return Err(Error::SelfLoop(u, v));
            }
            canonical.insert((u.min(v), u.max(v)));
        }
        let mut neighbors = vec![Vec::new(); node_count];
        for &(u, v) in &canonical {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(Graph {
            node_count,
            edges: canonical.into_iter().collect(),
            features,
            neighbors,
        })
    }

    /// Unchecked constructor from neighbor lists; the edge list is derived
    /// from every `(i, j)` with `j` in `neighbors[i]` and `i < j`.
    pub fn from_raw_parts(features: Matrix, neighbors: Vec<Vec<usize>>) -> Self {
        let mut edges = BTreeSet::new();
        for (i, nbrs) in neighbors.iter().enumerate() {
            for &j in nbrs {
                edges.insert((i.min(j), i.max(j)));
            }
        }
        Graph {
            node_count: neighbors.len(),
            edges: edges.into_iter().collect(),
            features,
            neighbors,
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Undirected edges as `(min, max)` pairs in sorted order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors.get(u).is_some_and(|n| n.contains(&v))
    }

    /// Dense 0/1 adjacency matrix.
    pub fn adjacency(&self) -> Matrix {
        let mut a = Matrix::zeros(self.node_count, self.node_count);
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                if j < self.node_count {
                    a[(i, j)] = 1.0;
                }
            }
        }
        a
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.node_count {
            return Err(Error::shape(
                "Graph::permuted",
                format!("{} entries for {} nodes", perm.len(), self.node_count),
            ));
        }
        let mut inverse = vec![usize::MAX; self.node_count];
        for (old, &new) in perm.iter().enumerate() {
            if new >= self.node_count || inverse[new] != usize::MAX {
                return Err(Error::Config("not a permutation".into()));
            }
            inverse[new] = old;
        }
        let features = self.features.select_rows(&inverse);
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Graph::new(self.node_count, &edges, features)
    }

    fn violations(&self, expected_dim: usize) -> Vec<ViolationKind> {
        let mut out = Vec::new();
        if self.features.rows() != self.node_count {
            out.push(ViolationKind::FeatureRows {
                rows: self.features.rows(),
                node_count: self.node_count,
            });
        }
        if self.features.cols() != expected_dim {
            out.push(ViolationKind::FeatureDim {
                found: self.features.cols(),
                expected: expected_dim,
            });
        }
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                if j >= self.node_count {
                    out.push(ViolationKind::EndpointOutOfRange { u: i, v: j });
                } else if j == i {
                    out.push(ViolationKind::SelfLoop { node: i });
                } else if !self.neighbors[j].contains(&i) {
                    out.push(ViolationKind::Asymmetric { u: i, v: j });
                }
            }
        }
        out
    }
}

/// Detection label: in-distribution (0) or out-of-distribution (1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistLabel {
    Id = 0,
    Ood = 1,
}

impl DistLabel {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(DistLabel::Id),
            1 => Some(DistLabel::Ood),
            _ => None,
        }
    }
}

impl fmt::Display for DistLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledGraph {
    pub graph: Graph,
    pub class_label: usize,
    pub dist_label: Option<DistLabel>,
}

impl LabeledGraph {
    pub fn new(graph: Graph, class_label: usize) -> Self {
        LabeledGraph {
            graph,
            class_label,
            dist_label: None,
        }
    }

    pub fn with_dist_label(mut self, label: DistLabel) -> Self {
        self.dist_label = Some(label);
        self
    }
}

/// Ordered collection of graphs sharing one feature dimension.
///
/// When the features came from one-hot node labels, the first
/// `node_label_dim` columns hold that encoding and the remaining columns are
/// real-valued attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub feature_dim: usize,
    pub node_label_dim: usize,
    pub graphs: Vec<LabeledGraph>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, feature_dim: usize, graphs: Vec<LabeledGraph>) -> Self {
        Dataset {
            name: name.into(),
            feature_dim,
            node_label_dim: 0,
            graphs,
        }
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Sorted distinct class labels.
    pub fn classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.graphs.iter().map(|g| g.class_label).collect();
        set.into_iter().collect()
    }

    pub fn dist_labels(&self) -> Option<Vec<DistLabel>> {
        self.graphs.iter().map(|g| g.dist_label).collect()
    }

    pub fn total_nodes(&self) -> usize {
        self.graphs.iter().map(|g| g.graph.node_count()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ViolationKind {
    Asymmetric { u: usize, v: usize },
    SelfLoop { node: usize },
    EndpointOutOfRange { u: usize, v: usize },
    FeatureRows { rows: usize, node_count: usize },
    FeatureDim { found: usize, expected: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub graph_index: usize,
    pub kind: ViolationKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every invariant violation in the dataset, tagged with the graph index.
pub fn validate_dataset(dataset: &Dataset) -> ValidationReport {
    let mut violations = Vec::new();
    for (graph_index, g) in dataset.graphs.iter().enumerate() {
        for kind in g.graph.violations(dataset.feature_dim) {
            violations.push(Violation { graph_index, kind });
        }
    }
    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn triangle_adjacency() {
        let g = Graph::new(3, &[(0, 1), (1, 2), (0, 2)], Matrix::zeros(3, 2)).unwrap();
        let a = g.adjacency();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a[(i, j)], if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn single_node() {
        let g = Graph::new(1, &[], Matrix::zeros(1, 4)).unwrap();
        assert_eq!(g.adjacency().as_slice(), &[0.0]);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            Graph::new(2, &[(0, 0)], Matrix::zeros(2, 1)),
            Err(Error::SelfLoop(0, 0))
        ));
        assert!(matches!(
            Graph::new(2, &[(0, 2)], Matrix::zeros(2, 1)),
            Err(Error::EdgeOutOfRange { .. })
        ));
        assert!(matches!(
            Graph::new(3, &[], Matrix::zeros(2, 1)),
            Err(Error::FeatureRows { .. })
        ));
    }

    #[test]
    fn duplicate_and_reversed_edges_collapse() {
        let g = Graph::new(3, &[(0, 1), (1, 0), (0, 1), (2, 1)], Matrix::zeros(3, 1)).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert!(g.has_edge(1, 0) && g.has_edge(2, 1) && !g.has_edge(0, 2));
    }

    fn triangle() -> LabeledGraph {
        LabeledGraph::new(
            Graph::new(3, &[(0, 1), (1, 2), (0, 2)], Matrix::zeros(3, 2)).unwrap(),
            0,
        )
    }

    #[test]
    fn validate_valid_dataset() {
        let ds = Dataset::new("ok", 2, vec![triangle(), triangle()]);
        assert!(validate_dataset(&ds).is_ok());
    }

    #[test]
    fn validate_reports_asymmetry() {
        let bad = Graph::from_raw_parts(Matrix::zeros(2, 2), vec![vec![1], vec![]]);
        let ds = Dataset::new("bad", 2, vec![triangle(), LabeledGraph::new(bad, 0)]);
        let report = validate_dataset(&ds);
        assert_eq!(
            report.violations,
            vec![Violation {
                graph_index: 1,
                kind: ViolationKind::Asymmetric { u: 0, v: 1 }
            }]
        );
    }

    #[test]
    fn validate_reports_each_mixed_dim_graph() {
        let odd = |d| LabeledGraph::new(Graph::new(2, &[(0, 1)], Matrix::zeros(2, d)).unwrap(), 0);
        let ds = Dataset::new("mixed", 2, vec![triangle(), odd(3), odd(5), triangle()]);
        let report = validate_dataset(&ds);
        let idx: Vec<usize> = report.violations.iter().map(|v| v.graph_index).collect();
        assert_eq!(idx, vec![1, 2]);
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Graph {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.4) {
                    edges.push((i, j));
                }
            }
        }
        let feats = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.random::<f64>()).collect()).unwrap();
        Graph::new(n, &edges, feats).unwrap()
    }

    proptest! {
        #[test]
        fn adjacency_is_symmetric(seed in 0u64..10_000, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, n);
            let a = g.adjacency();
            prop_assert_eq!(a.transpose(), a);
        }

        #[test]
        fn permutation_conjugates_adjacency(seed in 0u64..10_000, n in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, n);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let h = g.permuted(&perm).unwrap();
            // P maps old index i to new index perm[i]: P[perm[i]][i] = 1
            let mut p = Matrix::zeros(n, n);
            for (i, &pi) in perm.iter().enumerate() {
                p[(pi, i)] = 1.0;
            }
            let expected = p.matmul(&g.adjacency()).unwrap().matmul(&p.transpose()).unwrap();
            prop_assert_eq!(h.adjacency(), expected);
            for (i, &pi) in perm.iter().enumerate() {
                prop_assert_eq!(h.features().row(pi), g.features().row(i));
            }
        }
    }
}
