//! Immutable undirected graphs in CSR form and the structural operations the
//! kernels are built on.

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{MoseError, Result};

/// Simple undirected graph with sorted CSR adjacency and dense node features.
///
/// Every undirected edge is stored twice, once in each endpoint's neighbor
/// list. Self-loops and parallel edges are rejected or collapsed at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    features: Array2<f64>,
    graph_label: Option<usize>,
    node_labels: Option<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Duplicate edges (in either
    /// orientation) collapse to one.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], features: Array2<f64>) -> Result<Self> {
        if features.nrows() != n {
            return Err(MoseError::InvalidArgument(format!(
                "feature matrix has {} rows for {} nodes",
                features.nrows(),
                n
            )));
        }
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(MoseError::InvalidArgument(format!(
                    "edge ({u}, {v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                return Err(MoseError::InvalidArgument(format!("self-loop on node {u}")));
            }
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        Ok(Self::from_adjacency_lists(adjacency, features))
    }

    /// Graph with a single constant feature per node.
    pub fn unlabeled(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        Self::from_edges(n, edges, Array2::ones((n, 1)))
    }

    fn from_adjacency_lists(mut adjacency: Vec<Vec<usize>>, features: Array2<f64>) -> Self {
        let mut offsets = Vec::with_capacity(adjacency.len() + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for list in adjacency.iter_mut() {
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        Graph {
            offsets,
            neighbors,
            features,
            graph_label: None,
            node_labels: None,
        }
    }

    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.node_count() {
            return Err(MoseError::InvalidArgument(format!(
                "feature matrix has {} rows for {} nodes",
                features.nrows(),
                self.node_count()
            )));
        }
        self.features = features;
        Ok(self)
    }

    pub fn with_graph_label(mut self, label: Option<usize>) -> Self {
        self.graph_label = label;
        self
    }

    pub fn with_node_labels(mut self, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.node_count() {
                return Err(MoseError::InvalidArgument(format!(
                    "{} node labels for {} nodes",
                    l.len(),
                    self.node_count()
                )));
            }
        }
        self.node_labels = labels;
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn neighbor_list(&self) -> &[usize] {
        &self.neighbors
    }

    #[inline]
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    #[inline]
    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.node_count()).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edges as `(u, v)` with `u < v`, in CSR order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.node_count())
            .flat_map(move |u| self.neighbors(u).iter().filter(move |&&v| u < v).map(move |&v| (u, v)))
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn graph_label(&self) -> Option<usize> {
        self.graph_label
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        self.node_labels.as_deref()
    }

    pub fn adjacency_dense(&self) -> Array2<f64> {
        let n = self.node_count();
        let mut a = Array2::zeros((n, n));
        for u in 0..n {
            for &v in self.neighbors(u) {
                a[[u, v]] = 1.0;
            }
        }
        a
    }

    /// `A^p 1`: the number of length-`p` walks starting at each node.
    pub fn walk_count_vector(&self, p: usize) -> Vec<u128> {
        let n = self.node_count();
        let mut counts = vec![1u128; n];
        for _ in 0..p {
            let next: Vec<u128> = (0..n)
                .map(|u| self.neighbors(u).iter().map(|&v| counts[v]).sum())
                .collect();
            counts = next;
        }
        counts
    }

    /// Sum of all entries of `A^p`.
    pub fn total_walks(&self, p: usize) -> u128 {
        self.walk_count_vector(p).iter().sum()
    }

    /// Relabels node `i` as `perm[i]`. Features, node labels and the graph
    /// label move with their nodes.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.node_count();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(MoseError::InvalidArgument("not a permutation".into()));
        }
        let mut adjacency = vec![Vec::new(); n];
        for u in 0..n {
            adjacency[perm[u]] = self.neighbors(u).iter().map(|&v| perm[v]).collect();
        }
        let mut features = Array2::zeros(self.features.raw_dim());
        for u in 0..n {
            features.row_mut(perm[u]).assign(&self.features.row(u));
        }
        let node_labels = self.node_labels.as_ref().map(|labels| {
            let mut out = vec![0; n];
            for u in 0..n {
                out[perm[u]] = labels[u];
            }
            out
        });
        let mut g = Self::from_adjacency_lists(adjacency, features);
        g.graph_label = self.graph_label;
        g.node_labels = node_labels;
        Ok(g)
    }

    /// Connected components as a per-node component id, numbered in order of
    /// their smallest node.
    pub fn components(&self) -> Vec<usize> {
        let n = self.node_count();
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        let mut stack = Vec::new();
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            comp[s] = next;
            stack.push(s);
            while let Some(u) = stack.pop() {
                for &v in self.neighbors(u) {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn is_connected(&self) -> bool {
        self.components().iter().all(|&c| c == 0)
    }

    /// Nodes within `radius` hops of `v`, in BFS order starting with `v`.
    pub fn ball(&self, v: usize, radius: usize) -> Vec<usize> {
        let mut dist = HashMap::new();
        dist.insert(v, 0usize);
        let mut order = vec![v];
        let mut head = 0;
        while head < order.len() {
            let u = order[head];
            head += 1;
            let d = dist[&u];
            if d == radius {
                continue;
            }
            for &w in self.neighbors(u) {
                if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(w) {
                    e.insert(d + 1);
                    order.push(w);
                }
            }
        }
        order
    }
}

/// Vertex-induced subgraph around a center node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSubgraph {
    /// Local index of the center (always 0 for extracted subgraphs).
    pub center: usize,
    pub graph: Graph,
    /// Local node index to parent node id.
    pub parent_ids: Vec<usize>,
}

impl NodeSubgraph {
    pub fn center_parent(&self) -> usize {
        self.parent_ids[self.center]
    }

    pub fn node_count(&self) -> usize {
        self.parent_ids.len()
    }
}

/// Induces the subgraph on `nodes`; the first node is the center and local
/// ordering follows the input ordering.
pub fn induced_subgraph(g: &Graph, nodes: &[usize]) -> Result<NodeSubgraph> {
    if nodes.is_empty() {
        return Err(MoseError::InvalidArgument("empty node set".into()));
    }
    let n = g.node_count();
    let mut local: HashMap<usize, usize> = HashMap::with_capacity(nodes.len());
    for (i, &v) in nodes.iter().enumerate() {
        if v >= n {
            return Err(MoseError::InvalidArgument(format!("node {v} out of range for {n} nodes")));
        }
        if local.insert(v, i).is_some() {
            return Err(MoseError::InvalidArgument(format!("node {v} listed twice")));
        }
    }
    let adjacency: Vec<Vec<usize>> = nodes
        .iter()
        .map(|&v| g.neighbors(v).iter().filter_map(|u| local.get(u).copied()).collect())
        .collect();
    let mut features = Array2::zeros((nodes.len(), g.feature_dim()));
    for (i, &v) in nodes.iter().enumerate() {
        features.row_mut(i).assign(&g.features().row(v));
    }
    let mut sub = Graph::from_adjacency_lists(adjacency, features);
    sub.node_labels = g.node_labels().map(|labels| nodes.iter().map(|&v| labels[v]).collect());
    Ok(NodeSubgraph {
        center: 0,
        graph: sub,
        parent_ids: nodes.to_vec(),
    })
}

/// Structure of the subgraph induced on `nodes` with zero-width features,
/// for callers that read features from the parent graph instead.
pub fn induced_structure(g: &Graph, nodes: &[usize]) -> Graph {
    let local: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let adjacency: Vec<Vec<usize>> = nodes
        .iter()
        .map(|&v| g.neighbors(v).iter().filter_map(|u| local.get(u).copied()).collect())
        .collect();
    Graph::from_adjacency_lists(adjacency, Array2::zeros((nodes.len(), 0)))
}

/// Direct (tensor) product graph. Node `(u, u')` gets index `u * |V'| + u'`;
/// the result carries no features.
pub fn direct_product(g: &Graph, h: &Graph) -> Graph {
    let (n, m) = (g.node_count(), h.node_count());
    let adjacency: Vec<Vec<usize>> = (0..n * m)
        .map(|idx| {
            let (u, u2) = (idx / m, idx % m);
            let mut list = Vec::with_capacity(g.degree(u) * h.degree(u2));
            for &v in g.neighbors(u) {
                for &v2 in h.neighbors(u2) {
                    list.push(v * m + v2);
                }
            }
            list
        })
        .collect();
    Graph::from_adjacency_lists(adjacency, Array2::zeros((n * m, 0)))
}

/// One-hot degree encoding of width `max_degree + 1`; larger degrees clamp to
/// the last bucket.
pub fn degree_features(g: &Graph, max_degree: usize) -> Array2<f64> {
    let mut x = Array2::zeros((g.node_count(), max_degree + 1));
    for v in 0..g.node_count() {
        x[[v, g.degree(v).min(max_degree)]] = 1.0;
    }
    x
}

/// Small named graphs used throughout tests and fixtures.
pub mod named {
    use super::Graph;

    pub fn path(n: usize) -> Graph {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Graph::unlabeled(n, &edges).expect("valid path")
    }

    pub fn cycle(n: usize) -> Graph {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Graph::unlabeled(n, &edges).expect("valid cycle")
    }

    /// Star with `leaves` leaves; node 0 is the center.
    pub fn star(leaves: usize) -> Graph {
        let edges: Vec<_> = (1..=leaves).map(|i| (0, i)).collect();
        Graph::unlabeled(leaves + 1, &edges).expect("valid star")
    }

    pub fn complete(n: usize) -> Graph {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                edges.push((u, v));
            }
        }
        Graph::unlabeled(n, &edges).expect("valid complete graph")
    }

    /// Disjoint union of `copies` copies of `g`.
    pub fn disjoint_copies(g: &Graph, copies: usize) -> Graph {
        let n = g.node_count();
        let edges: Vec<_> = (0..copies)
            .flat_map(|c| g.edges().map(move |(u, v)| (u + c * n, v + c * n)))
            .collect();
        Graph::unlabeled(n * copies, &edges).expect("valid union")
    }
}

#[cfg(test)]
mod tests {
    use super::named::*;
    use super::*;

    fn edge_set(g: &Graph) -> Vec<(usize, usize)> {
        g.edges().collect()
    }

    #[test]
    fn induced_edge_on_triangle_pair() {
        let s = induced_subgraph(&cycle(3), &[0, 1]).unwrap();
        assert_eq!(s.node_count(), 2);
        assert_eq!(s.graph.edge_count(), 1);
    }

    #[test]
    fn singleton_subgraph() {
        let s = induced_subgraph(&cycle(5), &[3]).unwrap();
        assert_eq!(s.node_count(), 1);
        assert_eq!(s.graph.edge_count(), 0);
        assert_eq!(s.center_parent(), 3);
    }

    #[test]
    fn induced_path_keeps_only_selected_edges() {
        // enumerate parent edges with both endpoints selected: only (2,3)
        let p4 = path(4);
        let nodes = [0, 2, 3];
        let expected: Vec<_> = p4
            .edges()
            .filter(|(u, v)| nodes.contains(u) && nodes.contains(v))
            .collect();
        assert_eq!(expected, vec![(2, 3)]);
        let s = induced_subgraph(&p4, &nodes).unwrap();
        assert_eq!(s.graph.node_count(), 3);
        assert_eq!(edge_set(&s.graph), vec![(1, 2)]);
        assert_eq!(s.parent_ids, vec![0, 2, 3]);
    }

    #[test]
    fn induced_rejects_bad_ids() {
        assert!(matches!(induced_subgraph(&path(3), &[0, 7]), Err(MoseError::InvalidArgument(_))));
        assert!(induced_subgraph(&path(3), &[]).is_err());
    }

    #[test]
    fn product_of_two_edges() {
        let p = direct_product(&path(2), &path(2));
        assert_eq!(p.node_count(), 4);
        // (a,a')=0, (a,b')=1, (b,a')=2, (b,b')=3
        assert_eq!(edge_set(&p), vec![(0, 3), (1, 2)]);
    }

    #[test]
    fn product_with_isolated_node() {
        let single = Graph::unlabeled(1, &[]).unwrap();
        let p = direct_product(&cycle(4), &single);
        assert_eq!(p.node_count(), 4);
        assert_eq!(p.edge_count(), 0);
    }

    #[test]
    fn triangle_squared_product() {
        let p = direct_product(&cycle(3), &cycle(3));
        assert_eq!(p.node_count(), 9);
        assert_eq!(p.edge_count(), 18);
        assert_eq!(p.adjacency_dense().sum(), 36.0);
    }

    #[test]
    fn degree_one_hot() {
        let x = degree_features(&star(3), 4);
        assert_eq!(x.row(0).to_vec(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        let isolated = Graph::unlabeled(1, &[]).unwrap();
        assert_eq!(degree_features(&isolated, 4).row(0).to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let x = degree_features(&star(7), 4);
        assert_eq!(x[[0, 4]], 1.0);
        assert_eq!(x.row(0).sum(), 1.0);
    }

    #[test]
    fn construction_validates() {
        assert!(Graph::unlabeled(2, &[(0, 0)]).is_err());
        assert!(Graph::unlabeled(2, &[(0, 2)]).is_err());
        let g = Graph::unlabeled(3, &[(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.offsets().last().copied(), Some(g.neighbor_list().len()));
    }

    #[test]
    fn walk_counts_match_dense_powers() {
        let g = Graph::unlabeled(5, &[(0, 1), (1, 2), (2, 0), (2, 3), (3, 4)]).unwrap();
        let a = g.adjacency_dense();
        let mut power = Array2::<f64>::eye(5);
        for p in 0..5 {
            assert_eq!(g.total_walks(p) as f64, power.sum());
            power = power.dot(&a);
        }
    }

    #[test]
    fn ball_radius_one() {
        let mut b = path(5).ball(2, 1);
        b.sort();
        assert_eq!(b, vec![1, 2, 3]);
    }
}
