//! Random walks, anonymous walk patterns and anonymous-walk subgraph
//! extraction.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{MoseError, Result};
use crate::graph::{induced_subgraph, Graph, NodeSubgraph};
use crate::rng::{substream, tag};

/// Upper bound on the number of walks any exhaustive enumeration may visit.
pub const ENUMERATION_BUDGET: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WalkConfig {
    /// Steps per walk.
    pub walk_length: usize,
    pub walks_per_node: usize,
    /// Number of global patterns kept.
    pub k_walk: usize,
    /// Maximum subgraph size; nodes are kept in first-visit order.
    pub subgraph_cap: usize,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            walk_length: 4,
            walks_per_node: 20,
            k_walk: 8,
            subgraph_cap: 64,
            seed: 0,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.walk_length == 0 || self.walks_per_node == 0 || self.k_walk == 0 || self.subgraph_cap == 0 {
            return Err(MoseError::InvalidArgument(
                "walk_length, walks_per_node, k_walk and subgraph_cap must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Node sequence of an `l`-step walk (`l + 1` nodes).
pub type RandomWalk = Vec<usize>;

/// Walk with node identities replaced by first-appearance indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct AnonymousWalk(pub Vec<u32>);

impl AnonymousWalk {
    /// `γ_0 = 0` and every entry is at most one more than the running maximum.
    pub fn is_valid(&self) -> bool {
        let mut max = None::<u32>;
        for &g in &self.0 {
            let limit = max.map(|m| m + 1).unwrap_or(0);
            if g > limit {
                return false;
            }
            max = Some(max.map_or(g, |m| m.max(g)));
        }
        !self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for AnonymousWalk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|g| g.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

impl std::str::FromStr for AnonymousWalk {
    type Err = MoseError;

    fn from_str(s: &str) -> Result<Self> {
        let pattern = s
            .split(',')
            .map(|t| t.trim().parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| MoseError::InvalidArgument(format!("bad pattern {s:?}: {e}")))?;
        let walk = AnonymousWalk(pattern);
        if !walk.is_valid() {
            return Err(MoseError::InvalidArgument(format!("invalid anonymous walk {s:?}")));
        }
        Ok(walk)
    }
}

/// Samples `walks_per_node` uniform random walks of `walk_length` steps from
/// `v`. An isolated start node yields no walks.
pub fn sample_walks<R: Rng>(g: &Graph, v: usize, cfg: &WalkConfig, rng: &mut R) -> Vec<RandomWalk> {
    if g.degree(v) == 0 {
        return Vec::new();
    }
    (0..cfg.walks_per_node)
        .map(|_| {
            let mut walk = Vec::with_capacity(cfg.walk_length + 1);
            let mut cur = v;
            walk.push(cur);
            for _ in 0..cfg.walk_length {
                let neigh = g.neighbors(cur);
                cur = neigh[rng.random_range(0..neigh.len())];
                walk.push(cur);
            }
            walk
        })
        .collect()
}

pub fn to_anonymous(walk: &[usize]) -> AnonymousWalk {
    let mut first_seen: Vec<usize> = Vec::with_capacity(walk.len());
    let pattern = walk
        .iter()
        .map(|node| match first_seen.iter().position(|s| s == node) {
            Some(i) => i as u32,
            None => {
                first_seen.push(*node);
                (first_seen.len() - 1) as u32
            }
        })
        .collect();
    AnonymousWalk(pattern)
}

/// The `k_walk` most frequent patterns, most frequent first, ties broken by
/// the lexicographically smaller pattern.
pub fn top_patterns(counts: &BTreeMap<AnonymousWalk, u64>, k_walk: usize) -> Vec<(AnonymousWalk, u64)> {
    let mut ranked: Vec<(AnonymousWalk, u64)> = counts.iter().map(|(p, &c)| (p.clone(), c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k_walk);
    ranked
}

/// Induces the subgraph on `v` plus every node lying on a walk whose pattern
/// is in `patterns`. Falls back to the singleton `{v}` when nothing matches.
pub fn extract_subgraph(
    g: &Graph,
    v: usize,
    walks: &[RandomWalk],
    patterns: &HashSet<AnonymousWalk>,
) -> Result<NodeSubgraph> {
    extract_subgraph_capped(g, v, walks, patterns, usize::MAX)
}

/// As [`extract_subgraph`], keeping at most `cap` nodes in first-visit order.
/// Every prefix of the first-visit order is connected, so truncation keeps the
/// subgraph connected.
pub fn extract_subgraph_capped(
    g: &Graph,
    v: usize,
    walks: &[RandomWalk],
    patterns: &HashSet<AnonymousWalk>,
    cap: usize,
) -> Result<NodeSubgraph> {
    induced_subgraph(g, &neighborhood(v, walks, patterns, cap)?)
}

fn neighborhood(v: usize, walks: &[RandomWalk], patterns: &HashSet<AnonymousWalk>, cap: usize) -> Result<Vec<usize>> {
    let mut nodes = vec![v];
    let mut seen = HashSet::from([v]);
    for walk in walks {
        if walk.first() != Some(&v) {
            return Err(MoseError::InvalidArgument(format!("walk does not start at {v}")));
        }
        if !patterns.contains(&to_anonymous(walk)) {
            continue;
        }
        for &u in walk {
            if nodes.len() >= cap {
                return Ok(nodes);
            }
            if seen.insert(u) {
                nodes.push(u);
            }
        }
    }
    Ok(nodes)
}

/// Result of running pattern counting and extraction over one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphExtraction {
    /// Selected patterns with their global counts, in selection order.
    pub patterns: Vec<(AnonymousWalk, u64)>,
    /// Node sets (center first) of every node's subgraph, indexed by node.
    pub node_sets: Vec<Vec<usize>>,
}

impl GraphExtraction {
    /// Number of nodes whose extraction fell back to the singleton.
    pub fn singleton_count(&self) -> usize {
        self.node_sets.iter().filter(|s| s.len() == 1).count()
    }

    pub fn subgraph(&self, g: &Graph, v: usize) -> Result<NodeSubgraph> {
        induced_subgraph(g, &self.node_sets[v])
    }
}

/// Counts patterns over all nodes, keeps the global top `k_walk`, then
/// extracts every node's subgraph. Walk streams are keyed by
/// `(seed, graph_key, node)`.
pub fn extract_graph(g: &Graph, cfg: &WalkConfig, graph_key: u64) -> Result<GraphExtraction> {
    cfg.validate()?;
    let walks: Vec<Vec<RandomWalk>> = (0..g.node_count())
        .into_par_iter()
        .map(|v| {
            let mut rng = substream(cfg.seed, &[tag::WALKS, graph_key, v as u64]);
            sample_walks(g, v, cfg, &mut rng)
        })
        .collect();
    let counts = walks
        .par_iter()
        .map(|node_walks| {
            let mut local = BTreeMap::new();
            for w in node_walks {
                *local.entry(to_anonymous(w)).or_insert(0u64) += 1;
            }
            local
        })
        .reduce(BTreeMap::new, |mut a, b| {
            for (k, c) in b {
                *a.entry(k).or_insert(0) += c;
            }
            a
        });
    let patterns = top_patterns(&counts, cfg.k_walk);
    let selected: HashSet<AnonymousWalk> = patterns.iter().map(|(p, _)| p.clone()).collect();
    let node_sets = walks
        .par_iter()
        .enumerate()
        .map(|(v, w)| neighborhood(v, w, &selected, cfg.subgraph_cap))
        .collect::<Result<Vec<_>>>()?;
    Ok(GraphExtraction { patterns, node_sets })
}

/// Exact multiset of anonymous patterns over all length-`l` walks from `v`.
pub fn enumerate_anonymous_walks(g: &Graph, v: usize, l: usize) -> Result<BTreeMap<AnonymousWalk, u64>> {
    if v >= g.node_count() {
        return Err(MoseError::InvalidArgument(format!("node {v} out of range")));
    }
    let total = g.walk_count_vector(l)[v];
    if total > ENUMERATION_BUDGET {
        return Err(MoseError::Resource(format!(
            "{total} walks of length {l} from node {v} exceed the budget of {ENUMERATION_BUDGET}"
        )));
    }
    let mut counts: HashMap<Vec<u32>, u64> = HashMap::new();
    let mut pattern = vec![0u32; l + 1];
    let mut distinct = vec![v];
    enumerate_from(g, v, 1, l, &mut pattern, &mut distinct, &mut counts);
    Ok(counts.into_iter().map(|(p, c)| (AnonymousWalk(p), c)).collect())
}

fn enumerate_from(
    g: &Graph,
    cur: usize,
    depth: usize,
    l: usize,
    pattern: &mut Vec<u32>,
    distinct: &mut Vec<usize>,
    counts: &mut HashMap<Vec<u32>, u64>,
) {
    if depth > l {
        *counts.entry(pattern.clone()).or_insert(0) += 1;
        return;
    }
    for &next in g.neighbors(cur) {
        match distinct.iter().position(|&d| d == next) {
            Some(i) => {
                pattern[depth] = i as u32;
                enumerate_from(g, next, depth + 1, l, pattern, distinct, counts);
            }
            None => {
                pattern[depth] = distinct.len() as u32;
                distinct.push(next);
                enumerate_from(g, next, depth + 1, l, pattern, distinct, counts);
                distinct.pop();
            }
        }
    }
}

/// True iff the normalized length-`l` anonymous walk distributions rooted at
/// `v` in `g` and `v2` in `g2` differ. Compared exactly via cross
/// multiplication of integer counts.
pub fn walk_distributions_distinguish(g: &Graph, v: usize, g2: &Graph, v2: usize, l: usize) -> Result<bool> {
    let a = enumerate_anonymous_walks(g, v, l)?;
    let b = enumerate_anonymous_walks(g2, v2, l)?;
    let total_a: u128 = a.values().map(|&c| c as u128).sum();
    let total_b: u128 = b.values().map(|&c| c as u128).sum();
    if total_a == 0 || total_b == 0 {
        return Ok(total_a != total_b);
    }
    let keys: BTreeSet<&AnonymousWalk> = a.keys().chain(b.keys()).collect();
    let differs = keys.into_iter().any(|k| {
        let ca = a.get(k).copied().unwrap_or(0) as u128;
        let cb = b.get(k).copied().unwrap_or(0) as u128;
        ca * total_b != cb * total_a
    });
    Ok(differs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::named::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(l: usize, n_w: usize) -> WalkConfig {
        WalkConfig {
            walk_length: l,
            walks_per_node: n_w,
            ..Default::default()
        }
    }

    fn aw(p: &[u32]) -> AnonymousWalk {
        AnonymousWalk(p.to_vec())
    }

    #[test]
    fn isolated_node_has_no_walks() {
        let g = Graph::unlabeled(2, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_walks(&g, 0, &cfg(3, 5), &mut rng).is_empty());
    }

    #[test]
    fn forced_walks_on_an_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for w in sample_walks(&path(2), 0, &cfg(3, 10), &mut rng) {
            assert_eq!(w, vec![0, 1, 0, 1]);
        }
    }

    #[test]
    fn triangle_walks_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let walks = sample_walks(&cycle(3), 0, &cfg(2, 1000), &mut rng);
        let mut freq: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for w in walks {
            *freq.entry(w).or_default() += 1;
        }
        assert_eq!(freq.len(), 4);
        let chi2: f64 = freq.values().map(|&c| (c as f64 - 250.0).powi(2) / 250.0).sum();
        // 3 degrees of freedom, 0.999 quantile
        assert!(chi2 < 16.27, "chi2 = {chi2}");
        for &c in freq.values() {
            assert!((c as f64 / 1000.0 - 0.25).abs() < 0.05);
        }
    }

    #[test]
    fn anonymization_examples() {
        assert_eq!(to_anonymous(&[10, 20, 10, 30]), aw(&[0, 1, 0, 2]));
        assert_eq!(to_anonymous(&[5, 6, 7, 5]), aw(&[0, 1, 2, 0]));
        assert_eq!(to_anonymous(&[9, 4, 9, 3]), to_anonymous(&[1, 2, 1, 0]));
    }

    #[test]
    fn top_pattern_tie_break() {
        let counts = BTreeMap::from([(aw(&[0, 1, 0]), 5), (aw(&[0, 1, 2]), 5), (aw(&[0, 1, 0, 1]), 3)]);
        let top: Vec<_> = top_patterns(&counts, 2).into_iter().map(|(p, _)| p).collect();
        assert_eq!(top, vec![aw(&[0, 1, 0]), aw(&[0, 1, 2])]);
        assert_eq!(top_patterns(&counts, 10).len(), 3);
        let counts = BTreeMap::from([(aw(&[0, 1, 2]), 9), (aw(&[0, 1, 0]), 1)]);
        assert_eq!(top_patterns(&counts, 1)[0].0, aw(&[0, 1, 2]));
    }

    #[test]
    fn extraction_fallback_and_full_cover() {
        let patterns = HashSet::from([aw(&[0, 1, 2, 3])]);
        let s = extract_subgraph(&path(2), 0, &[vec![0, 1, 0, 1]], &patterns).unwrap();
        assert_eq!(s.node_count(), 1);

        let patterns = HashSet::from([aw(&[0, 1, 0, 1])]);
        let s = extract_subgraph(&path(2), 0, &[vec![0, 1, 0, 1]], &patterns).unwrap();
        assert_eq!(s.node_count(), 2);
        assert_eq!(s.graph.edge_count(), 1);

        let patterns = HashSet::from([aw(&[0, 1, 2, 3])]);
        let s = extract_subgraph(&cycle(4), 0, &[vec![0, 1, 2, 3]], &patterns).unwrap();
        assert_eq!(s.node_count(), 4);
        assert_eq!(s.graph.edge_count(), 4);
    }

    #[test]
    fn capped_extraction_stays_connected() {
        let g = cycle(10);
        let patterns = HashSet::from([aw(&[0, 1, 2, 3, 4])]);
        let walks = vec![vec![0, 1, 2, 3, 4], vec![0, 9, 8, 7, 6]];
        let s = extract_subgraph_capped(&g, 0, &walks, &patterns, 6).unwrap();
        assert_eq!(s.parent_ids, vec![0, 1, 2, 3, 4, 9]);
        assert!(s.graph.is_connected());
    }

    #[test]
    fn enumeration_examples() {
        let e = enumerate_anonymous_walks(&path(2), 0, 2).unwrap();
        assert_eq!(e, BTreeMap::from([(aw(&[0, 1, 0]), 1)]));
        let e = enumerate_anonymous_walks(&cycle(3), 0, 2).unwrap();
        assert_eq!(e, BTreeMap::from([(aw(&[0, 1, 0]), 2), (aw(&[0, 1, 2]), 2)]));
        let e = enumerate_anonymous_walks(&star(3), 0, 2).unwrap();
        assert_eq!(e, BTreeMap::from([(aw(&[0, 1, 0]), 3)]));
    }

    #[test]
    fn enumeration_budget() {
        let k = complete(8);
        assert!(matches!(enumerate_anonymous_walks(&k, 0, 9), Err(MoseError::Resource(_))));
    }

    #[test]
    fn distinguishing_examples() {
        let c6 = cycle(6);
        let two_triangles = disjoint_copies(&cycle(3), 2);
        assert!(walk_distributions_distinguish(&c6, 0, &two_triangles, 0, 3).unwrap());
        let p3 = path(3);
        assert!(walk_distributions_distinguish(&p3, 0, &p3, 1, 2).unwrap());
        assert!(!walk_distributions_distinguish(&p3, 0, &p3, 2, 4).unwrap());
    }

    #[test]
    fn pipeline_is_deterministic() {
        let g = Graph::unlabeled(6, &[(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5)]).unwrap();
        let c = WalkConfig { k_walk: 3, ..Default::default() };
        let a = extract_graph(&g, &c, 0).unwrap();
        let b = extract_graph(&g, &c, 0).unwrap();
        assert_eq!(a, b);
        for (v, set) in a.node_sets.iter().enumerate() {
            assert_eq!(set[0], v);
            assert!(a.subgraph(&g, v).unwrap().graph.is_connected());
        }
    }
}
