//! Color refinement: 1-WL, subgraph WL under an extraction policy, and the
//! pair-corpus experiments comparing them with model embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;

use crate::canon::{canonical_form, graph_corpus, CanonicalForm};
use crate::error::{MoseError, Result};
use crate::graph::{degree_features, induced_structure, Graph};
use crate::moe::MoseModel;
use crate::walks::{to_anonymous, AnonymousWalk};

/// Stable node coloring with contiguous color ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coloring {
    pub colors: Vec<usize>,
    pub histogram: BTreeMap<usize, usize>,
    pub rounds: usize,
}

impl Coloring {
    pub fn uniform(n: usize) -> Self {
        Coloring::from_colors(vec![0; n], 0)
    }

    /// Relabels arbitrary ordered keys to ranks so ids are contiguous.
    fn from_keys<K: Ord + Clone>(keys: &[K], rounds: usize) -> Self {
        let distinct: Vec<K> = keys.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let colors = keys.iter().map(|k| distinct.binary_search(k).expect("present")).collect();
        Coloring::from_colors(colors, rounds)
    }

    fn from_colors(colors: Vec<usize>, rounds: usize) -> Self {
        let mut histogram = BTreeMap::new();
        for &c in &colors {
            *histogram.entry(c).or_insert(0) += 1;
        }
        Coloring { colors, histogram, rounds }
    }

    pub fn class_count(&self) -> usize {
        self.histogram.len()
    }

    /// Node labels when present, otherwise uniform.
    pub fn initial(g: &Graph) -> Self {
        match g.node_labels() {
            Some(labels) => Coloring::from_keys(labels, 0),
            None => Coloring::uniform(g.node_count()),
        }
    }
}

fn refine_until_stable<K: Ord + Clone + Send>(
    n: usize,
    init: Coloring,
    step: impl Fn(&[usize]) -> Result<Vec<K>> + Sync,
) -> Result<Coloring> {
    let mut current = init;
    let mut rounds = 0;
    loop {
        let keys = step(&current.colors)?;
        rounds += 1;
        let next = Coloring::from_keys(&keys, rounds);
        if next.class_count() == current.class_count() || rounds > n {
            return Ok(Coloring { rounds, ..current });
        }
        current = next;
    }
}

/// 1-WL: each round hashes (own color, sorted neighbor colors).
pub fn wl1_refine(g: &Graph, init: Option<Coloring>) -> Result<Coloring> {
    let init = init.unwrap_or_else(|| Coloring::initial(g));
    if init.colors.len() != g.node_count() {
        return Err(MoseError::InvalidArgument("initial coloring size mismatch".into()));
    }
    refine_until_stable(g.node_count(), init, |colors| {
        Ok((0..g.node_count())
            .map(|v| {
                let mut nb: Vec<usize> = g.neighbors(v).iter().map(|&u| colors[u]).collect();
                nb.sort_unstable();
                (colors[v], nb)
            })
            .collect())
    })
}

/// Subgraph extraction policies for SWL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Policy {
    /// Induced ball of the given radius.
    Ego(usize),
    /// Nodes covered by every length-`length` walk from the center whose
    /// anonymous pattern is in `patterns`; enumeration is exhaustive.
    AnonymousWalks { length: usize, patterns: BTreeSet<AnonymousWalk> },
}

impl Policy {
    /// Node set of `v`, center first then ascending ids.
    pub fn node_set(&self, g: &Graph, v: usize) -> Vec<usize> {
        let mut set = match self {
            Policy::Ego(r) => g.ball(v, *r),
            Policy::AnonymousWalks { length, patterns } => {
                let mut covered = BTreeSet::new();
                let mut path = vec![v];
                cover_walks(g, *length, patterns, &mut path, &mut covered);
                covered.into_iter().collect()
            }
        };
        set.retain(|&u| u != v);
        set.sort_unstable();
        set.insert(0, v);
        set
    }

    pub fn node_sets(&self, g: &Graph) -> Vec<Vec<usize>> {
        (0..g.node_count()).map(|v| self.node_set(g, v)).collect()
    }
}

fn cover_walks(g: &Graph, length: usize, patterns: &BTreeSet<AnonymousWalk>, path: &mut Vec<usize>, covered: &mut BTreeSet<usize>) {
    if path.len() == length + 1 {
        if patterns.contains(&to_anonymous(path)) {
            covered.extend(path.iter().copied());
        }
        return;
    }
    let cur = *path.last().expect("non-empty path");
    for &u in g.neighbors(cur) {
        path.push(u);
        cover_walks(g, length, patterns, path, covered);
        path.pop();
    }
}

/// SWL: each round hashes the canonical form of the node's extracted
/// subgraph, colored by current colors with the center marked.
pub fn swl_refine(g: &Graph, policy: &Policy, init: Option<Coloring>) -> Result<Coloring> {
    let init = init.unwrap_or_else(|| Coloring::initial(g));
    let sets = policy.node_sets(g);
    let structures: Vec<Graph> = sets.iter().map(|s| induced_structure(g, s)).collect();
    refine_until_stable(g.node_count(), init, |colors| {
        sets.par_iter()
            .zip(&structures)
            .map(|(set, sub)| {
                let local: Vec<u64> = set
                    .iter()
                    .enumerate()
                    .map(|(i, &u)| 2 * colors[u] as u64 + u64::from(i == 0))
                    .collect();
                canonical_form(sub, &local)
            })
            .collect::<Result<Vec<CanonicalForm>>>()
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Refiner {
    Wl1,
    Swl(Policy),
}

impl Refiner {
    pub fn refine(&self, g: &Graph) -> Result<Coloring> {
        match self {
            Refiner::Wl1 => wl1_refine(g, None),
            Refiner::Swl(p) => swl_refine(g, p, None),
        }
    }
}

/// Disjoint union with `a`'s nodes first.
fn union(a: &Graph, b: &Graph) -> Result<Graph> {
    let n = a.node_count();
    let edges: Vec<(usize, usize)> = a.edges().chain(b.edges().map(|(u, v)| (u + n, v + n))).collect();
    let g = Graph::unlabeled(n + b.node_count(), &edges)?;
    match (a.node_labels(), b.node_labels()) {
        (Some(la), Some(lb)) => g.with_node_labels(Some(la.iter().chain(lb).copied().collect())),
        _ => Ok(g),
    }
}

/// True iff the stable color histograms differ. Both graphs are refined
/// together as one disjoint union so color ids are shared.
pub fn distinguish(a: &Graph, b: &Graph, refiner: &Refiner) -> Result<bool> {
    let c = refiner.refine(&union(a, b)?)?;
    let n = a.node_count();
    let mut ha: Vec<usize> = c.colors[..n].to_vec();
    let mut hb: Vec<usize> = c.colors[n..].to_vec();
    ha.sort_unstable();
    hb.sort_unstable();
    Ok(ha != hb)
}

/// Max-norm threshold above which two embeddings count as different.
pub const EMBEDDING_TOLERANCE: f64 = 1e-8;

/// Degree one-hot features of width `max_degree + 1`, shared by every graph
/// compared in one experiment.
pub fn with_degree_one_hot(g: &Graph, max_degree: usize) -> Result<Graph> {
    g.clone().with_features(degree_features(g, max_degree))
}

/// Compares eval-mode readout embeddings of the two graphs, each node
/// represented by its policy subgraph. Features must already match the model.
pub fn mose_distinguish(a: &Graph, b: &Graph, model: &MoseModel, policy: &Policy) -> Result<bool> {
    let ha = model.embed_graph(a, &policy.node_sets(a))?;
    let hb = model.embed_graph(b, &policy.node_sets(b))?;
    Ok(max_abs_diff(&ha, &hb) > EMBEDDING_TOLERANCE)
}

fn max_abs_diff(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Seeds 1-WL with the stable SWL coloring and reports whether 1-WL leaves
/// the partition unchanged.
pub fn swl_is_wl_stable(g: &Graph, policy: &Policy) -> Result<bool> {
    let swl = swl_refine(g, policy, None)?;
    let classes = swl.class_count();
    let wl = wl1_refine(g, Some(swl))?;
    Ok(wl.class_count() == classes)
}

/// One row of the pair-corpus report.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub id: usize,
    pub first: usize,
    pub second: usize,
    pub wl1: bool,
    pub swl: bool,
    /// Share of model initializations that separated the pair.
    pub mose_rate: Option<f64>,
}

impl PairRecord {
    /// SWL separates everything 1-WL separates.
    pub fn swl_covers_wl1(&self) -> bool {
        !self.wl1 || self.swl
    }

    /// The model separated the pair in at least `min_rate` of inits whenever
    /// SWL separates it, and never separated an SWL-equivalent pair.
    pub fn mose_agrees(&self, min_rate: f64) -> Option<bool> {
        self.mose_rate.map(|r| if self.swl { r >= min_rate } else { r == 0.0 })
    }
}

/// Distinguishing results over every unordered pair of non-isomorphic
/// graphs with at most `max_nodes` nodes.
#[derive(Debug, Clone)]
pub struct PairCorpus {
    pub graphs: Vec<Graph>,
    pub records: Vec<PairRecord>,
}

impl PairCorpus {
    /// Runs 1-WL and SWL under `policy` on every pair.
    pub fn build(max_nodes: usize, policy: &Policy) -> Result<Self> {
        let graphs = graph_corpus(max_nodes)?;
        let pairs: Vec<(usize, usize)> = (0..graphs.len()).flat_map(|i| (i + 1..graphs.len()).map(move |j| (i, j))).collect();
        let records = pairs
            .par_iter()
            .enumerate()
            .map(|(id, &(i, j))| {
                Ok(PairRecord {
                    id,
                    first: i,
                    second: j,
                    wl1: distinguish(&graphs[i], &graphs[j], &Refiner::Wl1)?,
                    swl: distinguish(&graphs[i], &graphs[j], &Refiner::Swl(policy.clone()))?,
                    mose_rate: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairCorpus { graphs, records })
    }

    /// Fills `mose_rate` using one model per seed from `make_model`; graph
    /// features are degree one-hots sized by the corpus maximum degree.
    pub fn add_model_rates(&mut self, policy: &Policy, seeds: &[u64], make_model: impl Fn(usize, u64) -> Result<MoseModel> + Sync) -> Result<()> {
        let max_degree = self.graphs.iter().map(Graph::max_degree).max().unwrap_or(0);
        let featured: Vec<Graph> = self.graphs.iter().map(|g| with_degree_one_hot(g, max_degree)).collect::<Result<_>>()?;
        let sets: Vec<Vec<Vec<usize>>> = featured.iter().map(|g| policy.node_sets(g)).collect();
        let per_seed: Vec<Vec<ndarray::Array1<f64>>> = seeds
            .par_iter()
            .map(|&seed| {
                let model = make_model(max_degree + 1, seed)?;
                featured.iter().zip(&sets).map(|(g, s)| model.embed_graph(g, s)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for r in &mut self.records {
            let hits = per_seed
                .iter()
                .filter(|emb| max_abs_diff(&emb[r.first], &emb[r.second]) > EMBEDDING_TOLERANCE)
                .count();
            r.mose_rate = Some(hits as f64 / seeds.len() as f64);
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W, min_rate: f64) -> std::io::Result<()> {
        writeln!(w, "pair_id,first,second,wl1_distinguished,swl_distinguished,mose_distinguished,mose_rate,swl_covers_wl1,mose_agrees_swl")?;
        for r in &self.records {
            let rate = r.mose_rate.map(|x| x.to_string()).unwrap_or_default();
            let mose = r.mose_rate.map(|x| (x >= min_rate).to_string()).unwrap_or_default();
            let agrees = r.mose_agrees(min_rate).map(|x| x.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{},{},{},{},{}", r.id, r.first, r.second, r.wl1, r.swl, mose, rate, r.swl_covers_wl1(), agrees)?;
        }
        Ok(())
    }
}
