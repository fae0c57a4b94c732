//! Verification suites: each case compares an implementation against an
//! independent route (enumeration, finite differences, canonical forms) and
//! records a pass flag with a short diff.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::canon::{graph_corpus, rooted_isomorphic};
use crate::data::{with_degree_features, Dataset, TaskKind};
use crate::error::{MoseError, Result};
use crate::graph::{induced_subgraph, named, Graph, NodeSubgraph};
use crate::kernel::{rwk_diff, rwk_discrete, rwk_hidden, rwk_hidden_grad, rwk_oracle, HiddenGraph, KernelConfig};
use crate::moe::{CombineMode, ModelConfig, MoseModel, Readout};
use crate::rng::substream;
use crate::train::relative_error;
use crate::walks::{enumerate_anonymous_walks, to_anonymous, walk_distributions_distinguish, AnonymousWalk, ENUMERATION_BUDGET};
use crate::wl::{PairCorpus, Policy};

const ORACLE_BUDGET: u128 = 10_000_000;

/// Stream tag for verification sampling, disjoint from training tags.
const VERIFY_TAG: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    KernelOracle,
    Grad,
    Walks,
    Wl,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::KernelOracle, Suite::Grad, Suite::Walks, Suite::Wl];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::KernelOracle => "kernel-oracle",
            Suite::Grad => "grad",
            Suite::Walks => "walks",
            Suite::Wl => "wl",
        })
    }
}

impl FromStr for Suite {
    type Err = MoseError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| MoseError::InvalidArgument(format!("unknown suite {s:?} (kernel-oracle, grad, walks, wl)")))
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Largest graphs in the exhaustive kernel corpus.
    pub max_nodes: usize,
    /// Largest walk length in the kernel sweep.
    pub max_p: usize,
    pub seed: u64,
    /// Model initializations in the expressivity check.
    pub model_inits: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            max_nodes: 5,
            max_p: 4,
            seed: 0,
            model_inits: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: Vec<CaseResult>,
    /// Files produced by the suite: (file name, contents).
    pub artifacts: Vec<(String, String)>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn lines(&self) -> Vec<String> {
        self.cases
            .iter()
            .map(|c| {
                format!(
                    "{} {}/{}: {} ({:.1}s)",
                    if c.passed { "PASS" } else { "FAIL" },
                    self.suite,
                    c.name,
                    c.detail,
                    c.seconds
                )
            })
            .collect()
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CaseResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CaseResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> SuiteReport {
    let mut artifacts = Vec::new();
    let cases = match suite {
        Suite::KernelOracle => vec![
            timed("discrete-vs-oracle", || kernel_oracle_sweep(opts)),
            timed("hidden-vs-diff", || hidden_matches_diff(opts.seed, 500)),
        ],
        Suite::Grad => vec![
            timed("kernel-grad", || kernel_grad_check(opts.seed, 100)),
            timed("end-to-end-grad", || model_grad_check(opts.seed, 100)),
        ],
        Suite::Walks => vec![
            timed("anonymous-invariants", || anonymous_invariants(opts.seed, 10_000)),
            timed("relabeling-invariance", || relabeling_invariance(opts.seed, 1_000)),
            timed("enumeration-count", || enumeration_counts(opts.seed, 50)),
            timed("ego-distinguishing", || ego_distinguishing(opts.seed, 200)),
        ],
        Suite::Wl => vec![timed("pair-corpus", || {
            let corpus = expressivity_corpus(opts.seed, opts.model_inits)?;
            let mut csv = Vec::new();
            corpus
                .write_csv(&mut csv, MODEL_MIN_RATE)
                .map_err(|e| MoseError::Internal(e.to_string()))?;
            artifacts.push(("pair_corpus.csv".to_string(), String::from_utf8(csv).expect("ascii csv")));
            expressivity_verdict(&corpus, opts.model_inits)
        })],
    };
    SuiteReport { suite, cases, artifacts }
}

/// Erdős–Rényi graph on `n` nodes with zero-width features.
pub fn erdos_renyi(n: usize, p: f64, rng: &mut impl Rng) -> Graph {
    let edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
        .filter(|_| rng.random_bool(p))
        .collect();
    Graph::unlabeled(n, &edges).expect("valid edges")
}

fn random_features(g: Graph, f: usize, rng: &mut impl Rng) -> Graph {
    let x = Array2::from_shape_fn((g.node_count(), f), |_| rng.random_range(-1.0..1.0));
    g.with_features(x).expect("matching rows")
}

fn whole(g: &Graph) -> NodeSubgraph {
    let ids: Vec<usize> = (0..g.node_count()).collect();
    induced_subgraph(g, &ids).expect("all nodes")
}

fn oracle_agrees(g: &Graph, h: &Graph, max_p: usize) -> Result<Option<String>> {
    for p in 1..=max_p {
        let discrete = rwk_discrete(g, h, &KernelConfig::unit_step(p))?;
        let oracle = rwk_oracle(g, h, p)?;
        if discrete != oracle as f64 {
            return Ok(Some(format!("p={p}: discrete {discrete} vs oracle {oracle} ({} vs {} nodes)", g.node_count(), h.node_count())));
        }
    }
    Ok(None)
}

/// Exhaustive corpus pairs (including self pairs) plus random pairs of up to
/// six nodes; random pairs beyond the oracle budget are redrawn.
pub fn kernel_oracle_sweep(opts: &VerifyOptions) -> Result<(bool, String)> {
    let corpus = graph_corpus(opts.max_nodes)?;
    let pairs: Vec<(usize, usize)> = (0..corpus.len()).flat_map(|i| (i..corpus.len()).map(move |j| (i, j))).collect();
    let mismatches: Vec<String> = pairs
        .par_iter()
        .map(|&(i, j)| oracle_agrees(&corpus[i], &corpus[j], opts.max_p))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut rng = substream(opts.seed, &[VERIFY_TAG, 1]);
    let mut random = Vec::with_capacity(200);
    let mut redrawn = 0;
    while random.len() < 200 {
        let g = erdos_renyi(rng.random_range(1..=6), rng.random_range(0.2..0.8), &mut rng);
        let h = erdos_renyi(rng.random_range(1..=6), rng.random_range(0.2..0.8), &mut rng);
        let counts = crate::kernel::product_walk_counts(&g, &h, opts.max_p);
        if counts.iter().any(|&c| c > ORACLE_BUDGET) {
            redrawn += 1;
            continue;
        }
        random.push((g, h));
    }
    let random_mismatches: Vec<String> = random
        .par_iter()
        .map(|(g, h)| oracle_agrees(g, h, opts.max_p))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let total = mismatches.len() + random_mismatches.len();
    let first = mismatches.iter().chain(&random_mismatches).next().cloned().unwrap_or_default();
    Ok((
        total == 0,
        format!(
            "{} corpus pairs (<= {} nodes) and 200 random pairs (<= 6 nodes, {redrawn} redrawn over budget), p = 1..={}: {total} mismatches {first}",
            pairs.len(),
            opts.max_nodes,
            opts.max_p
        ),
    ))
}

/// Hidden graph whose rectified adjacency is a 0/1 matrix, so it can be
/// materialized as an ordinary graph.
fn binary_hidden(s: usize, f: usize, rng: &mut impl Rng) -> HiddenGraph {
    let mut w = Array2::zeros((s, s));
    for i in 0..s {
        for j in i..s {
            let v = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            w[[i, j]] = v;
            w[[j, i]] = v;
        }
    }
    let z = Array2::from_shape_fn((s, f), |_| rng.random_range(-1.0..1.0));
    HiddenGraph::new(w, z).expect("square weights")
}

pub fn hidden_matches_diff(seed: u64, instances: usize) -> Result<(bool, String)> {
    let results: Vec<f64> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, &[VERIFY_TAG, 2, i as u64]);
            let f = rng.random_range(1..=4);
            let g = random_features(erdos_renyi(rng.random_range(1..=12), rng.random_range(0.1..0.6), &mut rng), f, &mut rng);
            let h = binary_hidden(rng.random_range(2..=6), f, &mut rng);
            let p = rng.random_range(1..=4);
            let a = rwk_hidden(&whole(&g), &h, p)?;
            let b = rwk_diff(&g, &h.to_graph()?, p)?;
            let scale = a.abs().max(b.abs());
            Ok(if scale == 0.0 { 0.0 } else { (a - b).abs() / scale })
        })
        .collect::<Result<_>>()?;
    let worst = results.iter().copied().fold(0.0, f64::max);
    Ok((worst <= 1e-10, format!("{instances} instances, max relative difference {worst:.3e} (tolerance 1e-10)")))
}

/// Worst relative error of the analytic kernel gradient against central
/// differences over all entries of W and Z.
fn kernel_grad_error(sub: &NodeSubgraph, h: &HiddenGraph, p: usize) -> Result<f64> {
    let grad = rwk_hidden_grad(sub, h, p)?;
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for idx in ndarray::indices(h.weights.raw_dim()) {
        let (mut plus, mut minus) = (h.clone(), h.clone());
        plus.weights[idx] += step;
        minus.weights[idx] -= step;
        let numeric = (rwk_hidden(sub, &plus, p)? - rwk_hidden(sub, &minus, p)?) / (2.0 * step);
        worst = worst.max(relative_error(grad.d_weights[idx], numeric));
    }
    for idx in ndarray::indices(h.features.raw_dim()) {
        let (mut plus, mut minus) = (h.clone(), h.clone());
        plus.features[idx] += step;
        minus.features[idx] -= step;
        let numeric = (rwk_hidden(sub, &plus, p)? - rwk_hidden(sub, &minus, p)?) / (2.0 * step);
        worst = worst.max(relative_error(grad.d_features[idx], numeric));
    }
    Ok(worst)
}

pub fn kernel_grad_check(seed: u64, instances: usize) -> Result<(bool, String)> {
    let errors: Vec<f64> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, &[VERIFY_TAG, 3, i as u64]);
            let f = rng.random_range(1..=4);
            let g = random_features(erdos_renyi(rng.random_range(2..=8), 0.4, &mut rng), f, &mut rng);
            let s = rng.random_range(2..=5);
            // weights away from the rectifier kink
            let w = Array2::from_shape_fn((s, s), |_| {
                let m: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.7) { m } else { -m }
            });
            let z = Array2::from_shape_fn((s, f), |_| rng.random_range(-1.0..1.0));
            let h = HiddenGraph::new(w, z)?;
            kernel_grad_error(&whole(&g), &h, rng.random_range(1..=4))
        })
        .collect::<Result<_>>()?;
    let worst = errors.iter().copied().fold(0.0, f64::max);
    Ok((worst < 1e-4, format!("{instances} instances, max relative error {worst:.3e} (tolerance 1e-4)")))
}

fn grad_instance(seed: u64, i: usize) -> Result<f64> {
    let mut rng = substream(seed, &[VERIFY_TAG, 4, i as u64]);
    let graphs: Vec<Graph> = (0..3)
        .map(|c| {
            let g = erdos_renyi(rng.random_range(3..=7), 0.5, &mut rng);
            g.with_graph_label(Some(c % 2))
        })
        .collect();
    let ds = Dataset {
        name: "grad".into(),
        graphs: with_degree_features(graphs)?,
        task: TaskKind::GraphLevel,
        class_count: 2,
    };
    let cache = crate::cache::SubgraphCache::build(&ds, &crate::walks::WalkConfig { seed, ..Default::default() })?;
    let mut cfg = ModelConfig::new(ds.feature_dim(), 2, TaskKind::GraphLevel).with_experts(3);
    cfg.hidden_graphs = 2;
    cfg.hidden_dim = 5;
    cfg.combine = if i.is_multiple_of(2) { CombineMode::WeightedSum } else { CombineMode::Concat };
    cfg.readout = [Readout::Mean, Readout::Sum, Readout::Max][i % 3];
    let model = MoseModel::new(cfg, seed.wrapping_add(i as u64))?;
    let data = crate::train::TrainingData::new(&ds, &cache, &model)?;
    let report = crate::train::grad_check(&model, &data, &[0, 1, 2], 0.3, true, 1e-5, 6)?;
    Ok(report.max_relative_error)
}

pub fn model_grad_check(seed: u64, instances: usize) -> Result<(bool, String)> {
    let errors: Vec<f64> = (0..instances).into_par_iter().map(|i| grad_instance(seed, i)).collect::<Result<_>>()?;
    let worst = errors.iter().copied().fold(0.0, f64::max);
    Ok((worst < 1e-4, format!("{instances} model instances, max relative error {worst:.3e} (tolerance 1e-4)")))
}

fn check_anonymous(walk: &[usize], anon: &AnonymousWalk) -> bool {
    if !anon.is_valid() || anon.len() != walk.len() || anon.0[0] != 0 {
        return false;
    }
    (0..walk.len()).all(|i| (0..walk.len()).all(|j| (walk[i] == walk[j]) == (anon.0[i] == anon.0[j])))
}

pub fn anonymous_invariants(seed: u64, count: usize) -> Result<(bool, String)> {
    let mut rng = substream(seed, &[VERIFY_TAG, 5]);
    let mut bad = 0;
    for _ in 0..count {
        let len = rng.random_range(1..=12);
        let alphabet = rng.random_range(1..=8);
        let walk: Vec<usize> = (0..len).map(|_| rng.random_range(0..alphabet)).collect();
        if !check_anonymous(&walk, &to_anonymous(&walk)) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{count} fuzzed walks, {bad} violations")))
}

pub fn relabeling_invariance(seed: u64, count: usize) -> Result<(bool, String)> {
    let mut rng = substream(seed, &[VERIFY_TAG, 6]);
    let mut bad = 0;
    for _ in 0..count {
        let n = rng.random_range(2..=10);
        let g = erdos_renyi(n, 0.4, &mut rng);
        let v = rng.random_range(0..n);
        let walk = crate::walks::sample_walks(
            &g,
            v,
            &crate::walks::WalkConfig {
                walk_length: rng.random_range(1..=8),
                walks_per_node: 1,
                ..Default::default()
            },
            &mut rng,
        )
        .pop()
        .unwrap_or_else(|| vec![v]);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let relabeled: Vec<usize> = walk.iter().map(|&u| perm[u]).collect();
        let h = g.permute(&perm)?;
        let valid = relabeled.windows(2).all(|w| h.has_edge(w[0], w[1]));
        if !valid || to_anonymous(&walk) != to_anonymous(&relabeled) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{count} permuted pairs, {bad} mismatches")))
}

pub fn enumeration_counts(seed: u64, count: usize) -> Result<(bool, String)> {
    let mut rng = substream(seed, &[VERIFY_TAG, 7]);
    let mut bad = Vec::new();
    for i in 0..count {
        let n = rng.random_range(1..=10);
        let g = erdos_renyi(n, rng.random_range(0.1..0.6), &mut rng);
        let l = rng.random_range(1..=5);
        let v = rng.random_range(0..n);
        let multiset: u64 = enumerate_anonymous_walks(&g, v, l)?.values().sum();
        let expected = g.walk_count_vector(l)[v];
        if multiset as u128 != expected {
            bad.push(format!("graph {i}: {multiset} vs {expected}"));
        }
    }
    Ok((bad.is_empty(), format!("{count} graphs, {} mismatches {}", bad.len(), bad.first().cloned().unwrap_or_default())))
}

/// Radius-1 ego graph of `v` as a standalone graph rooted at local node 0.
fn ego(g: &Graph, v: usize) -> Graph {
    crate::graph::induced_structure(g, &Policy::Ego(1).node_set(g, v))
}

/// Rooted ego graphs of random sparse graphs. Non-isomorphic pairs must be
/// separated by walks of length `2·max(|E′|)` in at least 95% of cases;
/// each ego against a relabeled copy of itself must never be separated.
pub fn ego_distinguishing(seed: u64, count: usize) -> Result<(bool, String)> {
    let mut rng = substream(seed, &[VERIFY_TAG, 8]);
    let (mut separated, mut non_iso, mut iso_failures, mut iso_pairs, mut redrawn) = (0, 0, 0, 0, 0);
    let mut drawn = 0;
    while drawn < count {
        let pick = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(2..=12);
            let g = erdos_renyi(n, rng.random_range(0.1..0.4), rng);
            let v = rng.random_range(0..n);
            ego(&g, v)
        };
        let a = pick(&mut rng);
        let b = pick(&mut rng);
        let l = 2 * a.edge_count().max(b.edge_count());
        let within = |g: &Graph| l == 0 || g.walk_count_vector(l)[0] <= ENUMERATION_BUDGET;
        if !within(&a) || !within(&b) {
            redrawn += 1;
            continue;
        }
        drawn += 1;
        let l = l.max(1);
        if rooted_isomorphic(&a, 0, &b, 0)? {
            iso_pairs += 1;
            if walk_distributions_distinguish(&a, 0, &b, 0, l)? {
                iso_failures += 1;
            }
        } else {
            non_iso += 1;
            if walk_distributions_distinguish(&a, 0, &b, 0, l)? {
                separated += 1;
            }
        }
        let mut perm: Vec<usize> = (0..a.node_count()).collect();
        perm[1..].shuffle(&mut rng);
        let copy = a.permute(&perm)?;
        iso_pairs += 1;
        if walk_distributions_distinguish(&a, 0, &copy, perm[0], l)? {
            iso_failures += 1;
        }
    }
    let rate = if non_iso == 0 { 1.0 } else { separated as f64 / non_iso as f64 };
    Ok((
        rate >= 0.95 && iso_failures == 0,
        format!(
            "{count} rooted pairs ({redrawn} redrawn over budget): {separated}/{non_iso} non-isomorphic separated ({:.1}%, need >= 95%), {iso_failures}/{iso_pairs} isomorphic separated (need 0)",
            100.0 * rate
        ),
    ))
}

/// SWL model used by the expressivity check: degree one-hot inputs, sum
/// readout, concat-over-p with P = 3, random init.
pub fn expressivity_model(feature_dim: usize, seed: u64) -> Result<MoseModel> {
    let mut cfg = ModelConfig::new(feature_dim, 2, TaskKind::GraphLevel);
    cfg.readout = Readout::Sum;
    cfg.kernel = KernelConfig::new(3, crate::kernel::StepMode::Concat);
    MoseModel::new(cfg, seed)
}

/// Pair corpus of all graphs with at most six nodes.
pub fn expressivity_corpus(seed: u64, inits: usize) -> Result<PairCorpus> {
    let policy = Policy::Ego(1);
    let mut corpus = PairCorpus::build(6, &policy)?;
    let seeds: Vec<u64> = (0..inits as u64).map(|i| seed.wrapping_mul(1_000).wrapping_add(i)).collect();
    corpus.add_model_rates(&policy, &seeds, expressivity_model)?;
    Ok(corpus)
}

/// Share of initializations that must separate each SWL-separated pair.
pub const MODEL_MIN_RATE: f64 = 0.99;

pub fn expressivity(seed: u64, inits: usize) -> Result<(bool, String)> {
    expressivity_verdict(&expressivity_corpus(seed, inits)?, inits)
}

fn expressivity_verdict(corpus: &PairCorpus, inits: usize) -> Result<(bool, String)> {
    let min_rate = MODEL_MIN_RATE;
    let wl1: BTreeSet<usize> = corpus.records.iter().filter(|r| r.wl1).map(|r| r.id).collect();
    let swl: BTreeSet<usize> = corpus.records.iter().filter(|r| r.swl).map(|r| r.id).collect();
    let strict = wl1.is_subset(&swl) && swl.len() > wl1.len();
    let hexagon = {
        let c6 = named::cycle(6);
        let c3c3 = named::disjoint_copies(&named::cycle(3), 2);
        crate::wl::distinguish(&c6, &c3c3, &crate::wl::Refiner::Swl(Policy::Ego(1)))?
            && !crate::wl::distinguish(&c6, &c3c3, &crate::wl::Refiner::Wl1)?
    };
    let model_misses = corpus
        .records
        .iter()
        .filter(|r| r.swl && r.mose_rate.unwrap_or(0.0) * inits as f64 + 1e-9 < min_rate * inits as f64)
        .count();
    let worst = corpus.records.iter().filter(|r| r.swl).filter_map(|r| r.mose_rate).fold(1.0, f64::min);
    Ok((
        strict && hexagon && model_misses == 0,
        format!(
            "{} pairs: 1-WL separates {}, SWL-ego-1 separates {} (superset {}, strict {}), C6 vs 2C3 {}; model misses {} SWL pairs, worst rate {:.2} over {inits} inits",
            corpus.records.len(),
            wl1.len(),
            swl.len(),
            wl1.is_subset(&swl),
            swl.len() > wl1.len(),
            hexagon,
            model_misses,
            worst
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn small_sweeps_pass() {
        let opts = VerifyOptions { max_nodes: 3, max_p: 2, ..Default::default() };
        assert!(kernel_oracle_sweep(&opts).unwrap().0);
        assert!(hidden_matches_diff(1, 20).unwrap().0);
        assert!(kernel_grad_check(1, 5).unwrap().0);
        assert!(anonymous_invariants(1, 200).unwrap().0);
        assert!(enumeration_counts(1, 5).unwrap().0);
    }
}
