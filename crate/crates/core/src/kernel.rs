//! P-step random walk kernels: the discrete count over the direct product
//! graph, an enumeration oracle, the feature-weighted differentiable form, and
//! the form against learnable hidden graphs with analytic gradients.
//!
//! For a subgraph with adjacency `A` (n×n) and features `X` (n×f), and a
//! hidden graph with adjacency `B` (s×s) and features `Z` (s×f), the
//! similarity matrix is `S = Z Xᵀ` (s×n) and
//!
//! ```text
//! K⁽ᵖ⁾ = 1ᵀ [S ⊙ Bᵖ S Aᵖ] 1 = sᵀ (Aᵖ ⊗ Bᵖ) s,   s = vec(S)
//! ```
//!
//! `Aᵖ` is never formed; `S Aᵖ` is built by repeated sparse products.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{MoseError, Result};
use crate::graph::{direct_product, Graph, NodeSubgraph};
use crate::nn::Mlp;

/// How kernel values over steps `p = 1..=P` become features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StepMode {
    /// Only `p = P`.
    Single,
    /// `Σ_p λ_p K⁽ᵖ⁾` as one feature.
    Sum,
    /// One feature `λ_p K⁽ᵖ⁾` per step.
    Concat,
}

impl std::str::FromStr for StepMode {
    type Err = MoseError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single-p" => Ok(StepMode::Single),
            "sum" | "sum-over-p" => Ok(StepMode::Sum),
            "concat" | "concat-over-p" => Ok(StepMode::Concat),
            other => Err(MoseError::InvalidArgument(format!("unknown step mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for StepMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StepMode::Single => "single-p",
            StepMode::Sum => "sum-over-p",
            StepMode::Concat => "concat-over-p",
        })
    }
}

/// Compression applied to kernel features before an expert's transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FeatureScaling {
    None,
    /// `sign(x) ln(1 + |x|)`.
    SignedLog,
}

impl FeatureScaling {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            FeatureScaling::None => x,
            FeatureScaling::SignedLog => x.signum() * x.abs().ln_1p(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            FeatureScaling::None => 1.0,
            FeatureScaling::SignedLog => 1.0 / (1.0 + x.abs()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelConfig {
    /// Maximum walk length `P`.
    pub max_step: usize,
    /// Step weights `λ_0..λ_P`.
    pub lambdas: Vec<f64>,
    pub step_mode: StepMode,
    pub scaling: FeatureScaling,
}

impl KernelConfig {
    /// Unit weights on every step.
    pub fn new(max_step: usize, step_mode: StepMode) -> Self {
        KernelConfig {
            max_step,
            lambdas: vec![1.0; max_step + 1],
            step_mode,
            scaling: FeatureScaling::SignedLog,
        }
    }

    /// Geometric weights `λ_p = γ^p`.
    pub fn geometric(max_step: usize, step_mode: StepMode, gamma: f64) -> Self {
        KernelConfig {
            lambdas: (0..=max_step).map(|p| gamma.powi(p as i32)).collect(),
            ..Self::new(max_step, step_mode)
        }
    }

    /// Single-step weights `λ = e_p`.
    pub fn unit_step(p: usize) -> Self {
        let mut lambdas = vec![0.0; p + 1];
        lambdas[p] = 1.0;
        KernelConfig {
            max_step: p,
            lambdas,
            step_mode: StepMode::Single,
            scaling: FeatureScaling::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_step == 0 {
            return Err(MoseError::InvalidArgument("max_step must be >= 1".into()));
        }
        if self.lambdas.len() != self.max_step + 1 || self.lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(MoseError::InvalidArgument(format!(
                "need {} non-negative step weights",
                self.max_step + 1
            )));
        }
        Ok(())
    }

    /// Features contributed by one hidden graph.
    pub fn features_per_graph(&self) -> usize {
        match self.step_mode {
            StepMode::Concat => self.max_step,
            StepMode::Single | StepMode::Sum => 1,
        }
    }

    /// Maps per-step values `K⁽⁰⁾..K⁽ᴾ⁾` to raw (unscaled) features.
    fn combine_steps(&self, values: &[f64], out: &mut Vec<f64>) {
        let p_max = self.max_step;
        match self.step_mode {
            StepMode::Single => out.push(self.lambdas[p_max] * values[p_max]),
            StepMode::Sum => out.push((1..=p_max).map(|p| self.lambdas[p] * values[p]).sum()),
            StepMode::Concat => out.extend((1..=p_max).map(|p| self.lambdas[p] * values[p])),
        }
    }

    /// Distributes feature gradients back onto per-step values.
    fn step_gradients(&self, feature_grads: &[f64]) -> Vec<f64> {
        let p_max = self.max_step;
        let mut g = vec![0.0; p_max + 1];
        match self.step_mode {
            StepMode::Single => g[p_max] = self.lambdas[p_max] * feature_grads[0],
            StepMode::Sum => {
                for p in 1..=p_max {
                    g[p] = self.lambdas[p] * feature_grads[0];
                }
            }
            StepMode::Concat => {
                for p in 1..=p_max {
                    g[p] = self.lambdas[p] * feature_grads[p - 1];
                }
            }
        }
        g
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self::new(3, StepMode::Concat)
    }
}

/// Number of length-`p` walks in `G × H` for each `p = 0..=max_p`, via the
/// materialized product graph.
pub fn product_walk_counts(g: &Graph, h: &Graph, max_p: usize) -> Vec<u128> {
    let product = direct_product(g, h);
    let mut counts = vec![1u128; product.node_count()];
    let mut totals = vec![counts.iter().sum()];
    for _ in 0..max_p {
        counts = (0..product.node_count())
            .map(|u| product.neighbors(u).iter().map(|&v| counts[v]).sum())
            .collect();
        totals.push(counts.iter().sum());
    }
    totals
}

/// Discrete kernel `Σ_p λ_p 1ᵀ A_×ᵖ 1` for `p = 0..=P`.
pub fn rwk_discrete(g: &Graph, h: &Graph, cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    let counts = product_walk_counts(g, h, cfg.max_step);
    Ok(counts.iter().zip(&cfg.lambdas).map(|(&c, &l)| l * c as f64).sum())
}

/// Counts pairs of simultaneous length-`p` walks by explicit enumeration.
pub fn rwk_oracle(g: &Graph, h: &Graph, p: usize) -> Result<u128> {
    const BUDGET: u128 = 10_000_000;
    let mut count = 0u128;
    for u in 0..g.node_count() {
        for u2 in 0..h.node_count() {
            count_simultaneous(g, h, u, u2, p, &mut count, BUDGET)?;
        }
    }
    Ok(count)
}

fn count_simultaneous(g: &Graph, h: &Graph, u: usize, u2: usize, left: usize, count: &mut u128, budget: u128) -> Result<()> {
    if left == 0 {
        *count += 1;
        if *count > budget {
            return Err(MoseError::Resource(format!("more than {budget} walk pairs")));
        }
        return Ok(());
    }
    for &v in g.neighbors(u) {
        for &v2 in h.neighbors(u2) {
            count_simultaneous(g, h, v, v2, left - 1, count, budget)?;
        }
    }
    Ok(())
}

/// Differentiable kernel `sᵀ A_×ᵖ s` with `s_(u,u') = x_u · x'_u'`. The product
/// operator is applied implicitly through pairs of neighbor lists.
pub fn rwk_diff(g: &Graph, h: &Graph, p: usize) -> Result<f64> {
    if g.feature_dim() != h.feature_dim() {
        return Err(MoseError::InvalidArgument(format!(
            "feature dimensions differ: {} vs {}",
            g.feature_dim(),
            h.feature_dim()
        )));
    }
    let (n, m) = (g.node_count(), h.node_count());
    let sim = g.features().dot(&h.features().t());
    let s: Vec<f64> = sim.iter().copied().collect();
    let mut cur = s.clone();
    for _ in 0..p {
        let mut next = vec![0.0; n * m];
        for u in 0..n {
            for u2 in 0..m {
                let mut acc = 0.0;
                for &v in g.neighbors(u) {
                    for &v2 in h.neighbors(u2) {
                        acc += cur[v * m + v2];
                    }
                }
                next[u * m + u2] = acc;
            }
        }
        cur = next;
    }
    Ok(s.iter().zip(&cur).map(|(a, b)| a * b).sum())
}

/// Learnable hidden graph: raw weights `W` (s×s) and features `Z` (s×f).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HiddenGraph {
    pub weights: Array2<f64>,
    pub features: Array2<f64>,
}

impl HiddenGraph {
    pub fn new(weights: Array2<f64>, features: Array2<f64>) -> Result<Self> {
        let s = weights.nrows();
        if s == 0 || weights.ncols() != s || features.nrows() != s {
            return Err(MoseError::InvalidArgument(format!(
                "hidden graph shapes W {:?}, Z {:?}",
                weights.shape(),
                features.shape()
            )));
        }
        Ok(HiddenGraph { weights, features })
    }

    pub fn size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// `rect((W + Wᵀ) / 2)` with a zero diagonal.
    pub fn adjacency(&self) -> Array2<f64> {
        let s = self.size();
        Array2::from_shape_fn((s, s), |(i, j)| {
            if i == j {
                0.0
            } else {
                (0.5 * (self.weights[[i, j]] + self.weights[[j, i]])).max(0.0)
            }
        })
    }

    /// Maps a gradient on the effective adjacency back onto `W`. The
    /// rectifier's kink gets subgradient 0.
    pub fn adjacency_grad_to_weights(&self, d_adj: &Array2<f64>) -> Array2<f64> {
        let s = self.size();
        let mut masked = Array2::zeros((s, s));
        for i in 0..s {
            for j in 0..s {
                if i != j && self.weights[[i, j]] + self.weights[[j, i]] > 0.0 {
                    masked[[i, j]] = d_adj[[i, j]];
                }
            }
        }
        (&masked + &masked.t()) * 0.5
    }

    /// Materializes the graph when the effective adjacency is 0/1-valued.
    pub fn to_graph(&self) -> Result<Graph> {
        let adj = self.adjacency();
        let s = self.size();
        let mut edges = Vec::new();
        for i in 0..s {
            for j in i + 1..s {
                match adj[[i, j]] {
                    0.0 => {}
                    1.0 => edges.push((i, j)),
                    x => {
                        return Err(MoseError::InvalidArgument(format!(
                            "adjacency entry {x} is not 0/1"
                        )))
                    }
                }
            }
        }
        Graph::from_edges(s, &edges, self.features.clone())
    }

    /// Versioned plain-text record: header, `s f`, then rows of `W` and `Z`.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "MOSE-HIDDEN-GRAPH v1")?;
        writeln!(out, "{} {}", self.size(), self.feature_dim())?;
        for m in [&self.weights, &self.features] {
            for row in m.rows() {
                let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(MoseError::format("hidden graph", i + 1, e.to_string())),
                None => Err(MoseError::format("hidden graph", 0, format!("missing {what}"))),
            }
        };
        let (line, magic) = next("header")?;
        if magic.trim() != "MOSE-HIDDEN-GRAPH v1" {
            return Err(MoseError::format("hidden graph", line, "bad magic"));
        }
        let (line, dims) = next("dimensions")?;
        let dims: Vec<usize> = dims
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| MoseError::format("hidden graph", line, format!("{e}")))?;
        let [s, f] = dims[..] else {
            return Err(MoseError::format("hidden graph", line, "expected `s f`"));
        };
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Array2<f64>> {
            let mut m = Array2::zeros((rows, cols));
            for r in 0..rows {
                let (line, text) = next("matrix row")?;
                let vals: Vec<f64> = text
                    .split_whitespace()
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| MoseError::format("hidden graph", line, format!("{e}")))?;
                if vals.len() != cols {
                    return Err(MoseError::format("hidden graph", line, format!("expected {cols} values")));
                }
                m.row_mut(r).assign(&Array1::from(vals));
            }
            Ok(m)
        };
        let w = read_matrix(s, s)?;
        let z = read_matrix(s, f)?;
        HiddenGraph::new(w, z)
    }

    /// Graphviz rendering of the effective adjacency. Edges lighter than
    /// `threshold` are dropped; pen width scales with weight.
    pub fn to_dot(&self, name: &str, threshold: f64) -> String {
        let adj = self.adjacency();
        let s = self.size();
        let max_w = adj.iter().cloned().fold(0.0, f64::max);
        let mut dot = String::new();
        let _ = writeln!(dot, "graph {name} {{");
        let _ = writeln!(dot, "  node [shape=circle];");
        for i in 0..s {
            let _ = writeln!(dot, "  {i};");
        }
        for i in 0..s {
            for j in i + 1..s {
                let w = adj[[i, j]];
                if w >= threshold && w > 0.0 {
                    let pen = 0.5 + 4.5 * w / max_w;
                    let _ = writeln!(dot, "  {i} -- {j} [weight={w:.4}, penwidth={pen:.3}];");
                }
            }
        }
        dot.push_str("}\n");
        dot
    }
}

/// `T · A` for row-major `T` (r×n) and the symmetric sparse adjacency of `g`.
pub(crate) fn right_multiply_adjacency(t: &Array2<f64>, g: &Graph) -> Array2<f64> {
    let (rows, n) = t.dim();
    let mut out = Array2::zeros((rows, n));
    for r in 0..rows {
        let src = t.row(r);
        let mut dst = out.row_mut(r);
        for j in 0..n {
            let mut acc = 0.0;
            for &i in g.neighbors(j) {
                acc += src[i];
            }
            dst[j] = acc;
        }
    }
    out
}

/// Per-step values `K⁽⁰⁾..K⁽ᴾ⁾` for similarity `S` (s×n), hidden adjacency `B`
/// and the subgraph structure `g`.
pub(crate) fn kernel_steps(sim: ArrayView2<f64>, g: &Graph, b: &Array2<f64>, max_p: usize) -> Vec<f64> {
    let mut values = Vec::with_capacity(max_p + 1);
    values.push(sim.iter().map(|x| x * x).sum());
    // Y_p = Bᵖ S Aᵖ, advanced one step at a time
    let mut y = sim.to_owned();
    for _ in 0..max_p {
        y = b.dot(&right_multiply_adjacency(&y, g));
        values.push((&sim * &y).sum());
    }
    values
}

/// Backward of [`kernel_steps`] given `∂L/∂K⁽ᵖ⁾`; returns `(∂L/∂S, ∂L/∂B)`.
pub(crate) fn kernel_steps_backward(
    sim: ArrayView2<f64>,
    g: &Graph,
    b: &Array2<f64>,
    upstream: &[f64],
) -> (Array2<f64>, Array2<f64>) {
    let max_p = upstream.len() - 1;
    let s = b.nrows();
    let mut b_pow = vec![Array2::<f64>::eye(s)];
    for p in 1..=max_p {
        b_pow.push(b_pow[p - 1].dot(b));
    }
    let mut d_sim = &sim * (2.0 * upstream[0]);
    let mut d_b = Array2::zeros((s, s));
    let mut t = sim.to_owned();
    for p in 1..=max_p {
        t = right_multiply_adjacency(&t, g);
        let gp = upstream[p];
        if gp == 0.0 {
            continue;
        }
        // ∂K/∂S = 2 Bᵖ S Aᵖ (both factors symmetric)
        d_sim.scaled_add(2.0 * gp, &b_pow[p].dot(&t));
        // ∂K/∂B = Σ_k Bᵏ Q B^(p-1-k), Q = S Aᵖ Sᵀ
        let q = t.dot(&sim.t());
        for k in 0..p {
            d_b.scaled_add(gp, &b_pow[k].dot(&q).dot(&b_pow[p - 1 - k]));
        }
    }
    (d_sim, d_b)
}

fn similarity(sub: &NodeSubgraph, h: &HiddenGraph) -> Result<Array2<f64>> {
    if sub.graph.feature_dim() != h.feature_dim() {
        return Err(MoseError::InvalidArgument(format!(
            "feature dimensions differ: subgraph {} vs hidden graph {}",
            sub.graph.feature_dim(),
            h.feature_dim()
        )));
    }
    Ok(h.features.dot(&sub.graph.features().t()))
}

/// Kernel between a subgraph and a hidden graph, evaluated as
/// `1ᵀ [S ⊙ Bᵖ (S Aᵖ)] 1`.
pub fn rwk_hidden(sub: &NodeSubgraph, h: &HiddenGraph, p: usize) -> Result<f64> {
    let sim = similarity(sub, h)?;
    let mut t = sim.clone();
    for _ in 0..p {
        t = right_multiply_adjacency(&t, &sub.graph);
    }
    let b = h.adjacency();
    for _ in 0..p {
        t = b.dot(&t);
    }
    Ok((&sim * &t).sum())
}

/// Kernel value with gradients on the hidden graph's raw weights and features.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad {
    pub value: f64,
    pub d_weights: Array2<f64>,
    pub d_features: Array2<f64>,
}

pub fn rwk_hidden_grad(sub: &NodeSubgraph, h: &HiddenGraph, p: usize) -> Result<KernelGrad> {
    let sim = similarity(sub, h)?;
    let b = h.adjacency();
    let value = kernel_steps(sim.view(), &sub.graph, &b, p)[p];
    let mut upstream = vec![0.0; p + 1];
    upstream[p] = 1.0;
    let (d_sim, d_b) = kernel_steps_backward(sim.view(), &sub.graph, &b, &upstream);
    Ok(KernelGrad {
        value,
        d_weights: h.adjacency_grad_to_weights(&d_b),
        d_features: d_sim.dot(sub.graph.features()),
    })
}

/// Raw kernel features of `sub` against every hidden graph of an expert,
/// laid out hidden-graph-major.
pub fn kernel_features(sub: &NodeSubgraph, hidden: &[HiddenGraph], cfg: &KernelConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(hidden.len() * cfg.features_per_graph());
    for h in hidden {
        let sim = similarity(sub, h)?;
        let values = kernel_steps(sim.view(), &sub.graph, &h.adjacency(), cfg.max_step);
        cfg.combine_steps(&values, &mut out);
    }
    Ok(out)
}

/// Expert embedding: scaled kernel features through the expert's transform.
/// `None` stands for the identity transform.
pub fn expert_embed(sub: &NodeSubgraph, hidden: &[HiddenGraph], cfg: &KernelConfig, transform: Option<&Mlp>) -> Result<Array1<f64>> {
    let raw = kernel_features(sub, hidden, cfg)?;
    let x = Array1::from_iter(raw.into_iter().map(|v| cfg.scaling.apply(v)));
    Ok(match transform {
        Some(mlp) => mlp.forward(&x),
        None => x,
    })
}

/// Kernel features for one expert from precomputed similarity blocks, with
/// everything the backward pass needs.
pub(crate) struct ExpertKernelTrace {
    pub raw: Vec<f64>,
}

pub(crate) fn expert_features_from_sims(
    sims: &[Array2<f64>],
    adjacencies: &[Array2<f64>],
    structure: &Graph,
    cfg: &KernelConfig,
) -> ExpertKernelTrace {
    let mut raw = Vec::with_capacity(sims.len() * cfg.features_per_graph());
    for (sim, b) in sims.iter().zip(adjacencies) {
        let values = kernel_steps(sim.view(), structure, b, cfg.max_step);
        cfg.combine_steps(&values, &mut raw);
    }
    ExpertKernelTrace { raw }
}

/// Backward through [`expert_features_from_sims`] and the scaling. Returns
/// `∂L/∂S_i` and `∂L/∂B_i` per hidden graph.
pub(crate) fn expert_features_backward(
    sims: &[Array2<f64>],
    adjacencies: &[Array2<f64>],
    structure: &Graph,
    cfg: &KernelConfig,
    trace: &ExpertKernelTrace,
    d_scaled: &Array1<f64>,
) -> Vec<(Array2<f64>, Array2<f64>)> {
    let width = cfg.features_per_graph();
    sims.iter()
        .zip(adjacencies)
        .enumerate()
        .map(|(i, (sim, b))| {
            let d_raw: Vec<f64> = (0..width)
                .map(|j| d_scaled[i * width + j] * cfg.scaling.derivative(trace.raw[i * width + j]))
                .collect();
            let upstream = cfg.step_gradients(&d_raw);
            kernel_steps_backward(sim.view(), structure, b, &upstream)
        })
        .collect()
}

/// Sum of all entries along both axes, kept for callers that want `1ᵀ M 1`.
pub fn entry_sum(m: &Array2<f64>) -> f64 {
    m.sum_axis(Axis(0)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{induced_subgraph, named::*};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(rng: &mut impl Rng, n: usize, p: f64, f: usize) -> Graph {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random_bool(p) {
                    edges.push((u, v));
                }
            }
        }
        let x = Array2::from_shape_fn((n, f), |_| rng.random_range(-1.0..1.0));
        Graph::from_edges(n, &edges, x).unwrap()
    }

    fn random_hidden(rng: &mut impl Rng, s: usize, f: usize) -> HiddenGraph {
        HiddenGraph::new(
            Array2::from_shape_fn((s, s), |_| rng.random_range(-0.5..1.0)),
            Array2::from_shape_fn((s, f), |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap()
    }

    fn whole(g: &Graph) -> NodeSubgraph {
        let nodes: Vec<usize> = (0..g.node_count()).collect();
        induced_subgraph(g, &nodes).unwrap()
    }

    #[test]
    fn discrete_examples() {
        let cfg0 = KernelConfig {
            lambdas: vec![1.0, 0.0, 0.0],
            ..KernelConfig::new(2, StepMode::Single)
        };
        assert_eq!(rwk_discrete(&path(2), &path(3), &cfg0).unwrap(), 6.0);
        assert_eq!(rwk_discrete(&path(2), &path(2), &KernelConfig::unit_step(1)).unwrap(), 4.0);
        let edgeless = Graph::unlabeled(3, &[]).unwrap();
        for p in 1..4 {
            assert_eq!(rwk_discrete(&cycle(4), &edgeless, &KernelConfig::unit_step(p)).unwrap(), 0.0);
        }
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(rwk_oracle(&cycle(3), &cycle(3), 1).unwrap(), 36);
        assert_eq!(rwk_oracle(&path(3), &cycle(5), 0).unwrap(), 15);
        // P2 has 2 length-2 walks and C3 has 12
        assert_eq!(path(2).total_walks(2), 2);
        assert_eq!(cycle(3).total_walks(2), 12);
        assert_eq!(rwk_oracle(&path(2), &cycle(3), 2).unwrap(), 24);
    }

    #[test]
    fn oracle_budget() {
        let k = complete(7);
        assert!(matches!(rwk_oracle(&k, &k, 5), Err(MoseError::Resource(_))));
    }

    #[test]
    fn diff_with_unit_features_counts_walks() {
        let g = Graph::unlabeled(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]).unwrap();
        let h = path(3);
        for p in 0..4 {
            assert_eq!(rwk_diff(&g, &h, p).unwrap(), rwk_oracle(&g, &h, p).unwrap() as f64);
        }
    }

    #[test]
    fn diff_zero_features_and_identity_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_graph(&mut rng, 5, 0.5, 3);
        let zero = path(3).with_features(Array2::zeros((3, 3))).unwrap();
        assert_eq!(rwk_diff(&g, &zero, 2).unwrap(), 0.0);
        let h = random_graph(&mut rng, 4, 0.5, 3);
        let direct: f64 = g.features().dot(&h.features().t()).iter().map(|x| x * x).sum();
        assert!((rwk_diff(&g, &h, 0).unwrap() - direct).abs() < 1e-12);
        assert!(rwk_diff(&g, &path(3), 1).is_err());
    }

    #[test]
    fn hidden_zero_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_graph(&mut rng, 5, 0.6, 2);
        let sub = whole(&g);
        let h = HiddenGraph::new(Array2::ones((3, 3)), Array2::zeros((3, 2))).unwrap();
        assert_eq!(rwk_hidden(&sub, &h, 2).unwrap(), 0.0);
        let single = HiddenGraph::new(array![[4.0]], array![[1.0, 2.0]]).unwrap();
        assert_eq!(rwk_hidden(&sub, &single, 1).unwrap(), 0.0);
    }

    #[test]
    fn hidden_matches_diff_on_binary_adjacency() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let g = random_graph(&mut rng, 4, 0.5, 3);
            let mut w = Array2::from_shape_fn((3, 3), |_| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
            w = &w + &w.t();
            w.mapv_inplace(|x| x / 2.0);
            let h = HiddenGraph::new(w, Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0))).unwrap();
            let hg = h.to_graph().unwrap();
            for p in 1..=3 {
                let a = rwk_hidden(&whole(&g), &h, p).unwrap();
                let b = rwk_diff(&g, &hg, p).unwrap();
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    fn finite_difference(sub: &NodeSubgraph, h: &HiddenGraph, p: usize) -> (Array2<f64>, Array2<f64>) {
        let eps = 1e-5;
        let mut dw = Array2::zeros(h.weights.raw_dim());
        for idx in ndarray::indices(h.weights.raw_dim()) {
            let mut plus = h.clone();
            plus.weights[idx] += eps;
            let mut minus = h.clone();
            minus.weights[idx] -= eps;
            dw[idx] = (rwk_hidden(sub, &plus, p).unwrap() - rwk_hidden(sub, &minus, p).unwrap()) / (2.0 * eps);
        }
        let mut dz = Array2::zeros(h.features.raw_dim());
        for idx in ndarray::indices(h.features.raw_dim()) {
            let mut plus = h.clone();
            plus.features[idx] += eps;
            let mut minus = h.clone();
            minus.features[idx] -= eps;
            dz[idx] = (rwk_hidden(sub, &plus, p).unwrap() - rwk_hidden(sub, &minus, p).unwrap()) / (2.0 * eps);
        }
        (dw, dz)
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let g = random_graph(&mut rng, 5, 0.5, 2);
            let h = random_hidden(&mut rng, 3, 2);
            for p in 1..=3 {
                let grad = rwk_hidden_grad(&whole(&g), &h, p).unwrap();
                let (dw, dz) = finite_difference(&whole(&g), &h, p);
                assert!(rel_err(&grad.d_weights, &dw) < 1e-5);
                assert!(rel_err(&grad.d_features, &dz) < 1e-5);
            }
        }
    }

    #[test]
    fn gradient_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_graph(&mut rng, 5, 0.6, 2);
        let zero_z = HiddenGraph::new(Array2::ones((3, 3)), Array2::zeros((3, 2))).unwrap();
        let grad = rwk_hidden_grad(&whole(&g), &zero_z, 2).unwrap();
        assert_eq!(grad.value, 0.0);
        assert!(grad.d_weights.iter().all(|&x| x == 0.0));
        assert!(grad.d_features.iter().all(|x| x.is_finite()));

        let negative = HiddenGraph::new(-Array2::ones((3, 3)), Array2::ones((3, 2))).unwrap();
        let grad = rwk_hidden_grad(&whole(&g), &negative, 2).unwrap();
        assert!(grad.d_weights.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn expert_embed_identity_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_graph(&mut rng, 5, 0.5, 2);
        let h = random_hidden(&mut rng, 3, 2);
        let mut cfg = KernelConfig::new(2, StepMode::Single);
        cfg.scaling = FeatureScaling::None;
        let e = expert_embed(&whole(&g), std::slice::from_ref(&h), &cfg, None).unwrap();
        assert_eq!(e.len(), 1);
        assert!((e[0] - rwk_hidden(&whole(&g), &h, 2).unwrap()).abs() < 1e-12);

        let hidden: Vec<_> = (0..4).map(|_| random_hidden(&mut rng, 3, 2)).collect();
        let width = kernel_features(&whole(&g), &hidden, &KernelConfig::new(3, StepMode::Concat)).unwrap();
        assert_eq!(width.len(), 12);
    }

    #[test]
    fn hidden_graph_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_hidden(&mut rng, 4, 3);
        let mut buf = Vec::new();
        h.write_to(&mut buf).unwrap();
        let back = HiddenGraph::read_from(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn dot_export_prunes_light_edges() {
        let w = array![[0.0, 1.0, 0.005], [1.0, 0.0, -1.0], [0.005, -1.0, 0.0]];
        let h = HiddenGraph::new(w, Array2::zeros((3, 1))).unwrap();
        let dot = h.to_dot("expert1_hg0", 0.01);
        assert!(dot.contains("0 -- 1"));
        assert!(!dot.contains("0 -- 2"));
        assert!(!dot.contains("1 -- 2"));
        assert!(dot.starts_with("graph expert1_hg0 {"));
    }

    #[test]
    fn entry_sum_matches_sum() {
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(entry_sum(&m), 10.0);
    }
}
