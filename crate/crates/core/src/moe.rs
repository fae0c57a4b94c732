//! Subgraph-aware noisy top-k gating, the expert bank of hidden-graph
//! kernels, expert combination and graph readout, with the per-node forward
//! and backward passes used by training.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::TaskKind;
use crate::error::{MoseError, Result};
use crate::graph::{Graph, NodeSubgraph};
use crate::kernel::{
    expert_features_backward, expert_features_from_sims, ExpertKernelTrace, HiddenGraph, KernelConfig,
};
use crate::nn::{sigmoid, softmax, softplus, Mlp, MlpTrace};
use crate::rng::{substream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GateActivation {
    Relu,
    Tanh,
    Identity,
}

impl GateActivation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            GateActivation::Relu => x.max(0.0),
            GateActivation::Tanh => x.tanh(),
            GateActivation::Identity => x,
        }
    }
}

impl std::str::FromStr for GateActivation {
    type Err = MoseError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(GateActivation::Relu),
            "tanh" => Ok(GateActivation::Tanh),
            "identity" => Ok(GateActivation::Identity),
            other => Err(MoseError::InvalidArgument(format!("unknown gate activation {other:?}"))),
        }
    }
}

impl std::fmt::Display for GateActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateActivation::Relu => "relu",
            GateActivation::Tanh => "tanh",
            GateActivation::Identity => "identity",
        })
    }
}

impl std::fmt::Display for CombineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CombineMode::WeightedSum => "weighted-sum",
            CombineMode::Concat => "concat",
        })
    }
}

impl std::fmt::Display for Readout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Readout::Mean => "mean",
            Readout::Sum => "sum",
            Readout::Max => "max",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CombineMode {
    WeightedSum,
    Concat,
}

impl std::str::FromStr for CombineMode {
    type Err = MoseError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted-sum" | "sum" => Ok(CombineMode::WeightedSum),
            "concat" => Ok(CombineMode::Concat),
            other => Err(MoseError::InvalidArgument(format!("unknown combine mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Readout {
    Mean,
    Sum,
    Max,
}

impl std::str::FromStr for Readout {
    type Err = MoseError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Readout::Mean),
            "sum" => Ok(Readout::Sum),
            "max" => Ok(Readout::Max),
            other => Err(MoseError::InvalidArgument(format!("unknown readout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub class_count: usize,
    pub task: TaskKind,
    pub experts: usize,
    pub hidden_graphs: usize,
    /// Hidden graph size per expert; strictly increasing.
    pub expert_sizes: Vec<usize>,
    pub hidden_dim: usize,
    pub k_ept: usize,
    pub combine: CombineMode,
    pub readout: Readout,
    pub gate_activation: GateActivation,
    pub kernel: KernelConfig,
}

impl ModelConfig {
    pub fn new(feature_dim: usize, class_count: usize, task: TaskKind) -> Self {
        ModelConfig {
            feature_dim,
            class_count,
            task,
            experts: 5,
            hidden_graphs: 8,
            expert_sizes: (2..=6).collect(),
            hidden_dim: 32,
            k_ept: 2,
            combine: CombineMode::WeightedSum,
            readout: Readout::Mean,
            gate_activation: GateActivation::Relu,
            kernel: KernelConfig::default(),
        }
    }

    /// Sets `K` together with the default sizes `2..=K+1`.
    pub fn with_experts(mut self, k: usize) -> Self {
        self.experts = k;
        self.expert_sizes = (2..k + 2).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        let bad = |m: String| Err(MoseError::InvalidArgument(m));
        if self.experts == 0 || self.expert_sizes.len() != self.experts {
            return bad(format!("{} experts but {} sizes", self.experts, self.expert_sizes.len()));
        }
        if self.expert_sizes.windows(2).any(|w| w[1] <= w[0]) || self.expert_sizes[0] == 0 {
            return bad("expert sizes must be positive and strictly increasing".into());
        }
        if self.k_ept == 0 || self.k_ept > self.experts {
            return bad(format!("k_ept must lie in 1..={}", self.experts));
        }
        if self.hidden_graphs == 0 || self.hidden_dim == 0 || self.class_count == 0 || self.feature_dim == 0 {
            return bad("hidden graphs, hidden dim, classes and features must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GatingParams {
    /// Clean score weights, f×K.
    pub clean: Array2<f64>,
    /// Noise scale weights, f×K.
    pub noise: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Expert {
    pub hidden: Vec<HiddenGraph>,
    pub transform: Mlp,
}

impl Expert {
    pub fn size(&self) -> usize {
        self.hidden[0].size()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExpertBank {
    pub experts: Vec<Expert>,
}

impl ExpertBank {
    pub fn sizes(&self) -> Vec<usize> {
        self.experts.iter().map(Expert::size).collect()
    }
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MoseParams {
    pub gating: GatingParams,
    pub bank: ExpertBank,
    pub combine: Option<Mlp>,
    pub head: Mlp,
}

impl MoseParams {
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut t = vec![&self.gating.clean, &self.gating.noise];
        for e in &self.bank.experts {
            for h in &e.hidden {
                t.push(&h.weights);
                t.push(&h.features);
            }
            t.extend(e.transform.tensors());
        }
        if let Some(c) = &self.combine {
            t.extend(c.tensors());
        }
        t.extend(self.head.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut t = vec![&mut self.gating.clean, &mut self.gating.noise];
        for e in &mut self.bank.experts {
            for h in &mut e.hidden {
                t.push(&mut h.weights);
                t.push(&mut h.features);
            }
            t.extend(e.transform.tensors_mut());
        }
        if let Some(c) = &mut self.combine {
            t.extend(c.tensors_mut());
        }
        t.extend(self.head.tensors_mut());
        t
    }

    /// Human-readable tensor names, aligned with [`MoseParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mlp_names = |prefix: &str, m: &Mlp| -> Vec<String> {
            (0..m.layers.len())
                .flat_map(|l| [format!("{prefix}.layer{l}.weight"), format!("{prefix}.layer{l}.bias")])
                .collect()
        };
        let mut n = vec!["gating.clean".to_string(), "gating.noise".to_string()];
        for (k, e) in self.bank.experts.iter().enumerate() {
            for i in 0..e.hidden.len() {
                n.push(format!("expert{k}.hidden{i}.weights"));
                n.push(format!("expert{k}.hidden{i}.features"));
            }
            n.extend(mlp_names(&format!("expert{k}.transform"), &e.transform));
        }
        if let Some(c) = &self.combine {
            n.extend(mlp_names("combine", c));
        }
        n.extend(mlp_names("head", &self.head));
        n
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &MoseParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Sparse expert selection for one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    /// Selected experts in ascending order.
    pub indices: Vec<usize>,
    /// Routing weights aligned with `indices`; positive and summing to 1.
    pub weights: Vec<f64>,
}

/// Attention-pooled gate input: `act(x_v + Σ_u α_uv x_u)` with `α` the
/// softmax of `x_uᵀ x_v` over the rows listed in `ids` (center included).
pub fn aggregate_rows(x: &Array2<f64>, ids: &[usize], center: usize, act: GateActivation) -> Array1<f64> {
    let xv = x.row(center);
    let scores: Vec<f64> = ids.iter().map(|&u| x.row(u).dot(&xv)).collect();
    let alpha = softmax(&scores);
    let mut eta = xv.to_owned();
    for (&u, &a) in ids.iter().zip(&alpha) {
        eta.scaled_add(a, &x.row(u));
    }
    eta.mapv_inplace(|v| act.apply(v));
    eta
}

/// Gate input of a subgraph whose features are read from the parent graph.
pub fn gate_aggregate(sub: &NodeSubgraph, x_parent: &Array2<f64>, act: GateActivation) -> Array1<f64> {
    aggregate_rows(x_parent, &sub.parent_ids, sub.center_parent(), act)
}

/// `ψ = ηW_g + ε ⊙ softplus(ηW_n)`; `eps = None` is evaluation mode.
pub fn gate_scores_with_noise(eta: &Array1<f64>, g: &GatingParams, eps: Option<&[f64]>) -> Array1<f64> {
    let mut psi = eta.dot(&g.clean);
    if let Some(eps) = eps {
        let noise = eta.dot(&g.noise);
        for k in 0..psi.len() {
            psi[k] += eps[k] * softplus(noise[k]);
        }
    }
    psi
}

pub fn gate_scores<R: Rng>(eta: &Array1<f64>, g: &GatingParams, train_mode: bool, rng: &mut R) -> Array1<f64> {
    if train_mode {
        let eps: Vec<f64> = (0..g.clean.ncols()).map(|_| rng.sample(StandardNormal)).collect();
        gate_scores_with_noise(eta, g, Some(&eps))
    } else {
        gate_scores_with_noise(eta, g, None)
    }
}

/// Keeps the `k` largest logits (ties to the lower index) and softmaxes them.
pub fn route(psi: &[f64], k: usize) -> Route {
    let k = k.min(psi.len());
    let mut order: Vec<usize> = (0..psi.len()).collect();
    order.sort_by(|&a, &b| psi[b].total_cmp(&psi[a]).then(a.cmp(&b)));
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    let retained: Vec<f64> = indices.iter().map(|&i| psi[i]).collect();
    Route {
        weights: softmax(&retained),
        indices,
    }
}

/// Weighted sum, or the transform of the zero-padded concatenation of
/// weighted embeddings (`K·d` wide).
pub fn combine(embeddings: &[(usize, Array1<f64>)], r: &Route, mode: CombineMode, transform: Option<&Mlp>, experts: usize) -> Result<Array1<f64>> {
    let find = |k: usize| {
        embeddings
            .iter()
            .find(|(i, _)| *i == k)
            .map(|(_, e)| e)
            .ok_or_else(|| MoseError::Internal(format!("no embedding for routed expert {k}")))
    };
    let d = match embeddings.first() {
        Some((_, e)) => e.len(),
        None => return Err(MoseError::Internal("no expert embeddings".into())),
    };
    match mode {
        CombineMode::WeightedSum => {
            let mut h = Array1::zeros(d);
            for (&k, &w) in r.indices.iter().zip(&r.weights) {
                h.scaled_add(w, find(k)?);
            }
            Ok(h)
        }
        CombineMode::Concat => {
            let mut c = Array1::zeros(experts * d);
            for (&k, &w) in r.indices.iter().zip(&r.weights) {
                c.slice_mut(s![k * d..(k + 1) * d]).scaled_add(w, find(k)?);
            }
            Ok(match transform {
                Some(t) => t.forward(&c),
                None => c,
            })
        }
    }
}

pub fn readout(nodes: &[Array1<f64>], mode: Readout) -> Result<Array1<f64>> {
    let first = nodes
        .first()
        .ok_or_else(|| MoseError::InvalidArgument("readout of an empty node set".into()))?;
    let mut acc = first.clone();
    for h in &nodes[1..] {
        match mode {
            Readout::Mean | Readout::Sum => acc += h,
            Readout::Max => acc.zip_mut_with(h, |a, &b| *a = a.max(b)),
        }
    }
    if mode == Readout::Mean {
        acc /= nodes.len() as f64;
    }
    Ok(acc)
}

/// Gradient of [`readout`] for each input node.
pub(crate) fn readout_backward(nodes: &[Array1<f64>], mode: Readout, upstream: &Array1<f64>) -> Vec<Array1<f64>> {
    let n = nodes.len();
    match mode {
        Readout::Sum => vec![upstream.clone(); n],
        Readout::Mean => vec![upstream / n as f64; n],
        Readout::Max => {
            let mut out = vec![Array1::zeros(upstream.len()); n];
            for j in 0..upstream.len() {
                let mut best = 0;
                for i in 1..n {
                    if nodes[i][j] > nodes[best][j] {
                        best = i;
                    }
                }
                out[best][j] = upstream[j];
            }
            out
        }
    }
}

/// Per-context projections `P_k = X Z_kᵀ` (n × N·s_k) for the experts in use.
#[derive(Debug, Clone)]
pub struct Projection {
    pub per_expert: Vec<Option<Array2<f64>>>,
}

/// Gate state of one node.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub eps: Option<Vec<f64>>,
    pub noise_pre: Array1<f64>,
    pub psi: Array1<f64>,
    pub route: Route,
}

pub struct ExpertTrace {
    pub expert: usize,
    sims: Vec<Array2<f64>>,
    kernel: ExpertKernelTrace,
    mlp: MlpTrace,
    pub embedding: Array1<f64>,
}

/// Everything the backward pass needs for one node.
pub struct NodeTrace {
    pub gate: GateTrace,
    pub experts: Vec<ExpertTrace>,
    combine_trace: Option<MlpTrace>,
    pub h: Array1<f64>,
}

impl NodeTrace {
    /// Experts whose kernels were evaluated for this node.
    pub fn experts_evaluated(&self) -> Vec<usize> {
        self.experts.iter().map(|e| e.expert).collect()
    }
}

/// Effective hidden adjacencies, computed once per parameter state.
pub struct Prepared {
    adjacency: Vec<Vec<Array2<f64>>>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MoseModel {
    pub config: ModelConfig,
    pub params: MoseParams,
}

impl MoseModel {
    /// Hidden `W ~ U(0,1)`, `Z ~ N(0, 1/f)`, gating `~ N(0, 0.1²)`,
    /// transforms with fan-in scaled normals.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, &[tag::INIT]);
        let f = config.feature_dim;
        let k = config.experts;
        let gate_dist = Normal::new(0.0, 0.1).expect("valid");
        let z_dist = Normal::new(0.0, (1.0 / f as f64).sqrt()).expect("valid");
        let gating = GatingParams {
            clean: Array2::from_shape_fn((f, k), |_| gate_dist.sample(&mut rng)),
            noise: Array2::from_shape_fn((f, k), |_| gate_dist.sample(&mut rng)),
        };
        let d = config.hidden_dim;
        let width = config.hidden_graphs * config.kernel.features_per_graph();
        let experts = config
            .expert_sizes
            .iter()
            .map(|&s| Expert {
                hidden: (0..config.hidden_graphs)
                    .map(|_| HiddenGraph {
                        weights: Array2::from_shape_fn((s, s), |_| rng.random::<f64>()),
                        features: Array2::from_shape_fn((s, f), |_| z_dist.sample(&mut rng)),
                    })
                    .collect(),
                transform: Mlp::new(&[width, d, d], &mut rng),
            })
            .collect();
        let combine = match config.combine {
            CombineMode::Concat => Some(Mlp::new(&[k * d, d, d], &mut rng)),
            CombineMode::WeightedSum => None,
        };
        let head = Mlp::new(&[d, d, config.class_count], &mut rng);
        Ok(MoseModel {
            params: MoseParams {
                gating,
                bank: ExpertBank { experts },
                combine,
                head,
            },
            config,
        })
    }

    pub fn prepare(&self) -> Prepared {
        Prepared {
            adjacency: self
                .params
                .bank
                .experts
                .iter()
                .map(|e| e.hidden.iter().map(HiddenGraph::adjacency).collect())
                .collect(),
        }
    }

    pub fn gate(&self, eta: &Array1<f64>, eps: Option<Vec<f64>>) -> GateTrace {
        let g = &self.params.gating;
        let psi = gate_scores_with_noise(eta, g, eps.as_deref());
        let noise_pre = if eps.is_some() { eta.dot(&g.noise) } else { Array1::zeros(0) };
        let route = route(psi.as_slice().expect("contiguous"), self.config.k_ept);
        GateTrace { eps, noise_pre, psi, route }
    }

    /// Projections for the listed experts; other slots stay empty.
    pub fn project(&self, x: &Array2<f64>, experts: &[usize]) -> Projection {
        let mut per_expert = vec![None; self.config.experts];
        for &k in experts {
            if per_expert[k].is_none() {
                per_expert[k] = Some(x.dot(&stacked_features(&self.params.bank.experts[k]).t()));
            }
        }
        Projection { per_expert }
    }

    /// Expert kernels, transforms and combination for a node whose gate has
    /// been evaluated. `structure` is the subgraph and `rows[j]` the
    /// projection row of its local node `j`.
    pub fn node_forward(&self, prep: &Prepared, structure: &Graph, rows: &[usize], proj: &Projection, gate: GateTrace) -> NodeTrace {
        let cfg = &self.config;
        let mut experts = Vec::with_capacity(gate.route.indices.len());
        for &k in &gate.route.indices {
            let expert = &self.params.bank.experts[k];
            let p = proj.per_expert[k].as_ref().expect("projection for routed expert");
            let s = expert.size();
            let sims: Vec<Array2<f64>> = (0..expert.hidden.len())
                .map(|i| Array2::from_shape_fn((s, rows.len()), |(a, j)| p[[rows[j], i * s + a]]))
                .collect();
            let kernel = expert_features_from_sims(&sims, &prep.adjacency[k], structure, &cfg.kernel);
            let scaled = Array1::from_iter(kernel.raw.iter().map(|&v| cfg.kernel.scaling.apply(v)));
            let (embedding, mlp) = expert.transform.forward_traced::<rand_chacha::ChaCha8Rng>(&scaled, 0.0, None);
            experts.push(ExpertTrace {
                expert: k,
                sims,
                kernel,
                mlp,
                embedding,
            });
        }
        let d = cfg.hidden_dim;
        let (h, combine_trace) = match cfg.combine {
            CombineMode::WeightedSum => {
                let mut h = Array1::zeros(d);
                for (e, &w) in experts.iter().zip(&gate.route.weights) {
                    h.scaled_add(w, &e.embedding);
                }
                (h, None)
            }
            CombineMode::Concat => {
                let mut c = Array1::zeros(cfg.experts * d);
                for (e, &w) in experts.iter().zip(&gate.route.weights) {
                    c.slice_mut(s![e.expert * d..(e.expert + 1) * d]).scaled_add(w, &e.embedding);
                }
                let mlp = self.params.combine.as_ref().expect("concat mode has a combine transform");
                let (h, t) = mlp.forward_traced::<rand_chacha::ChaCha8Rng>(&c, 0.0, None);
                (h, Some(t))
            }
        };
        NodeTrace {
            gate,
            experts,
            combine_trace,
            h,
        }
    }

    /// Backpropagates `dh` (and the importance gradient on routing weights,
    /// indexed by expert) through one node. Projection gradients land in
    /// `dproj`; everything else in `grads`.
    #[allow(clippy::too_many_arguments)]
    pub fn node_backward(
        &self,
        prep: &Prepared,
        structure: &Graph,
        rows: &[usize],
        eta: &Array1<f64>,
        trace: &NodeTrace,
        dh: &Array1<f64>,
        importance_grad: Option<&[f64]>,
        grads: &mut MoseParams,
        dproj: &mut ProjectionGrad,
    ) {
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let r = &trace.gate.route;
        let mut d_weights = vec![0.0; r.indices.len()];
        let mut d_embed: Vec<Array1<f64>> = Vec::with_capacity(r.indices.len());
        match cfg.combine {
            CombineMode::WeightedSum => {
                for (m, e) in trace.experts.iter().enumerate() {
                    d_weights[m] = e.embedding.dot(dh);
                    d_embed.push(dh * r.weights[m]);
                }
            }
            CombineMode::Concat => {
                let mlp = self.params.combine.as_ref().expect("combine transform");
                let gc = grads.combine.as_mut().expect("combine gradient");
                let dc = mlp.backward(trace.combine_trace.as_ref().expect("trace"), dh, gc);
                for (m, e) in trace.experts.iter().enumerate() {
                    let block = dc.slice(s![e.expert * d..(e.expert + 1) * d]);
                    d_weights[m] = e.embedding.dot(&block);
                    d_embed.push(&block * r.weights[m]);
                }
            }
        }
        if let Some(ig) = importance_grad {
            for (m, &k) in r.indices.iter().enumerate() {
                d_weights[m] += ig[k];
            }
        }
        // softmax over the retained logits
        let inner: f64 = r.weights.iter().zip(&d_weights).map(|(w, g)| w * g).sum();
        for (m, &k) in r.indices.iter().enumerate() {
            let dpsi = r.weights[m] * (d_weights[m] - inner);
            if dpsi == 0.0 {
                continue;
            }
            grads.gating.clean.column_mut(k).scaled_add(dpsi, eta);
            if let Some(eps) = &trace.gate.eps {
                let pre = trace.gate.noise_pre[k];
                grads.gating.noise.column_mut(k).scaled_add(dpsi * eps[k] * sigmoid(pre), eta);
            }
        }

        for (e, de) in trace.experts.iter().zip(&d_embed) {
            let k = e.expert;
            let expert = &self.params.bank.experts[k];
            let ge = &mut grads.bank.experts[k];
            let d_scaled = expert.transform.backward(&e.mlp, de, &mut ge.transform);
            let per_hidden = expert_features_backward(&e.sims, &prep.adjacency[k], structure, &cfg.kernel, &e.kernel, &d_scaled);
            let s = expert.size();
            let dp = dproj.per_expert[k].as_mut().expect("projection gradient slot");
            for (i, (d_sim, d_b)) in per_hidden.into_iter().enumerate() {
                ge.hidden[i].weights += &expert.hidden[i].adjacency_grad_to_weights(&d_b);
                for (j, &row) in rows.iter().enumerate() {
                    for a in 0..s {
                        dp[[row, i * s + a]] += d_sim[[a, j]];
                    }
                }
            }
        }
    }

    /// Turns accumulated projection gradients into hidden-feature gradients.
    pub fn projection_backward(&self, x: &Array2<f64>, dproj: &ProjectionGrad, grads: &mut MoseParams) {
        for (k, dp) in dproj.per_expert.iter().enumerate() {
            let Some(dp) = dp else { continue };
            let dz = dp.t().dot(x);
            let s = self.params.bank.experts[k].size();
            for (i, h) in grads.bank.experts[k].hidden.iter_mut().enumerate() {
                h.features += &dz.slice(s![i * s..(i + 1) * s, ..]);
            }
        }
    }

    /// Single-subgraph forward in the order gate, route, selected experts,
    /// combine, head. Training mode draws gate noise from `rng`.
    pub fn forward<R: Rng>(&self, sub: &NodeSubgraph, train_mode: bool, rng: &mut R) -> Result<(Array1<f64>, Route)> {
        let x = sub.graph.features();
        if x.ncols() != self.config.feature_dim {
            return Err(MoseError::InvalidArgument(format!(
                "model expects {} features, subgraph has {}",
                self.config.feature_dim,
                x.ncols()
            )));
        }
        let ids: Vec<usize> = (0..sub.node_count()).collect();
        let eta = aggregate_rows(x, &ids, sub.center, self.config.gate_activation);
        let eps = train_mode.then(|| (0..self.config.experts).map(|_| rng.sample(StandardNormal)).collect());
        let gate = self.gate(&eta, eps);
        let proj = self.project(x, &gate.route.indices);
        let route = gate.route.clone();
        let trace = self.node_forward(&self.prepare(), &sub.graph, &ids, &proj, gate);
        Ok((self.params.head.forward(&trace.h), route))
    }

    /// Eval-mode readout embedding of `g`, with node `v` represented by the
    /// subgraph induced on `node_sets[v]` (center first).
    pub fn embed_graph(&self, g: &Graph, node_sets: &[Vec<usize>]) -> Result<Array1<f64>> {
        if g.feature_dim() != self.config.feature_dim {
            return Err(MoseError::InvalidArgument(format!(
                "model expects {} features, graph has {}",
                self.config.feature_dim,
                g.feature_dim()
            )));
        }
        if node_sets.len() != g.node_count() {
            return Err(MoseError::InvalidArgument("one node set per node required".into()));
        }
        let prep = self.prepare();
        let x = g.features();
        let gates: Vec<GateTrace> = node_sets
            .iter()
            .map(|set| self.gate(&aggregate_rows(x, set, set[0], self.config.gate_activation), None))
            .collect();
        let mut used: Vec<usize> = gates.iter().flat_map(|t| t.route.indices.iter().copied()).collect();
        used.sort_unstable();
        used.dedup();
        let proj = self.project(x, &used);
        let hs: Vec<Array1<f64>> = node_sets
            .iter()
            .zip(gates)
            .map(|(set, gate)| self.node_forward(&prep, &crate::graph::induced_structure(g, set), set, &proj, gate).h)
            .collect();
        readout(&hs, self.config.readout)
    }
}

/// Gradient buffers matching a [`Projection`].
#[derive(Debug, Clone)]
pub struct ProjectionGrad {
    pub per_expert: Vec<Option<Array2<f64>>>,
}

impl ProjectionGrad {
    pub fn zeros_like(p: &Projection) -> Self {
        ProjectionGrad {
            per_expert: p.per_expert.iter().map(|o| o.as_ref().map(|m| Array2::zeros(m.raw_dim()))).collect(),
        }
    }
}

/// Hidden feature matrices of an expert stacked row-wise (N·s × f).
fn stacked_features(e: &Expert) -> Array2<f64> {
    let views: Vec<_> = e.hidden.iter().map(|h| h.features.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{induced_subgraph, named::*};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn aggregate_examples() {
        let x = ndarray::array![[1.0, -2.0], [3.0, 0.5]];
        let eta = aggregate_rows(&x, &[0], 0, GateActivation::Identity);
        assert_eq!(eta.to_vec(), vec![2.0, -4.0]);
        let same = ndarray::array![[0.5, 1.0], [0.5, 1.0], [0.5, 1.0]];
        let eta = aggregate_rows(&same, &[0, 1, 2], 1, GateActivation::Relu);
        assert!((eta[0] - 1.0).abs() < 1e-15 && (eta[1] - 2.0).abs() < 1e-15);
        let zero = Array2::zeros((2, 3));
        let eta = aggregate_rows(&zero, &[0, 1], 0, GateActivation::Tanh);
        assert!(eta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_score_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eta = Array1::from(vec![0.3, -0.2]);
        let g = GatingParams {
            clean: ndarray::array![[1.0, 2.0, 0.5], [0.0, -1.0, 1.0]],
            noise: Array2::from_elem((2, 3), -1e3),
        };
        let clean = eta.dot(&g.clean);
        assert_eq!(gate_scores(&eta, &g, false, &mut rng), clean);
        let noisy = gate_scores(&eta, &g, true, &mut rng);
        for k in 0..3 {
            assert!((noisy[k] - clean[k]).abs() < 1e-6);
        }
        let zero = Array1::zeros(2);
        let eps = [0.7, -1.2, 0.1];
        let psi = gate_scores_with_noise(&zero, &g, Some(&eps));
        for k in 0..3 {
            assert!((psi[k] - eps[k] * 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn route_examples() {
        let r = route(&[0.5, 2.0, 1.0], 2);
        assert_eq!(r.indices, vec![1, 2]);
        assert!((r.weights[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((r.weights[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        let all = route(&[0.1, -0.3, 0.2], 3);
        assert!((all.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let flat = route(&[1.0; 4], 2);
        assert_eq!(flat.indices, vec![0, 1]);
        assert_eq!(flat.weights, vec![0.5, 0.5]);
        let scaled = route(&[1.5, 6.0, 3.0], 2);
        assert_eq!(scaled.indices, r.indices);
    }

    #[test]
    fn combine_and_readout_examples() {
        let a = Array1::from(vec![1.0, 2.0]);
        let b = Array1::from(vec![3.0, 6.0]);
        let one = Route { indices: vec![1], weights: vec![1.0] };
        let h = combine(&[(1, a.clone())], &one, CombineMode::WeightedSum, None, 3).unwrap();
        assert_eq!(h, a);
        let two = Route { indices: vec![0, 2], weights: vec![0.5, 0.5] };
        let h = combine(&[(0, a.clone()), (2, b.clone())], &two, CombineMode::WeightedSum, None, 3).unwrap();
        assert_eq!(h.to_vec(), vec![2.0, 4.0]);
        let c = combine(&[(0, a.clone()), (2, b.clone())], &two, CombineMode::Concat, None, 3).unwrap();
        assert_eq!(c.to_vec(), vec![0.5, 1.0, 0.0, 0.0, 1.5, 3.0]);
        assert!(combine(&[(0, a.clone())], &two, CombineMode::WeightedSum, None, 3).is_err());

        assert_eq!(readout(std::slice::from_ref(&a), Readout::Mean).unwrap(), a);
        assert_eq!(readout(&[a.clone(), b.clone()], Readout::Mean).unwrap().to_vec(), vec![2.0, 4.0]);
        assert_eq!(readout(&[b.clone(), a.clone()], Readout::Max).unwrap(), readout(&[a.clone(), b.clone()], Readout::Max).unwrap());
        assert!(readout(&[], Readout::Sum).is_err());
    }

    fn small_model(combine: CombineMode, seed: u64) -> MoseModel {
        let mut cfg = ModelConfig::new(3, 2, TaskKind::GraphLevel).with_experts(3);
        cfg.hidden_graphs = 2;
        cfg.hidden_dim = 4;
        cfg.combine = combine;
        MoseModel::new(cfg, seed).unwrap()
    }

    fn featured(g: Graph, seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g.node_count();
        g.with_features(Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn forward_is_deterministic_and_sparse() {
        let g = featured(cycle(5), 1);
        let sub = induced_subgraph(&g, &[0, 1, 4, 2]).unwrap();
        for mode in [CombineMode::WeightedSum, CombineMode::Concat] {
            let model = small_model(mode, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (a, ra) = model.forward(&sub, false, &mut rng).unwrap();
            let (b, rb) = model.forward(&sub, false, &mut rng).unwrap();
            assert_eq!(a, b);
            assert_eq!(ra, rb);
            assert_eq!(a.len(), 2);
            assert_eq!(ra.indices.len(), 2);
        }
        let model = small_model(CombineMode::WeightedSum, 3);
        let ids: Vec<usize> = (0..sub.node_count()).collect();
        let eta = aggregate_rows(sub.graph.features(), &ids, 0, GateActivation::Relu);
        let gate = model.gate(&eta, None);
        let selected = gate.route.indices.clone();
        let proj = model.project(sub.graph.features(), &selected);
        assert_eq!(proj.per_expert.iter().filter(|p| p.is_some()).count(), 2);
        let trace = model.node_forward(&model.prepare(), &sub.graph, &ids, &proj, gate);
        assert_eq!(trace.experts_evaluated(), selected);
    }

    #[test]
    fn forward_is_invariant_to_subgraph_order() {
        let g = featured(Graph::unlabeled(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (1, 3)]).unwrap(), 5);
        let model = small_model(CombineMode::Concat, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = model.forward(&induced_subgraph(&g, &[1, 0, 2, 3]).unwrap(), false, &mut rng).unwrap().0;
        let b = model.forward(&induced_subgraph(&g, &[1, 3, 2, 0]).unwrap(), false, &mut rng).unwrap().0;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn params_enumerate_consistently() {
        let model = small_model(CombineMode::Concat, 1);
        let names = model.params.tensor_names();
        assert_eq!(names.len(), model.params.tensors().len());
        assert_eq!(model.params.bank.sizes(), vec![2, 3, 4]);
        assert!(model.params.zeros_like().norm() == 0.0);
    }
}
