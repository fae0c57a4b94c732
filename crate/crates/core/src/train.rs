//! Losses, the optimization loop, evaluation metrics, cross-validation and
//! the end-to-end gradient check.
//!
//! Work fans out over fixed-size chunks of items and is reduced in chunk
//! order, and every random draw comes from a stream keyed by the run seed and
//! the item, so results do not depend on the number of worker threads.

use std::io::Write;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::cache::SubgraphCache;
use crate::data::{Dataset, TaskKind};
use crate::error::{MoseError, Result};
use crate::graph::{induced_structure, Graph};
use crate::moe::{aggregate_rows, readout, readout_backward, GateTrace, MoseModel, MoseParams, Projection, ProjectionGrad, Prepared};
use crate::nn::{cross_entropy, Adam};
use crate::rng::{substream, tag};

/// Guard added to the mean in the coefficient of variation.
pub const CV_EPSILON: f64 = 1e-10;

/// Items per parallel work unit. Fixed so reductions never depend on the
/// thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta: f64,
    /// Graphs per batch for graph tasks; node tasks are full-batch.
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Share of each training fold held out for validation in graph tasks.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 1e-3,
            beta: 0.1,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dropout: 0.2,
            seed: 0,
            patience: 30,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MoseError::InvalidArgument(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Squared coefficient of variation of per-expert importance totals, using
/// the population standard deviation.
pub fn cv_squared(totals: &[f64]) -> f64 {
    let k = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / k;
    let var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / k;
    var / (mean + CV_EPSILON).powi(2)
}

/// Gradient of [`cv_squared`] with respect to each total.
pub fn cv_squared_grad(totals: &[f64]) -> Vec<f64> {
    let k = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / k;
    let var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / k;
    let m = mean + CV_EPSILON;
    totals
        .iter()
        .map(|t| (2.0 / k) * ((t - mean) / (m * m) - var / (m * m * m)))
        .collect()
}

/// Per-expert sums of routing weights.
pub fn importance(routes: &[&crate::moe::Route], experts: usize) -> Vec<f64> {
    let mut totals = vec![0.0; experts];
    for r in routes {
        for (&k, &w) in r.indices.iter().zip(&r.weights) {
            totals[k] += w;
        }
    }
    totals
}

pub fn importance_loss(routes: &[&crate::moe::Route], experts: usize) -> Result<f64> {
    if routes.is_empty() {
        return Err(MoseError::InvalidArgument("importance over an empty batch".into()));
    }
    Ok(cv_squared(&importance(routes, experts)))
}

pub fn total_loss(task_loss: f64, imp_loss: f64, beta: f64) -> f64 {
    task_loss + beta * imp_loss
}

/// Per-graph state shared by every epoch: subgraph structures, their parent
/// ids, and the parameter-free gate inputs.
#[derive(Debug, Clone)]
pub struct Context {
    pub structures: Vec<Graph>,
    pub node_sets: Vec<Vec<usize>>,
    pub eta: Vec<Array1<f64>>,
}

/// A dataset joined with its subgraph cache, ready for training.
pub struct TrainingData<'a> {
    pub dataset: &'a Dataset,
    pub contexts: Vec<Context>,
    pub labels: Vec<usize>,
}

impl<'a> TrainingData<'a> {
    pub fn new(dataset: &'a Dataset, cache: &SubgraphCache, model: &MoseModel) -> Result<Self> {
        dataset.validate()?;
        if cache.graphs.len() != dataset.graphs.len() {
            return Err(MoseError::InvalidArgument("subgraph cache does not cover the dataset".into()));
        }
        if dataset.feature_dim() != model.config.feature_dim || dataset.class_count != model.config.class_count {
            return Err(MoseError::InvalidArgument("model dimensions do not match the dataset".into()));
        }
        let act = model.config.gate_activation;
        let contexts = dataset
            .graphs
            .iter()
            .zip(&cache.graphs)
            .map(|(g, ex)| {
                if ex.node_sets.len() != g.node_count() {
                    return Err(MoseError::InvalidArgument("subgraph cache does not cover every node".into()));
                }
                let (structures, eta) = ex
                    .node_sets
                    .par_iter()
                    .map(|set| (induced_structure(g, set), aggregate_rows(g.features(), set, set[0], act)))
                    .unzip();
                Ok(Context {
                    structures,
                    node_sets: ex.node_sets.clone(),
                    eta,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingData {
            dataset,
            contexts,
            labels: dataset.labels(),
        })
    }

    pub fn task(&self) -> TaskKind {
        self.dataset.task
    }

    pub fn item_count(&self) -> usize {
        self.labels.len()
    }

    fn context_of(&self, item: usize) -> usize {
        match self.task() {
            TaskKind::GraphLevel => item,
            TaskKind::NodeLevel => 0,
        }
    }

    fn item_nodes(&self, item: usize) -> Vec<usize> {
        match self.task() {
            TaskKind::GraphLevel => (0..self.dataset.graphs[item].node_count()).collect(),
            TaskKind::NodeLevel => vec![item],
        }
    }
}

/// How a batch is run.
#[derive(Debug, Clone, Copy)]
pub struct BatchMode {
    /// Draw gate noise (training mode).
    pub noise: bool,
    pub dropout: f64,
    pub with_grads: bool,
    pub beta: f64,
    pub seed: u64,
    pub epoch: u64,
}

impl BatchMode {
    pub fn eval() -> Self {
        BatchMode {
            noise: false,
            dropout: 0.0,
            with_grads: false,
            beta: 0.0,
            seed: 0,
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// Mean cross-entropy.
    pub loss_task: f64,
    pub loss_importance: f64,
    pub importance: Vec<f64>,
    pub predictions: Vec<usize>,
    pub grads: Option<MoseParams>,
    /// Expert sets per node, in item then node order.
    pub selections: Vec<Vec<usize>>,
}

impl BatchOutcome {
    pub fn total_loss(&self, beta: f64) -> f64 {
        total_loss(self.loss_task, self.loss_importance, beta)
    }
}

struct ChunkResult {
    loss: f64,
    predictions: Vec<usize>,
    grads: Option<MoseParams>,
    dproj: Option<ProjectionGrad>,
}

fn gate_noise(seed: u64, epoch: u64, item: usize, node: usize, experts: usize) -> Vec<f64> {
    let mut rng = substream(seed, &[tag::GATE_NOISE, epoch, item as u64, node as u64]);
    (0..experts).map(|_| rng.sample(StandardNormal)).collect()
}

/// Forward (and optionally backward) over `items`. Gates are evaluated
/// first so the importance loss of the whole batch is known before any
/// gradient is formed.
pub fn run_batch(model: &MoseModel, prep: &Prepared, data: &TrainingData, items: &[usize], mode: BatchMode) -> Result<BatchOutcome> {
    if items.is_empty() {
        return Err(MoseError::InvalidArgument("empty batch".into()));
    }
    let experts = model.config.experts;
    let gates: Vec<Vec<GateTrace>> = items
        .par_iter()
        .map(|&item| {
            let ctx = &data.contexts[data.context_of(item)];
            data.item_nodes(item)
                .into_iter()
                .map(|v| {
                    let eps = mode.noise.then(|| gate_noise(mode.seed, mode.epoch, item, v, experts));
                    model.gate(&ctx.eta[v], eps)
                })
                .collect()
        })
        .collect();
    let routes: Vec<&crate::moe::Route> = gates.iter().flatten().map(|g| &g.route).collect();
    let totals = importance(&routes, experts);
    let loss_importance = cv_squared(&totals);
    let imp_grad: Vec<f64> = cv_squared_grad(&totals).into_iter().map(|g| g * mode.beta).collect();
    let selections: Vec<Vec<usize>> = routes.iter().map(|r| r.indices.clone()).collect();

    let shared = match data.task() {
        TaskKind::NodeLevel => {
            let mut used: Vec<usize> = selections.iter().flatten().copied().collect();
            used.sort_unstable();
            used.dedup();
            Some(model.project(data.dataset.graphs[0].features(), &used))
        }
        TaskKind::GraphLevel => None,
    };
    let scale = 1.0 / items.len() as f64;
    let chunks: Vec<(&[usize], Vec<GateTrace>)> = {
        let mut gates = gates.into_iter();
        items
            .chunks(CHUNK)
            .map(|c| (c, gates.by_ref().take(c.len()).flatten().collect()))
            .collect()
    };
    let results = chunks
        .into_par_iter()
        .map(|(chunk, chunk_gates)| {
            let mut result = ChunkResult {
                loss: 0.0,
                predictions: Vec::with_capacity(chunk.len()),
                grads: mode.with_grads.then(|| model.params.zeros_like()),
                dproj: match (&shared, mode.with_grads) {
                    (Some(p), true) => Some(ProjectionGrad::zeros_like(p)),
                    _ => None,
                },
            };
            let mut gates = chunk_gates.into_iter();
            for &item in chunk {
                let nodes = data.item_nodes(item);
                let item_gates: Vec<GateTrace> = gates.by_ref().take(nodes.len()).collect();
                run_item(model, prep, data, item, &nodes, item_gates, shared.as_ref(), mode, scale, &imp_grad, &mut result)?;
            }
            Ok(result)
        })
        .collect::<Result<Vec<ChunkResult>>>()?;

    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(items.len());
    let mut grads: Option<MoseParams> = None;
    let mut dproj: Option<ProjectionGrad> = None;
    for r in results {
        loss += r.loss;
        predictions.extend(r.predictions);
        if let Some(g) = r.grads {
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
        if let Some(d) = r.dproj {
            match dproj.as_mut() {
                Some(acc) => {
                    for (a, b) in acc.per_expert.iter_mut().zip(d.per_expert) {
                        if let (Some(a), Some(b)) = (a.as_mut(), b) {
                            *a += &b;
                        }
                    }
                }
                None => dproj = Some(d),
            }
        }
    }
    if let (Some(g), Some(d)) = (grads.as_mut(), dproj.as_ref()) {
        model.projection_backward(data.dataset.graphs[0].features(), d, g);
    }
    Ok(BatchOutcome {
        loss_task: loss / items.len() as f64,
        loss_importance,
        importance: totals,
        predictions,
        grads,
        selections,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_item(
    model: &MoseModel,
    prep: &Prepared,
    data: &TrainingData,
    item: usize,
    nodes: &[usize],
    gates: Vec<GateTrace>,
    shared: Option<&Projection>,
    mode: BatchMode,
    scale: f64,
    imp_grad: &[f64],
    out: &mut ChunkResult,
) -> Result<()> {
    let ctx = &data.contexts[data.context_of(item)];
    let x = data.dataset.graphs[data.context_of(item)].features();
    let own;
    let proj = match shared {
        Some(p) => p,
        None => {
            let mut used: Vec<usize> = gates.iter().flat_map(|g| g.route.indices.iter().copied()).collect();
            used.sort_unstable();
            used.dedup();
            own = model.project(x, &used);
            &own
        }
    };
    let traces: Vec<_> = nodes
        .iter()
        .zip(gates)
        .map(|(&v, gate)| model.node_forward(prep, &ctx.structures[v], &ctx.node_sets[v], proj, gate))
        .collect();
    let hs: Vec<Array1<f64>> = traces.iter().map(|t| t.h.clone()).collect();
    let pooled = match data.task() {
        TaskKind::GraphLevel => readout(&hs, model.config.readout)?,
        TaskKind::NodeLevel => hs[0].clone(),
    };
    let mut rng = substream(mode.seed, &[tag::DROPOUT, mode.epoch, item as u64]);
    let (logits, head_trace) = model.params.head.forward_traced(&pooled, mode.dropout, Some(&mut rng));
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(MoseError::NonFinite(format!("non-finite logits for item {item}")));
    }
    let (loss, dlogits) = cross_entropy(&logits, data.labels[item]);
    out.loss += loss;
    out.predictions.push(argmax(&logits));

    let Some(grads) = out.grads.as_mut() else { return Ok(()) };
    let dpooled = model.params.head.backward(&head_trace, &(dlogits * scale), &mut grads.head);
    let dhs = match data.task() {
        TaskKind::GraphLevel => readout_backward(&hs, model.config.readout, &dpooled),
        TaskKind::NodeLevel => vec![dpooled],
    };
    let mut own_dproj = if shared.is_none() { Some(ProjectionGrad::zeros_like(proj)) } else { None };
    let dproj = match own_dproj.as_mut() {
        Some(d) => d,
        None => out.dproj.as_mut().expect("shared projection gradient"),
    };
    for ((&v, trace), dh) in nodes.iter().zip(&traces).zip(&dhs) {
        model.node_backward(prep, &ctx.structures[v], &ctx.node_sets[v], &ctx.eta[v], trace, dh, Some(imp_grad), grads, dproj);
    }
    if let Some(d) = own_dproj {
        model.projection_backward(x, &d, grads);
    }
    Ok(())
}

fn argmax(x: &Array1<f64>) -> usize {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

/// Evaluation summary of one split part.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub loss_task: f64,
    pub loss_importance: f64,
    pub expert_load: Vec<f64>,
}

/// Accuracy and macro-F1 (averaged over classes present in either the truth
/// or the predictions).
pub fn classification_scores(truth: &[usize], predicted: &[usize], classes: usize) -> (f64, f64) {
    let n = truth.len();
    let correct = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let mut f1_sum = 0.0;
    let mut present = 0;
    for c in 0..classes {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom > 0 {
            f1_sum += 2.0 * tp[c] as f64 / denom as f64;
            present += 1;
        }
    }
    let f1 = if present > 0 { f1_sum / present as f64 } else { 0.0 };
    (correct as f64 / n.max(1) as f64, f1)
}

/// Eval-mode metrics on `items`.
pub fn evaluate(model: &MoseModel, data: &TrainingData, items: &[usize]) -> Result<EvalMetrics> {
    if items.is_empty() {
        return Err(MoseError::InvalidArgument("cannot evaluate an empty split part".into()));
    }
    let prep = model.prepare();
    let out = run_batch(model, &prep, data, items, BatchMode::eval())?;
    let truth: Vec<usize> = items.iter().map(|&i| data.labels[i]).collect();
    let (accuracy, macro_f1) = classification_scores(&truth, &out.predictions, model.config.class_count);
    Ok(EvalMetrics {
        accuracy,
        macro_f1,
        loss_task: out.loss_task,
        loss_importance: out.loss_importance,
        expert_load: out.importance,
    })
}

/// Item ids of the three split parts.
#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Holds out a stratified share of `train` for validation.
    pub fn with_validation(train: &[usize], test: Vec<usize>, labels: &[usize], fraction: f64, seed: u64) -> Self {
        if fraction <= 0.0 {
            return Split {
                train: train.to_vec(),
                val: Vec::new(),
                test,
            };
        }
        let mut shuffled = train.to_vec();
        shuffled.shuffle(&mut substream(seed, &[tag::SPLIT, u64::MAX]));
        shuffled.sort_by_key(|&i| labels[i]);
        let stride = (1.0 / fraction).round().max(2.0) as usize;
        let (mut val, mut rest) = (Vec::new(), Vec::new());
        for (pos, &i) in shuffled.iter().enumerate() {
            if pos % stride == stride / 2 {
                val.push(i);
            } else {
                rest.push(i);
            }
        }
        val.sort_unstable();
        rest.sort_unstable();
        Split { train: rest, val, test }
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub metrics: EvalMetrics,
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow], experts: usize) -> std::io::Result<()> {
    let loads: Vec<String> = (0..experts).map(|k| format!("expert_load_{k}")).collect();
    writeln!(w, "epoch,split,loss_task,loss_importance,accuracy,macro_f1,{}", loads.join(","))?;
    for r in rows {
        let m = &r.metrics;
        let loads: Vec<String> = m.expert_load.iter().map(|x| x.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.split,
            m.loss_task,
            m.loss_importance,
            m.accuracy,
            m.macro_f1,
            loads.join(",")
        )?;
    }
    Ok(())
}

/// Best validation point seen so far.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub params: MoseParams,
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainState {
    pub model: MoseModel,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Option<BestSnapshot>,
    pub stale_epochs: usize,
    pub stopped: bool,
    pub history: Vec<MetricsRow>,
}

impl TrainState {
    pub fn new(model: MoseModel, cfg: &TrainConfig) -> Self {
        let mut optimizer = Adam::new(cfg.learning_rate, &model.params.tensors());
        optimizer.beta1 = cfg.adam_beta1;
        optimizer.beta2 = cfg.adam_beta2;
        optimizer.eps = cfg.adam_eps;
        TrainState {
            model,
            optimizer,
            epoch: 0,
            best: None,
            stale_epochs: 0,
            stopped: false,
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub train: EvalMetrics,
    pub val: Option<EvalMetrics>,
    pub test: Option<EvalMetrics>,
    pub best_epoch: Option<usize>,
}

fn non_finite(state: &TrainState, epoch: usize, batch: usize, what: &str) -> MoseError {
    let norms: Vec<String> = state
        .model
        .params
        .tensor_names()
        .into_iter()
        .zip(state.model.params.tensors())
        .map(|(n, t)| format!("{n}={:.4e}", t.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect();
    MoseError::NonFinite(format!("{what} at epoch {epoch}, batch {batch}; parameter norms: {}", norms.join(", ")))
}

/// Runs epochs `state.epoch + 1 ..= cfg.epochs`. `on_epoch` sees the state
/// after each epoch (for checkpointing). When a validation part exists the
/// best validation parameters are restored at the end.
pub fn train(
    state: &mut TrainState,
    data: &TrainingData,
    split: &Split,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(MoseError::InvalidArgument("empty training part".into()));
    }
    let batch_size = match data.task() {
        TaskKind::GraphLevel => cfg.batch_size,
        TaskKind::NodeLevel => split.train.len(),
    };
    let experts = state.model.config.experts;
    while state.epoch < cfg.epochs && !state.stopped {
        let epoch = state.epoch + 1;
        let mut order = split.train.clone();
        order.shuffle(&mut substream(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut imp_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut predictions = Vec::with_capacity(order.len());
        let mut load = vec![0.0; experts];
        for (b, batch) in order.chunks(batch_size).enumerate() {
            let prep = state.model.prepare();
            let mode = BatchMode {
                noise: true,
                dropout: cfg.dropout,
                with_grads: true,
                beta: cfg.beta,
                seed: cfg.seed,
                epoch: epoch as u64,
            };
            let out = run_batch(&state.model, &prep, data, batch, mode)?;
            if !out.total_loss(cfg.beta).is_finite() {
                return Err(non_finite(state, epoch, b, "non-finite loss"));
            }
            let grads = out.grads.expect("gradients requested");
            if !grads.all_finite() {
                return Err(non_finite(state, epoch, b, "non-finite gradient"));
            }
            state.optimizer.update(state.model.params.tensors_mut(), grads.tensors());
            loss_sum += out.loss_task * batch.len() as f64;
            imp_sum += out.loss_importance;
            batches += 1;
            predictions.extend(out.predictions);
            for (l, t) in load.iter_mut().zip(&out.importance) {
                *l += t;
            }
        }
        let truth: Vec<usize> = order.iter().map(|&i| data.labels[i]).collect();
        let (accuracy, macro_f1) = classification_scores(&truth, &predictions, state.model.config.class_count);
        state.history.push(MetricsRow {
            epoch,
            split: "train".into(),
            metrics: EvalMetrics {
                accuracy,
                macro_f1,
                loss_task: loss_sum / order.len() as f64,
                loss_importance: imp_sum / batches as f64,
                expert_load: load,
            },
        });
        if !split.val.is_empty() {
            let m = evaluate(&state.model, data, &split.val)?;
            let better = match &state.best {
                None => true,
                Some(b) => m.accuracy > b.accuracy || (m.accuracy == b.accuracy && m.loss_task < b.loss),
            };
            if better {
                state.best = Some(BestSnapshot {
                    epoch,
                    accuracy: m.accuracy,
                    loss: m.loss_task,
                    params: state.model.params.clone(),
                });
                state.stale_epochs = 0;
            } else {
                state.stale_epochs += 1;
            }
            state.history.push(MetricsRow {
                epoch,
                split: "val".into(),
                metrics: m,
            });
            if cfg.patience > 0 && state.stale_epochs >= cfg.patience {
                log::info!("early stop at epoch {epoch}");
                state.stopped = true;
            }
        }
        if !split.test.is_empty() {
            let m = evaluate(&state.model, data, &split.test)?;
            state.history.push(MetricsRow {
                epoch,
                split: "test".into(),
                metrics: m,
            });
        }
        state.epoch = epoch;
        log::debug!("epoch {epoch} done");
        on_epoch(state)?;
    }
    if let Some(best) = &state.best {
        state.model.params = best.params.clone();
    }
    Ok(TrainReport {
        train: evaluate(&state.model, data, &split.train)?,
        val: if split.val.is_empty() { None } else { Some(evaluate(&state.model, data, &split.val)?) },
        test: if split.test.is_empty() { None } else { Some(evaluate(&state.model, data, &split.test)?) },
        best_epoch: state.best.as_ref().map(|b| b.epoch),
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub report: TrainReport,
    pub history: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CvSummary {
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
}

/// One freshly initialized model per fold; test accuracy summarized as
/// mean ± population std.
pub fn cross_validate(
    dataset: &Dataset,
    cache: &SubgraphCache,
    model_cfg: &crate::moe::ModelConfig,
    cfg: &TrainConfig,
    folds: usize,
    on_fold: &mut dyn FnMut(&FoldResult) -> Result<()>,
) -> Result<CvSummary> {
    if dataset.task != TaskKind::GraphLevel {
        return Err(MoseError::InvalidArgument("cross-validation needs a graph-level dataset".into()));
    }
    let plan = crate::data::make_folds(dataset, folds, cfg.seed)?;
    let crate::data::SplitKind::KFold(parts) = plan.kind else {
        return Err(MoseError::Internal("k-fold plan expected".into()));
    };
    let probe = MoseModel::new(model_cfg.clone(), cfg.seed)?;
    let data = TrainingData::new(dataset, cache, &probe)?;
    let mut results = Vec::with_capacity(parts.len());
    for (f, part) in parts.into_iter().enumerate() {
        let fold_seed = cfg.seed.wrapping_add(f as u64);
        let split = Split::with_validation(&part.train, part.test, &data.labels, cfg.validation_fraction, fold_seed);
        let model = MoseModel::new(model_cfg.clone(), fold_seed)?;
        let fold_cfg = TrainConfig { seed: fold_seed, ..cfg.clone() };
        let mut state = TrainState::new(model, &fold_cfg);
        let report = train(&mut state, &data, &split, &fold_cfg, &mut |_| Ok(()))?;
        log::info!(
            "fold {f}: test accuracy {:.4}",
            report.test.as_ref().map(|m| m.accuracy).unwrap_or(f64::NAN)
        );
        let result = FoldResult {
            fold: f,
            report,
            history: state.history,
        };
        on_fold(&result)?;
        results.push(result);
    }
    let acc: Vec<f64> = results.iter().filter_map(|r| r.report.test.as_ref().map(|m| m.accuracy)).collect();
    let f1: Vec<f64> = results.iter().filter_map(|r| r.report.test.as_ref().map(|m| m.macro_f1)).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&acc);
    Ok(CvSummary {
        folds: results,
        mean_accuracy,
        std_accuracy,
        mean_macro_f1: mean_std(&f1).0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Worst error per tensor name.
    pub per_tensor: Vec<(String, f64)>,
    pub entries_checked: usize,
}

/// Denominator floor of [`relative_error`]. Central differences with a step
/// of 1e-5 on an O(1) loss carry roughly 1e-10 of rounding error, so smaller
/// gradients cannot be resolved to 1e-4 relative accuracy.
pub const GRADIENT_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

/// Compares the analytic gradient of the total loss on `items` with central
/// differences. Gate noise is frozen by its keyed streams and dropout is
/// off; a perturbation that changes any expert selection is retried with a
/// smaller step and reported as an error if it persists. At most
/// `per_tensor_cap` entries per tensor are probed, spread evenly.
pub fn grad_check(
    model: &MoseModel,
    data: &TrainingData,
    items: &[usize],
    beta: f64,
    train_mode: bool,
    step: f64,
    per_tensor_cap: usize,
) -> Result<GradCheckReport> {
    let mode = BatchMode {
        noise: train_mode,
        dropout: 0.0,
        with_grads: true,
        beta,
        seed: 17,
        epoch: 0,
    };
    let base = run_batch(model, &model.prepare(), data, items, mode)?;
    let analytic = base.grads.clone().expect("gradients");
    let eval_mode = BatchMode { with_grads: false, ..mode };
    let loss_at = |m: &MoseModel| -> Result<(f64, Vec<Vec<usize>>)> {
        let out = run_batch(m, &m.prepare(), data, items, eval_mode)?;
        Ok((out.total_loss(beta), out.selections))
    };

    let names = model.params.tensor_names();
    let mut per_tensor = Vec::with_capacity(names.len());
    let mut entries_checked = 0;
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (t, name) in names.iter().enumerate() {
        let len = analytic.tensors()[t].len();
        let count = len.min(per_tensor_cap);
        let mut tensor_worst = 0.0f64;
        for c in 0..count {
            let flat = c * len / count;
            let a = analytic.tensors()[t].as_slice().expect("contiguous")[flat];
            let original = model.params.tensors()[t].as_slice().expect("contiguous")[flat];
            let mut h = step;
            let numeric = loop {
                let set = |p: &mut MoseModel, v: f64| {
                    p.params.tensors_mut()[t].as_slice_mut().expect("contiguous")[flat] = v;
                };
                set(&mut probe, original + h);
                let (plus, sel_plus) = loss_at(&probe)?;
                set(&mut probe, original - h);
                let (minus, sel_minus) = loss_at(&probe)?;
                set(&mut probe, original);
                if sel_plus == base.selections && sel_minus == base.selections {
                    break (plus - minus) / (2.0 * h);
                }
                h /= 10.0;
                if h < step * 1e-3 {
                    return Err(MoseError::Internal(format!("expert selection flips under perturbation of {name}[{flat}]")));
                }
            };
            let err = relative_error(a, numeric);
            tensor_worst = tensor_worst.max(err);
            entries_checked += 1;
        }
        worst = worst.max(tensor_worst);
        per_tensor.push((name.clone(), tensor_worst));
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        per_tensor,
        entries_checked,
    })
}

/// Gradient of the total loss on `items` with frozen noise and no dropout.
pub fn batch_gradient(model: &MoseModel, data: &TrainingData, items: &[usize], beta: f64, train_mode: bool) -> Result<MoseParams> {
    let mode = BatchMode {
        noise: train_mode,
        dropout: 0.0,
        with_grads: true,
        beta,
        seed: 17,
        epoch: 0,
    };
    Ok(run_batch(model, &model.prepare(), data, items, mode)?.grads.expect("gradients"))
}

/// Dense helper for tests and reports: stacks rows into a matrix.
pub fn stack_rows(rows: &[Array1<f64>]) -> Array2<f64> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{ModelConfig, Route};

    #[test]
    fn cv_examples() {
        assert_eq!(cv_squared(&[3.0, 3.0, 3.0]), 0.0);
        assert!((cv_squared(&[2.0, 4.0]) - 1.0 / 9.0).abs() < 1e-9);
        assert!((cv_squared(&[5.0, 0.0, 0.0, 0.0]) - 3.0).abs() < 1e-9);
        assert_eq!(total_loss(1.0, 0.5, 0.2), 1.1);
        assert_eq!(total_loss(1.0, 0.5, 0.0), 1.0);
        assert_eq!(total_loss(1.0, 0.0, 0.3), 1.0);
    }

    #[test]
    fn cv_gradient_matches_finite_differences() {
        let t = [0.7, 2.5, 1.1, 0.2];
        let g = cv_squared_grad(&t);
        for k in 0..4 {
            let mut p = t;
            p[k] += 1e-6;
            let mut m = t;
            m[k] -= 1e-6;
            let fd = (cv_squared(&p) - cv_squared(&m)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn importance_from_routes() {
        let a = Route { indices: vec![0, 2], weights: vec![0.25, 0.75] };
        let b = Route { indices: vec![2], weights: vec![1.0] };
        assert_eq!(importance(&[&a, &b], 3), vec![0.25, 0.0, 1.75]);
        assert!(importance_loss(&[], 3).is_err());
    }

    #[test]
    fn scores() {
        assert_eq!(classification_scores(&[0, 1, 1, 0], &[0, 1, 1, 0], 2), (1.0, 1.0));
        let (acc, _) = classification_scores(&[0, 1, 0, 1], &[0, 0, 0, 0], 2);
        assert_eq!(acc, 0.5);
        let (mean, std) = mean_std(&[0.8, 1.0]);
        assert!((mean - 0.9).abs() < 1e-12 && (std - 0.1).abs() < 1e-12);
    }

    #[test]
    fn validation_holdout_is_disjoint() {
        let labels: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let train: Vec<usize> = (0..40).collect();
        let s = Split::with_validation(&train, (40..50).collect(), &labels, 0.1, 3);
        assert_eq!(s.train.len() + s.val.len(), 40);
        assert_eq!(s.val.len(), 4);
        assert!(s.val.iter().all(|v| !s.train.contains(v)));
    }

    fn toy() -> (Dataset, SubgraphCache) {
        let mut graphs = Vec::new();
        for i in 0..6 {
            let tail = 1 + i % 3;
            let (base, mut edges): (usize, Vec<(usize, usize)>) = if i % 2 == 0 {
                (3, vec![(0, 1), (1, 2), (2, 0)])
            } else {
                (4, vec![(0, 1), (1, 2), (2, 3), (3, 0)])
            };
            for t in 0..tail {
                edges.push((if t == 0 { 0 } else { base + t - 1 }, base + t));
            }
            graphs.push(Graph::unlabeled(base + tail, &edges).unwrap().with_graph_label(Some(i % 2)));
        }
        let ds = Dataset {
            name: "toy".into(),
            graphs: crate::data::with_degree_features(graphs).unwrap(),
            task: TaskKind::GraphLevel,
            class_count: 2,
        };
        let cache = SubgraphCache::build(&ds, &crate::walks::WalkConfig::default()).unwrap();
        (ds, cache)
    }

    #[test]
    fn end_to_end_gradient_matches() {
        let (ds, cache) = toy();
        for combine in [crate::moe::CombineMode::WeightedSum, crate::moe::CombineMode::Concat] {
            let mut cfg = ModelConfig::new(ds.feature_dim(), 2, TaskKind::GraphLevel).with_experts(3);
            cfg.hidden_graphs = 2;
            cfg.hidden_dim = 6;
            cfg.combine = combine;
            let model = MoseModel::new(cfg, 5).unwrap();
            let data = TrainingData::new(&ds, &cache, &model).unwrap();
            let report = grad_check(&model, &data, &[0, 1, 2, 3], 0.5, true, 1e-5, 12).unwrap();
            assert!(report.max_relative_error < 1e-4, "{:?}", report.per_tensor);
        }
    }

    #[test]
    fn eval_mode_gives_noise_weights_no_gradient() {
        let (ds, cache) = toy();
        let mut cfg = ModelConfig::new(ds.feature_dim(), 2, TaskKind::GraphLevel).with_experts(3);
        cfg.hidden_graphs = 2;
        cfg.hidden_dim = 4;
        let model = MoseModel::new(cfg, 1).unwrap();
        let data = TrainingData::new(&ds, &cache, &model).unwrap();
        let g = batch_gradient(&model, &data, &[0, 1], 0.0, false).unwrap();
        assert!(g.gating.noise.iter().all(|&x| x == 0.0));
        let g = batch_gradient(&model, &data, &[0, 1], 0.0, true).unwrap();
        assert!(g.gating.noise.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn zero_epochs_keeps_model() {
        let (ds, cache) = toy();
        let cfg = ModelConfig::new(ds.feature_dim(), 2, TaskKind::GraphLevel);
        let model = MoseModel::new(cfg, 1).unwrap();
        let data = TrainingData::new(&ds, &cache, &model).unwrap();
        let tc = TrainConfig { epochs: 0, ..Default::default() };
        let mut state = TrainState::new(model.clone(), &tc);
        let split = Split { train: vec![0, 1, 2, 3], val: vec![], test: vec![4, 5] };
        let report = train(&mut state, &data, &split, &tc, &mut |_| Ok(())).unwrap();
        assert_eq!(state.model, model);
        assert!(report.test.is_some());
        assert!(evaluate(&model, &data, &[]).is_err());
    }
}
