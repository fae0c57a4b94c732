//! Run configuration: defaults, a `key = value` file, then overrides.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::TaskKind;
use crate::error::{MoseError, Result};
use crate::kernel::{FeatureScaling, KernelConfig, StepMode};
use crate::moe::{CombineMode, GateActivation, ModelConfig, Readout};
use crate::train::TrainConfig;
use crate::walks::WalkConfig;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub dataset: String,
    pub data_dir: PathBuf,
    pub seed: u64,
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub k_walk: usize,
    pub subgraph_cap: usize,
    pub steps: usize,
    pub step_mode: StepMode,
    /// Geometric step weights `γ^p`; unit weights when absent.
    pub step_decay: Option<f64>,
    pub scaling: FeatureScaling,
    pub experts: usize,
    pub hidden_graphs: usize,
    /// Explicit hidden graph sizes; `2..=K+1` when absent.
    pub expert_sizes: Option<Vec<usize>>,
    pub hidden_dim: usize,
    pub k_ept: usize,
    pub combine: CombineMode,
    pub readout: Readout,
    pub gate_activation: GateActivation,
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    /// k for graph-level cross-validation.
    pub folds: usize,
    /// Train/val/test ratios for node-level runs.
    pub split: (f64, f64, f64),
    /// Seeded node-level splits per run.
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let walk = WalkConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            dataset: String::new(),
            data_dir: PathBuf::from("data"),
            seed: 0,
            walk_length: walk.walk_length,
            walks_per_node: walk.walks_per_node,
            k_walk: walk.k_walk,
            subgraph_cap: walk.subgraph_cap,
            steps: 3,
            step_mode: StepMode::Concat,
            step_decay: None,
            scaling: FeatureScaling::SignedLog,
            experts: 5,
            hidden_graphs: 8,
            expert_sizes: None,
            hidden_dim: 32,
            k_ept: 2,
            combine: CombineMode::WeightedSum,
            readout: Readout::Mean,
            gate_activation: GateActivation::Relu,
            beta: train.beta,
            epochs: train.epochs,
            lr: train.learning_rate,
            batch_size: train.batch_size,
            dropout: train.dropout,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            patience: train.patience,
            validation_fraction: train.validation_fraction,
            folds: 10,
            split: (0.6, 0.2, 0.2),
            repeats: 5,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "dataset",
    "data_dir",
    "seed",
    "walk_length",
    "walks_per_node",
    "k_walk",
    "subgraph_cap",
    "steps",
    "step_mode",
    "step_decay",
    "scaling",
    "experts",
    "hidden_graphs",
    "expert_sizes",
    "hidden_dim",
    "k_ept",
    "combine",
    "readout",
    "gate_activation",
    "beta",
    "epochs",
    "lr",
    "batch_size",
    "dropout",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "patience",
    "validation_fraction",
    "folds",
    "split",
    "repeats",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| MoseError::InvalidArgument(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    /// Sets one key from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = v.to_string(),
            "data_dir" => self.data_dir = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            "walk_length" => self.walk_length = parse(key, v)?,
            "walks_per_node" => self.walks_per_node = parse(key, v)?,
            "k_walk" => self.k_walk = parse(key, v)?,
            "subgraph_cap" => self.subgraph_cap = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "step_mode" => self.step_mode = parse(key, v)?,
            "step_decay" => self.step_decay = if v == "none" { None } else { Some(parse(key, v)?) },
            "scaling" => {
                self.scaling = match v {
                    "none" => FeatureScaling::None,
                    "signed-log" => FeatureScaling::SignedLog,
                    _ => return Err(MoseError::InvalidArgument(format!("bad value {v:?} for scaling (none, signed-log)"))),
                }
            }
            "experts" => self.experts = parse(key, v)?,
            "hidden_graphs" => self.hidden_graphs = parse(key, v)?,
            "expert_sizes" => self.expert_sizes = if v == "default" { None } else { Some(parse_list(key, v)?) },
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "k_ept" => self.k_ept = parse(key, v)?,
            "combine" => self.combine = parse(key, v)?,
            "readout" => self.readout = parse(key, v)?,
            "gate_activation" => self.gate_activation = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "validation_fraction" => self.validation_fraction = parse(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            "split" => {
                let r: Vec<f64> = parse_list(key, v)?;
                if r.len() != 3 {
                    return Err(MoseError::InvalidArgument("split needs three ratios".into()));
                }
                self.split = (r[0], r[1], r[2]);
            }
            "repeats" => self.repeats = parse(key, v)?,
            other => return Err(MoseError::InvalidArgument(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MoseError::format(origin, i + 1, "expected `key = value`"))?;
            self.set(k.trim(), v).map_err(|e| MoseError::format(origin, i + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| MoseError::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Current value of every key, formatted so that `set` reads it back.
    pub fn entries(&self) -> Vec<(String, String)> {
        let scaling = match self.scaling {
            FeatureScaling::None => "none",
            FeatureScaling::SignedLog => "signed-log",
        };
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let values = [
            self.dataset.clone(),
            self.data_dir.display().to_string(),
            self.seed.to_string(),
            self.walk_length.to_string(),
            self.walks_per_node.to_string(),
            self.k_walk.to_string(),
            self.subgraph_cap.to_string(),
            self.steps.to_string(),
            self.step_mode.to_string(),
            self.step_decay.map(|g| g.to_string()).unwrap_or_else(|| "none".into()),
            scaling.to_string(),
            self.experts.to_string(),
            self.hidden_graphs.to_string(),
            self.expert_sizes.as_deref().map(list).unwrap_or_else(|| "default".into()),
            self.hidden_dim.to_string(),
            self.k_ept.to_string(),
            self.combine.to_string(),
            self.readout.to_string(),
            self.gate_activation.to_string(),
            self.beta.to_string(),
            self.epochs.to_string(),
            self.lr.to_string(),
            self.batch_size.to_string(),
            self.dropout.to_string(),
            self.adam_beta1.to_string(),
            self.adam_beta2.to_string(),
            self.adam_eps.to_string(),
            self.patience.to_string(),
            self.validation_fraction.to_string(),
            self.folds.to_string(),
            format!("{},{},{}", self.split.0, self.split.1, self.split.2),
            self.repeats.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn walk_config(&self) -> WalkConfig {
        WalkConfig {
            walk_length: self.walk_length,
            walks_per_node: self.walks_per_node,
            k_walk: self.k_walk,
            subgraph_cap: self.subgraph_cap,
            seed: self.seed,
        }
    }

    pub fn kernel_config(&self) -> KernelConfig {
        let mut k = match self.step_decay {
            Some(g) => KernelConfig::geometric(self.steps, self.step_mode, g),
            None => KernelConfig::new(self.steps, self.step_mode),
        };
        k.scaling = self.scaling;
        k
    }

    pub fn model_config(&self, feature_dim: usize, class_count: usize, task: TaskKind) -> ModelConfig {
        let mut m = ModelConfig::new(feature_dim, class_count, task).with_experts(self.experts);
        if let Some(sizes) = &self.expert_sizes {
            m.expert_sizes = sizes.clone();
        }
        m.hidden_graphs = self.hidden_graphs;
        m.hidden_dim = self.hidden_dim;
        m.k_ept = self.k_ept;
        m.combine = self.combine;
        m.readout = self.readout;
        m.gate_activation = self.gate_activation;
        m.kernel = self.kernel_config();
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            beta: self.beta,
            batch_size: self.batch_size,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            dropout: self.dropout,
            seed: self.seed,
            patience: self.patience,
            validation_fraction: self.validation_fraction,
        }
    }

    /// Checks everything that does not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        self.walk_config().validate()?;
        self.kernel_config().validate()?;
        self.train_config().validate()?;
        self.model_config(1, 1, TaskKind::GraphLevel).validate()?;
        if self.folds < 2 {
            return Err(MoseError::InvalidArgument("folds must be at least 2".into()));
        }
        if self.repeats == 0 {
            return Err(MoseError::InvalidArgument("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip() {
        let mut c = RunConfig::default();
        c.set("expert_sizes", "1,2,3").unwrap();
        c.set("experts", "3").unwrap();
        c.set("step_decay", "0.5").unwrap();
        c.set("scaling", "none").unwrap();
        c.set("combine", "concat").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "echo").unwrap();
        assert_eq!(back, c);
        assert_eq!(c.entries().len(), KEYS.len());
    }

    #[test]
    fn unknown_and_malformed_lines_are_rejected() {
        let mut c = RunConfig::default();
        let err = c.apply_text("epochs = 3\nlearning_rate = 0.1\n", "run.cfg").unwrap_err();
        assert!(matches!(err, MoseError::Format { line: 2, .. }), "{err}");
        assert!(c.apply_text("epochs 3", "run.cfg").is_err());
        assert!(c.set("epochs", "-1").is_err());
        c.apply_text("# comment\n\nepochs = 7 # trailing\n", "run.cfg").unwrap();
        assert_eq!(c.epochs, 7);
    }

    #[test]
    fn derived_configs_follow_fields() {
        let mut c = RunConfig::default();
        c.set("steps", "4").unwrap();
        c.set("step_mode", "sum-over-p").unwrap();
        c.set("experts", "3").unwrap();
        c.set("seed", "11").unwrap();
        let m = c.model_config(7, 2, TaskKind::GraphLevel);
        assert_eq!(m.expert_sizes, vec![2, 3, 4]);
        assert_eq!(m.kernel.max_step, 4);
        assert_eq!(c.walk_config().seed, 11);
        assert_eq!(c.train_config().seed, 11);
        assert!(c.validate().is_ok());
        c.set("k_ept", "4").unwrap();
        assert!(c.validate().is_err());
    }
}
