//! Whole training runs: k-fold or repeated node splits, per-epoch
//! checkpoints with resume, the metrics CSV, summaries and run manifests.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::cache::SubgraphCache;
use crate::config::RunConfig;
use crate::data::{make_folds, make_node_splits, Dataset, NodeMasks, SplitKind, TaskKind};
use crate::error::{MoseError, Result};
use crate::moe::MoseModel;
use crate::train::{mean_std, train, MetricsRow, Split, TrainReport, TrainState, TrainingData};

pub const CHECKPOINT_FORMAT: &str = "mose-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A finished fold or split repeat.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PartResult {
    pub index: usize,
    pub split: Split,
    pub report: TrainReport,
    pub history: Vec<MetricsRow>,
}

/// The part currently being trained.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PartProgress {
    pub index: usize,
    pub split: Split,
    pub state: TrainState,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub dataset_hash: String,
    pub completed: Vec<PartResult>,
    pub current: Option<PartProgress>,
    /// Model of the most recently finished part.
    pub final_model: Option<MoseModel>,
}

impl Checkpoint {
    fn new(config: &RunConfig, dataset_hash: String) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            dataset_hash,
            completed: Vec::new(),
            current: None,
            final_model: None,
        }
    }

    /// Written to a sibling temp file first, then renamed into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let io = |e| MoseError::io(&tmp, e);
        let mut w = BufWriter::new(fs::File::create(&tmp).map_err(io)?);
        serde_json::to_writer(&mut w, self).map_err(|e| MoseError::Internal(format!("checkpoint encoding: {e}")))?;
        w.flush().map_err(io)?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| MoseError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MoseError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| {
            MoseError::format(path.display().to_string(), e.line(), format!("not a checkpoint: {e}"))
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(MoseError::format(
                path.display().to_string(),
                1,
                format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            ));
        }
        Ok(ck)
    }

    /// The model of the latest finished part, else the one in training.
    pub fn model(&self) -> Option<&MoseModel> {
        self.final_model.as_ref().or(self.current.as_ref().map(|c| &c.state.model))
    }
}

/// Aggregate over parts of test (or, without a test part, train) metrics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub dataset: String,
    pub parts: usize,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
    /// Coefficient of variation of the final expert load per part.
    pub load_cv: Vec<f64>,
}

impl RunSummary {
    pub fn from_parts(dataset: &str, parts: &[PartResult]) -> Self {
        let finals: Vec<_> = parts.iter().map(|p| p.report.test.as_ref().unwrap_or(&p.report.train)).collect();
        let accuracies: Vec<f64> = finals.iter().map(|m| m.accuracy).collect();
        let f1: Vec<f64> = finals.iter().map(|m| m.macro_f1).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&accuracies);
        let load_cv = parts.iter().map(|p| expert_load_cv(&p.report.train.expert_load)).collect();
        RunSummary {
            dataset: dataset.to_string(),
            parts: parts.len(),
            accuracies,
            mean_accuracy,
            std_accuracy,
            mean_macro_f1: mean_std(&f1).0,
            load_cv,
        }
    }
}

/// Coefficient of variation (population std over mean) of expert loads.
pub fn expert_load_cv(load: &[f64]) -> f64 {
    crate::train::cv_squared(load).sqrt()
}

fn part_splits(cfg: &RunConfig, ds: &Dataset, labels: &[usize]) -> Result<Vec<Split>> {
    match ds.task {
        TaskKind::GraphLevel => {
            let SplitKind::KFold(folds) = make_folds(ds, cfg.folds, cfg.seed)?.kind else {
                return Err(MoseError::Internal("k-fold plan expected".into()));
            };
            Ok(folds
                .into_iter()
                .enumerate()
                .map(|(f, fold)| {
                    Split::with_validation(&fold.train, fold.test, labels, cfg.validation_fraction, cfg.seed.wrapping_add(f as u64))
                })
                .collect())
        }
        TaskKind::NodeLevel => (0..cfg.repeats)
            .map(|r| {
                let SplitKind::Masks(m) = make_node_splits(ds, cfg.split, cfg.seed.wrapping_add(r as u64))?.kind else {
                    return Err(MoseError::Internal("mask plan expected".into()));
                };
                Ok(Split {
                    train: NodeMasks::indices(&m.train),
                    val: NodeMasks::indices(&m.val),
                    test: NodeMasks::indices(&m.test),
                })
            })
            .collect(),
    }
}

/// Output locations of a training run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub summary: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        RunPaths {
            checkpoint: dir.join("checkpoint.json"),
            metrics: dir.join("metrics.csv"),
            summary: dir.join("summary.json"),
        }
    }
}

/// Trains every fold (graph tasks) or seeded split (node tasks), writing the
/// checkpoint after each epoch and then calling `on_checkpoint`. `resume`
/// continues an earlier checkpoint of the same configuration; only `epochs`
/// and `patience` may differ.
pub fn run_training(
    cfg: &RunConfig,
    ds: &Dataset,
    cache: &SubgraphCache,
    paths: &RunPaths,
    resume: Option<Checkpoint>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<RunSummary> {
    cfg.validate()?;
    let hash = ds.content_hash();
    let mut ck = match resume {
        Some(ck) => {
            if ck.dataset_hash != hash {
                return Err(MoseError::InvalidArgument("checkpoint was trained on different data".into()));
            }
            let comparable = RunConfig {
                epochs: cfg.epochs,
                patience: cfg.patience,
                ..ck.config.clone()
            };
            if &comparable != cfg {
                return Err(MoseError::InvalidArgument("checkpoint configuration differs from the requested run".into()));
            }
            Checkpoint { config: cfg.clone(), ..ck }
        }
        None => Checkpoint::new(cfg, hash),
    };
    let model_cfg = cfg.model_config(ds.feature_dim(), ds.class_count, ds.task);
    let probe = MoseModel::new(model_cfg.clone(), cfg.seed)?;
    let data = TrainingData::new(ds, cache, &probe)?;
    let splits = part_splits(cfg, ds, &data.labels)?;
    let tc = cfg.train_config();

    for (index, split) in splits.into_iter().enumerate() {
        if ck.completed.iter().any(|p| p.index == index) {
            continue;
        }
        let part_seed = cfg.seed.wrapping_add(index as u64);
        let part_cfg = crate::train::TrainConfig { seed: part_seed, ..tc.clone() };
        let progress = match ck.current.take() {
            Some(p) if p.index == index => p,
            _ => PartProgress {
                index,
                split: split.clone(),
                state: TrainState::new(MoseModel::new(model_cfg.clone(), part_seed)?, &part_cfg),
            },
        };
        if progress.split != split {
            return Err(MoseError::Internal(format!("checkpoint split of part {index} does not match")));
        }
        let mut state = progress.state;
        let report = {
            let ck_ref = &mut ck;
            let split_ref = &split;
            train(&mut state, &data, split_ref, &part_cfg, &mut |s| {
                ck_ref.current = Some(PartProgress {
                    index,
                    split: split_ref.clone(),
                    state: s.clone(),
                });
                ck_ref.write(&paths.checkpoint)?;
                on_checkpoint(ck_ref)
            })?
        };
        log::info!("part {index}: {:?}", report.test.as_ref().map(|m| m.accuracy));
        ck.completed.push(PartResult {
            index,
            split,
            report,
            history: state.history.clone(),
        });
        ck.final_model = Some(state.model);
        ck.current = None;
        ck.write(&paths.checkpoint)?;
        write_run_metrics(&paths.metrics, &ck.completed, model_cfg.experts)?;
    }
    let summary = RunSummary::from_parts(&ds.name, &ck.completed);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| MoseError::Internal(e.to_string()))?;
    fs::write(&paths.summary, text + "\n").map_err(|e| MoseError::io(&paths.summary, e))?;
    Ok(summary)
}

/// One CSV with a `part` column in front of the per-epoch metrics.
pub fn write_run_metrics(path: &Path, parts: &[PartResult], experts: usize) -> Result<()> {
    let io = |e| MoseError::io(path, e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    let loads: Vec<String> = (0..experts).map(|k| format!("expert_load_{k}")).collect();
    writeln!(w, "part,epoch,split,loss_task,loss_importance,accuracy,macro_f1,{}", loads.join(",")).map_err(io)?;
    for p in parts {
        for r in &p.history {
            let m = &r.metrics;
            let loads: Vec<String> = m.expert_load.iter().map(f64::to_string).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                p.index,
                r.epoch,
                r.split,
                m.loss_task,
                m.loss_importance,
                m.accuracy,
                m.macro_f1,
                loads.join(",")
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Record of one command invocation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub arguments: Vec<String>,
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub threads: usize,
    pub dataset_hash: Option<String>,
    pub outputs: Vec<String>,
    pub status: String,
    pub elapsed_seconds: f64,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| MoseError::io(dir, e))?;
        let path = dir.join(format!("manifest-{}.json", self.command));
        let text = serde_json::to_string_pretty(self).map_err(|e| MoseError::Internal(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| MoseError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_graph_five;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        for (k, v) in [("experts", "3"), ("hidden_graphs", "2"), ("hidden_dim", "6"), ("folds", "2"), ("epochs", "3"), ("batch_size", "4")] {
            c.set(k, v).unwrap();
        }
        c
    }

    #[test]
    fn interrupted_run_resumes_bit_identically() {
        let ds = gen_graph_five(10, 1).unwrap();
        let cfg = small_config();
        let cache = SubgraphCache::build(&ds, &cfg.walk_config()).unwrap();
        let full = tempfile::tempdir().unwrap();
        let full_paths = RunPaths::in_dir(full.path());
        let a = run_training(&cfg, &ds, &cache, &full_paths, None, &mut |_| Ok(())).unwrap();
        assert_eq!(a.parts, 2);

        // abort in the middle of the second part
        let dir = tempfile::tempdir().unwrap();
        let paths = RunPaths::in_dir(dir.path());
        let mut seen = 0;
        let err = run_training(&cfg, &ds, &cache, &paths, None, &mut |ck| {
            seen += 1;
            if ck.completed.len() == 1 && ck.current.as_ref().map(|c| c.state.epoch) == Some(1) {
                return Err(MoseError::Internal("interrupted".into()));
            }
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, MoseError::Internal(_)));
        assert_eq!(seen, 4);
        let ck = Checkpoint::read(&paths.checkpoint).unwrap();
        let b = run_training(&cfg, &ds, &cache, &paths, Some(ck), &mut |_| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(fs::read(&paths.metrics).unwrap(), fs::read(&full_paths.metrics).unwrap());
    }

    #[test]
    fn resume_rejects_other_configs() {
        let ds = gen_graph_five(10, 1).unwrap();
        let cfg = small_config();
        let cache = SubgraphCache::build(&ds, &cfg.walk_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = RunPaths::in_dir(dir.path());
        let one = RunConfig { epochs: 1, ..cfg.clone() };
        run_training(&one, &ds, &cache, &paths, None, &mut |_| Ok(())).unwrap();
        let ck = Checkpoint::read(&paths.checkpoint).unwrap();
        let other = RunConfig { lr: 0.5, ..cfg.clone() };
        assert!(run_training(&other, &ds, &cache, &paths, Some(ck.clone()), &mut |_| Ok(())).is_err());
        assert!(Checkpoint::read(&dir.path().join("missing.json")).is_err());
        fs::write(dir.path().join("bad.json"), "{}").unwrap();
        assert!(Checkpoint::read(&dir.path().join("bad.json")).is_err());
    }
}
