use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mose_core::cache::SubgraphCache;
use mose_core::config::RunConfig;
use mose_core::data::{gen_graph_cycle, gen_graph_five, load_dataset, write_tu_dataset, Dataset};
use mose_core::run::{run_training, Checkpoint, Manifest, RunPaths};
use mose_core::train::{evaluate, TrainingData};
use mose_core::verify::{run_suite, Suite, VerifyOptions};
use mose_core::walks::top_patterns;
use mose_core::MoseError;

const EXIT_VERIFY: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "mose", version, about = "Mixture of subgraph experts over anonymous-walk neighborhoods")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset in TU format.
    Gen(GenArgs),
    /// Count anonymous walks and extract per-node subgraphs.
    Extract(ExtractArgs),
    /// Train with cross-validation or seeded splits.
    Train(TrainArgs),
    /// Evaluate the model stored in a checkpoint.
    Evaluate(EvaluateArgs),
    /// Run verification suites.
    Verify(VerifyArgs),
    /// Write the learned hidden graphs as Graphviz files.
    ExportHidden(ExportArgs),
}

/// Flags that map onto configuration keys.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    walk_length: Option<String>,
    #[arg(long)]
    walks_per_node: Option<String>,
    #[arg(long)]
    k_walk: Option<String>,
    #[arg(long)]
    subgraph_cap: Option<String>,
    /// Maximum walk step P.
    #[arg(long)]
    steps: Option<String>,
    /// single, sum or concat.
    #[arg(long)]
    step_mode: Option<String>,
    /// Number of experts K.
    #[arg(long)]
    experts: Option<String>,
    /// Hidden graphs per expert N.
    #[arg(long)]
    hidden_graphs: Option<String>,
    #[arg(long)]
    k_ept: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    folds: Option<String>,
    /// Any other configuration key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<RunConfig, MoseError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path).map_err(|e| match e {
                MoseError::Format { .. } => MoseError::InvalidArgument(e.to_string()),
                other => other,
            })?;
        }
        let named = [
            ("data_dir", &self.data_dir),
            ("dataset", &self.dataset),
            ("seed", &self.seed),
            ("walk_length", &self.walk_length),
            ("walks_per_node", &self.walks_per_node),
            ("k_walk", &self.k_walk),
            ("subgraph_cap", &self.subgraph_cap),
            ("steps", &self.steps),
            ("step_mode", &self.step_mode),
            ("experts", &self.experts),
            ("hidden_graphs", &self.hidden_graphs),
            ("k_ept", &self.k_ept),
            ("beta", &self.beta),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("dropout", &self.dropout),
            ("folds", &self.folds),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| MoseError::InvalidArgument(format!("--set expects key=value, got {pair:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        if cfg.dataset.is_empty() {
            return Err(MoseError::InvalidArgument("no dataset given (--dataset or config file)".into()));
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    /// GraphCycle or GraphFive.
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Cache file (default: <out-dir>/<dataset>.subgraphs).
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides the data directory stored in the checkpoint.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// kernel-oracle, grad, walks, wl or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 5)]
    max_nodes: usize,
    #[arg(long, default_value_t = 4)]
    max_p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random model initializations for the expressivity check.
    #[arg(long, default_value_t = 100)]
    inits: usize,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    prune_threshold: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

enum Failure {
    Verify,
    Error(MoseError),
}

impl From<MoseError> for Failure {
    fn from(e: MoseError) -> Self {
        Failure::Error(e)
    }
}

/// What a command did, for the manifest.
struct Outcome {
    config: Vec<(String, String)>,
    seed: u64,
    dataset_hash: Option<String>,
    outputs: Vec<PathBuf>,
}

impl Outcome {
    fn new(seed: u64) -> Self {
        Outcome {
            config: Vec::new(),
            seed,
            dataset_hash: None,
            outputs: Vec::new(),
        }
    }
}

fn exit_code(e: &MoseError) -> u8 {
    match e {
        MoseError::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_USAGE);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(EXIT_RUNTIME);
    }

    let (name, out_dir) = match &cli.command {
        Command::Gen(a) => ("gen", a.out_dir.clone()),
        Command::Extract(a) => ("extract", a.out_dir.clone()),
        Command::Train(a) => ("train", a.out_dir.clone()),
        Command::Evaluate(a) => ("evaluate", a.out_dir.clone()),
        Command::Verify(a) => ("verify", a.out_dir.clone()),
        Command::ExportHidden(a) => ("export-hidden", a.out_dir.clone()),
    };
    let start = Instant::now();
    let mut outcome = Outcome::new(0);
    let result = fs::create_dir_all(&out_dir)
        .map_err(|e| Failure::Error(MoseError::io(&out_dir, e)))
        .and_then(|_| match cli.command {
            Command::Gen(a) => cmd_gen(a, &mut outcome),
            Command::Extract(a) => cmd_extract(a, &mut outcome),
            Command::Train(a) => cmd_train(a, &mut outcome),
            Command::Evaluate(a) => cmd_evaluate(a, &mut outcome),
            Command::Verify(a) => cmd_verify(a, &mut outcome),
            Command::ExportHidden(a) => cmd_export(a, &mut outcome),
        });
    let (status, code) = match &result {
        Ok(()) => ("ok".to_string(), 0),
        Err(Failure::Verify) => ("verification failed".to_string(), EXIT_VERIFY),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            (format!("error: {e}"), exit_code(e))
        }
    };
    let manifest = Manifest {
        command: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        arguments: std::env::args().skip(1).collect(),
        config: outcome.config,
        seed: outcome.seed,
        threads,
        dataset_hash: outcome.dataset_hash,
        outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
        status,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    if out_dir.is_dir() {
        if let Err(e) = manifest.write(&out_dir) {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    ExitCode::from(code)
}

fn cmd_gen(a: GenArgs, out: &mut Outcome) -> Result<(), Failure> {
    out.seed = a.seed;
    let ds = match a.dataset.as_str() {
        "GraphCycle" => gen_graph_cycle(a.count, a.seed)?,
        "GraphFive" => gen_graph_five(a.count, a.seed)?,
        other => return Err(MoseError::InvalidArgument(format!("unknown synthetic dataset {other:?}")).into()),
    };
    write_tu_dataset(&ds, &a.out_dir, true)?;
    out.config = vec![("dataset".into(), a.dataset.clone()), ("count".into(), a.count.to_string())];
    out.dataset_hash = Some(ds.content_hash());
    out.outputs.push(a.out_dir.join(&ds.name));
    println!("wrote {} graphs to {}", ds.graphs.len(), a.out_dir.join(&ds.name).display());
    Ok(())
}

fn load(cfg: &RunConfig, out: &mut Outcome) -> Result<Dataset, MoseError> {
    let ds = load_dataset(&cfg.data_dir, &cfg.dataset)?;
    out.dataset_hash = Some(ds.content_hash());
    Ok(ds)
}

fn subgraphs(cfg: &RunConfig, ds: &Dataset, cache: Option<PathBuf>, out_dir: &Path) -> Result<(SubgraphCache, bool, PathBuf), MoseError> {
    let path = cache.unwrap_or_else(|| out_dir.join(format!("{}.subgraphs", cfg.dataset)));
    let (cache, reused) = SubgraphCache::load_or_build(&path, ds, &cfg.walk_config())?;
    Ok((cache, reused, path))
}

fn cmd_extract(a: ExtractArgs, out: &mut Outcome) -> Result<(), Failure> {
    let cfg = a.flags.resolve()?;
    out.seed = cfg.seed;
    out.config = cfg.entries();
    let ds = load(&cfg, out)?;
    let (cache, reused, path) = subgraphs(&cfg, &ds, a.cache, &a.out_dir)?;
    out.outputs.push(path.clone());

    let mut totals = BTreeMap::new();
    let mut graphs_using = BTreeMap::new();
    for g in &cache.graphs {
        for (p, c) in &g.patterns {
            *totals.entry(p.clone()).or_insert(0u64) += c;
            *graphs_using.entry(p.clone()).or_insert(0usize) += 1;
        }
    }
    println!("pattern\tcount\tgraphs");
    for (p, c) in top_patterns(&totals, totals.len()) {
        println!("{p}\t{c}\t{}", graphs_using[&p]);
    }
    let nodes: usize = cache.graphs.iter().map(|g| g.node_sets.len()).sum();
    println!("nodes: {nodes}");
    println!("singleton subgraphs: {}", cache.singleton_count());
    println!("cache: {} ({})", path.display(), if reused { "reused" } else { "built" });
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut Outcome) -> Result<(), Failure> {
    let cfg = a.flags.resolve()?;
    out.seed = cfg.seed;
    out.config = cfg.entries();
    let ds = load(&cfg, out)?;
    let (cache, _, cache_path) = subgraphs(&cfg, &ds, a.cache, &a.out_dir)?;
    out.outputs.push(cache_path);
    let resume = a.resume.as_deref().map(Checkpoint::read).transpose()?;
    let paths = RunPaths::in_dir(&a.out_dir);
    fs::write(a.out_dir.join("config.txt"), cfg.to_text()).map_err(|e| MoseError::io(&a.out_dir, e))?;
    match run_training(&cfg, &ds, &cache, &paths, resume, &mut |_| Ok(())) {
        Ok(summary) => {
            out.outputs.extend([paths.checkpoint, paths.metrics, paths.summary]);
            println!(
                "{}: accuracy {:.4} ± {:.4} over {} parts, macro-F1 {:.4}",
                summary.dataset, summary.mean_accuracy, summary.std_accuracy, summary.parts, summary.mean_macro_f1
            );
            Ok(())
        }
        Err(e) => {
            if matches!(e, MoseError::NonFinite(_)) {
                let dump = a.out_dir.join("failure.txt");
                let text = format!("{e}\n\nlast checkpoint: {}\n\n{}", paths.checkpoint.display(), cfg.to_text());
                if fs::write(&dump, text).is_ok() {
                    eprintln!("failure details written to {}", dump.display());
                    out.outputs.push(dump);
                }
            }
            Err(e.into())
        }
    }
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut Outcome) -> Result<(), Failure> {
    let ck = Checkpoint::read(&a.checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(dir) = a.data_dir {
        cfg.data_dir = dir;
    }
    out.seed = a.seed.unwrap_or(cfg.seed);
    out.config = cfg.entries();
    let model = ck
        .model()
        .ok_or_else(|| MoseError::InvalidArgument("checkpoint holds no model".into()))?;
    let ds = load(&cfg, out)?;
    if ds.content_hash() != ck.dataset_hash {
        return Err(MoseError::InvalidArgument("dataset differs from the one in the checkpoint".into()).into());
    }
    let (cache, _, _) = subgraphs(&cfg, &ds, a.cache, &a.out_dir)?;
    let data = TrainingData::new(&ds, &cache, model)?;
    let split = ck
        .current
        .as_ref()
        .filter(|_| ck.final_model.is_none())
        .map(|c| &c.split)
        .or(ck.completed.last().map(|p| &p.split));
    let all: Vec<usize> = (0..data.item_count()).collect();
    let mut parts = vec![("all", all)];
    if let Some(s) = split {
        parts.extend([("train", s.train.clone()), ("val", s.val.clone()), ("test", s.test.clone())]);
    }
    let mut report = BTreeMap::new();
    for (name, items) in parts {
        if items.is_empty() {
            continue;
        }
        let m = evaluate(model, &data, &items)?;
        println!("{name}: accuracy {:.4}, macro-F1 {:.4}, task loss {:.6}", m.accuracy, m.macro_f1, m.loss_task);
        report.insert(name, m);
    }
    let path = a.out_dir.join("evaluation.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| MoseError::Internal(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| MoseError::io(&path, e))?;
    out.outputs.push(path);
    Ok(())
}

fn cmd_verify(a: VerifyArgs, out: &mut Outcome) -> Result<(), Failure> {
    let suites: Vec<Suite> = if a.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![a.suite.parse()?]
    };
    let opts = VerifyOptions {
        max_nodes: a.max_nodes,
        max_p: a.max_p,
        seed: a.seed,
        model_inits: a.inits,
    };
    out.seed = a.seed;
    out.config = vec![
        ("suite".into(), a.suite.clone()),
        ("max_nodes".into(), a.max_nodes.to_string()),
        ("max_p".into(), a.max_p.to_string()),
        ("inits".into(), a.inits.to_string()),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for suite in suites {
        let report = run_suite(suite, &opts);
        for line in report.lines() {
            println!("{line}");
            lines.push(line);
        }
        ok &= report.passed();
        for (name, contents) in &report.artifacts {
            let path = a.out_dir.join(name);
            fs::write(&path, contents).map_err(|e| MoseError::io(&path, e))?;
            out.outputs.push(path);
        }
    }
    let path = a.out_dir.join("verify-report.txt");
    fs::write(&path, lines.join("\n") + "\n").map_err(|e| MoseError::io(&path, e))?;
    out.outputs.push(path);
    if ok {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn cmd_export(a: ExportArgs, out: &mut Outcome) -> Result<(), Failure> {
    if !(a.prune_threshold >= 0.0) {
        return Err(MoseError::InvalidArgument("--prune-threshold must be non-negative".into()).into());
    }
    let ck = Checkpoint::read(&a.checkpoint)?;
    out.seed = a.seed.unwrap_or(ck.config.seed);
    out.config = vec![("prune_threshold".into(), a.prune_threshold.to_string())];
    out.dataset_hash = Some(ck.dataset_hash.clone());
    let model = ck
        .model()
        .ok_or_else(|| MoseError::InvalidArgument("checkpoint holds no model".into()))?;
    for (k, expert) in model.params.bank.experts.iter().enumerate() {
        for (i, h) in expert.hidden.iter().enumerate() {
            let name = format!("expert{k}_hg{i}");
            let path = a.out_dir.join(format!("{name}.dot"));
            fs::write(&path, h.to_dot(&name, a.prune_threshold)).map_err(|e| MoseError::io(&path, e))?;
            out.outputs.push(path);
        }
    }
    println!("wrote {} hidden graphs to {}", out.outputs.len(), a.out_dir.display());
    Ok(())
}
