use mose_core::cache::SubgraphCache;
use mose_core::data::{with_degree_features, Dataset, TaskKind};
use mose_core::moe::{ModelConfig, MoseModel};
use mose_core::train::{evaluate, train, Split, TrainConfig, TrainState, TrainingData};
use mose_core::walks::WalkConfig;
use mose_core::Graph;

fn cycle_with_tail(cycle: usize, tail: usize) -> Graph {
    let mut edges: Vec<(usize, usize)> = (0..cycle).map(|i| (i, (i + 1) % cycle)).collect();
    for t in 0..tail {
        edges.push((if t == 0 { 0 } else { cycle + t - 1 }, cycle + t));
    }
    Graph::unlabeled(cycle + tail, &edges).unwrap()
}

fn toy_set() -> Dataset {
    let mut graphs = Vec::new();
    for i in 0..20 {
        let (cycle, label) = if i % 2 == 0 { (3, 0) } else { (4, 1) };
        graphs.push(cycle_with_tail(cycle, 1 + (i / 2) % 5).with_graph_label(Some(label)));
    }
    Dataset {
        name: "tails".into(),
        graphs: with_degree_features(graphs).unwrap(),
        task: TaskKind::GraphLevel,
        class_count: 2,
    }
}

fn run(seed: u64, epochs: usize, lr: f64) -> TrainState {
    let ds = toy_set();
    let cache = SubgraphCache::build(&ds, &WalkConfig { seed, ..Default::default() }).unwrap();
    let model = MoseModel::new(ModelConfig::new(ds.feature_dim(), 2, TaskKind::GraphLevel), seed).unwrap();
    let data = TrainingData::new(&ds, &cache, &model).unwrap();
    let cfg = TrainConfig { epochs, learning_rate: lr, seed, patience: 0, batch_size: 8, ..Default::default() };
    let split = Split { train: (0..20).collect(), val: vec![], test: vec![] };
    let mut state = TrainState::new(model, &cfg);
    train(&mut state, &data, &split, &cfg, &mut |_| Ok(())).unwrap();
    state
}

fn train_rows(state: &TrainState) -> Vec<(f64, f64)> {
    state
        .history
        .iter()
        .filter(|r| r.split == "train")
        .map(|r| (r.metrics.loss_task + 0.1 * r.metrics.loss_importance, r.metrics.accuracy))
        .collect()
}

#[test]
fn separable_toy_set_is_fit() {
    let state = run(0, 200, 1e-3);
    let ds = toy_set();
    let cache = SubgraphCache::build(&ds, &WalkConfig::default()).unwrap();
    let data = TrainingData::new(&ds, &cache, &state.model).unwrap();
    let all: Vec<usize> = (0..20).collect();
    assert_eq!(evaluate(&state.model, &data, &all).unwrap().accuracy, 1.0);
}

#[test]
fn loss_decreases_over_first_epochs() {
    let mut drops: Vec<f64> = (0..5)
        .map(|seed| {
            let rows = train_rows(&run(seed, 10, 1e-3));
            rows[0].0 - rows[9].0
        })
        .collect();
    drops.sort_by(f64::total_cmp);
    assert!(drops[2] > 0.0, "{drops:?}");
}

#[test]
fn training_is_reproducible() {
    let a = run(3, 4, 1e-2);
    let b = run(3, 4, 1e-2);
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
}
