//! Datasets: TU benchmark loading and writing, WebKB-style node
//! classification graphs, synthetic community-layout generators, and
//! stratified splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{MoseError, Result};
use crate::graph::{degree_features, Graph};
use crate::rng::{substream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TaskKind {
    GraphLevel,
    NodeLevel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub task: TaskKind,
    pub class_count: usize,
}

impl Dataset {
    pub fn feature_dim(&self) -> usize {
        self.graphs.first().map(|g| g.feature_dim()).unwrap_or(0)
    }

    /// Labels of the prediction targets: one per graph for graph tasks, one
    /// per node of the single graph for node tasks.
    pub fn labels(&self) -> Vec<usize> {
        match self.task {
            TaskKind::GraphLevel => self.graphs.iter().map(|g| g.graph_label().unwrap_or(0)).collect(),
            TaskKind::NodeLevel => self.graphs[0].node_labels().map(<[usize]>::to_vec).unwrap_or_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.graphs.is_empty() {
            return Err(MoseError::InvalidArgument(format!("dataset {} has no graphs", self.name)));
        }
        if self.task == TaskKind::NodeLevel && (self.graphs.len() != 1 || self.graphs[0].node_labels().is_none()) {
            return Err(MoseError::InvalidArgument("node-level datasets hold one labeled graph".into()));
        }
        let f = self.feature_dim();
        if self.graphs.iter().any(|g| g.feature_dim() != f) {
            return Err(MoseError::InvalidArgument("graphs disagree on feature width".into()));
        }
        if let Some(&bad) = self.labels().iter().find(|&&y| y >= self.class_count) {
            return Err(MoseError::InvalidArgument(format!("label {bad} outside 0..{}", self.class_count)));
        }
        Ok(())
    }

    /// SHA-256 over structure, features and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update([self.task as u8]);
        h.update((self.class_count as u64).to_le_bytes());
        for g in &self.graphs {
            h.update((g.node_count() as u64).to_le_bytes());
            for (u, v) in g.edges() {
                h.update((u as u64).to_le_bytes());
                h.update((v as u64).to_le_bytes());
            }
            h.update((g.feature_dim() as u64).to_le_bytes());
            for x in g.features().iter() {
                h.update(x.to_bits().to_le_bytes());
            }
            h.update(g.graph_label().map(|y| y as u64 + 1).unwrap_or(0).to_le_bytes());
            for &y in g.node_labels().unwrap_or(&[]) {
                h.update((y as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)>> {
    let file = fs::File::open(path).map_err(|e| MoseError::io(path, e))?;
    let owned = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| MoseError::io(&owned, e)))))
}

fn file_label(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn parse_ints(path: &Path) -> Result<Vec<i64>> {
    let mut out = Vec::new();
    for (line, text) in open_lines(path)? {
        let text = text?;
        let t = text.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse().map_err(|_| MoseError::format(file_label(path), line, format!("not an integer: {t:?}")))?);
    }
    Ok(out)
}

/// Sorted distinct values mapped to `0..C`.
fn remap<T: Ord + Copy>(values: &[T]) -> (Vec<usize>, usize) {
    let distinct: Vec<T> = values.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let ids = values.iter().map(|v| distinct.binary_search(v).expect("present")).collect();
    (ids, distinct.len())
}

/// Locates the TU files of `name` either directly in `directory` or in
/// `directory/name`.
fn tu_root(directory: &Path, name: &str) -> PathBuf {
    let nested = directory.join(name);
    if nested.join(format!("{name}_A.txt")).exists() {
        nested
    } else {
        directory.to_path_buf()
    }
}

/// Reads a graph classification dataset in TU format.
pub fn load_tu_dataset(directory: &Path, name: &str) -> Result<Dataset> {
    let root = tu_root(directory, name);
    let file = |suffix: &str| root.join(format!("{name}_{suffix}.txt"));
    for required in ["A", "graph_indicator", "graph_labels"] {
        let p = file(required);
        if !p.exists() {
            return Err(MoseError::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "required TU file missing")));
        }
    }

    let indicator = parse_ints(&file("graph_indicator"))?;
    let total = indicator.len();
    let graph_labels_raw = parse_ints(&file("graph_labels"))?;
    let graph_count = graph_labels_raw.len();
    let mut graph_of = Vec::with_capacity(total);
    for (i, &g) in indicator.iter().enumerate() {
        if g < 1 || g as usize > graph_count {
            return Err(MoseError::format(
                file_label(&file("graph_indicator")),
                i + 1,
                format!("graph id {g} outside 1..={graph_count}"),
            ));
        }
        graph_of.push(g as usize - 1);
    }
    // local index of every node within its graph
    let mut sizes = vec![0usize; graph_count];
    let mut local = Vec::with_capacity(total);
    for &g in &graph_of {
        local.push(sizes[g]);
        sizes[g] += 1;
    }

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph_count];
    let a_path = file("A");
    for (line, text) in open_lines(&a_path)? {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        let parse = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| MoseError::format(file_label(&a_path), line, format!("bad node id {s:?}")))
        };
        if parts.len() != 2 {
            return Err(MoseError::format(file_label(&a_path), line, "expected `i, j`"));
        }
        let (i, j) = (parse(parts[0])?, parse(parts[1])?);
        for id in [i, j] {
            if id == 0 || id > total {
                return Err(MoseError::format(
                    file_label(&a_path),
                    line,
                    format!("dangling node id {id} (nodes are 1..={total})"),
                ));
            }
        }
        let (gi, gj) = (graph_of[i - 1], graph_of[j - 1]);
        if gi != gj {
            return Err(MoseError::format(file_label(&a_path), line, "edge joins two different graphs"));
        }
        if i != j {
            edges[gi].push((local[i - 1], local[j - 1]));
        }
    }

    let node_labels = if file("node_labels").exists() {
        let raw = parse_ints(&file("node_labels"))?;
        if raw.len() != total {
            return Err(MoseError::format(file_label(&file("node_labels")), raw.len(), "one label per node expected"));
        }
        Some(remap(&raw))
    } else {
        None
    };
    let attributes = if file("node_attributes").exists() {
        let path = file("node_attributes");
        let mut rows = Vec::with_capacity(total);
        for (line, text) in open_lines(&path)? {
            let text = text?;
            if text.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = text
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| MoseError::format(file_label(&path), line, format!("{e}")))?;
            if rows.first().map(|r: &Vec<f64>| r.len() != row.len()).unwrap_or(false) {
                return Err(MoseError::format(file_label(&path), line, "ragged attribute rows"));
            }
            rows.push(row);
        }
        if rows.len() != total {
            return Err(MoseError::format(file_label(&path), rows.len(), "one attribute row per node expected"));
        }
        Some(rows)
    } else {
        None
    };

    let (labels, class_count) = remap(&graph_labels_raw);
    let mut first_node = vec![0usize; graph_count];
    for g in 1..graph_count {
        first_node[g] = first_node[g - 1] + sizes[g - 1];
    }
    if graph_of.windows(2).any(|w| w[1] < w[0]) {
        return Err(MoseError::format(
            file_label(&file("graph_indicator")),
            0,
            "graph ids must be non-decreasing",
        ));
    }

    let mut graphs = Vec::with_capacity(graph_count);
    for g in 0..graph_count {
        let n = sizes[g];
        let label_dim = node_labels.as_ref().map(|(_, c)| *c).unwrap_or(0);
        let attr_dim = attributes.as_ref().map(|r| r.first().map(Vec::len).unwrap_or(0)).unwrap_or(0);
        let mut x = Array2::zeros((n, attr_dim + label_dim));
        for v in 0..n {
            let global = first_node[g] + v;
            if let Some(rows) = &attributes {
                for (k, &a) in rows[global].iter().enumerate() {
                    x[[v, k]] = a;
                }
            }
            if let Some((ids, _)) = &node_labels {
                x[[v, attr_dim + ids[global]]] = 1.0;
            }
        }
        graphs.push(Graph::from_edges(n, &edges[g], x)?.with_graph_label(Some(labels[g])));
    }
    if node_labels.is_none() && attributes.is_none() {
        graphs = with_degree_features(graphs)?;
    }
    let ds = Dataset {
        name: name.to_string(),
        graphs,
        task: TaskKind::GraphLevel,
        class_count,
    };
    ds.validate()?;
    Ok(ds)
}

/// Replaces features by one-hot degrees capped at the collection-wide maximum.
pub fn with_degree_features(graphs: Vec<Graph>) -> Result<Vec<Graph>> {
    let cap = graphs.iter().map(Graph::max_degree).max().unwrap_or(0);
    graphs
        .into_iter()
        .map(|g| {
            let x = degree_features(&g, cap);
            g.with_features(x)
        })
        .collect()
}

/// Writes a graph-level dataset in TU format. Features go to
/// `_node_attributes.txt` when `write_features` is set.
pub fn write_tu_dataset(ds: &Dataset, directory: &Path, write_features: bool) -> Result<()> {
    if ds.task != TaskKind::GraphLevel {
        return Err(MoseError::InvalidArgument("TU format holds graph-level datasets".into()));
    }
    fs::create_dir_all(directory).map_err(|e| MoseError::io(directory, e))?;
    let create = |suffix: &str| -> Result<(PathBuf, BufWriter<fs::File>)> {
        let p = directory.join(format!("{}_{suffix}.txt", ds.name));
        let f = fs::File::create(&p).map_err(|e| MoseError::io(&p, e))?;
        Ok((p, BufWriter::new(f)))
    };
    let (pa, mut a) = create("A")?;
    let (pi, mut ind) = create("graph_indicator")?;
    let (pl, mut lab) = create("graph_labels")?;
    let mut attrs = if write_features { Some(create("node_attributes")?) } else { None };
    let mut offset = 0usize;
    for (gi, g) in ds.graphs.iter().enumerate() {
        for u in 0..g.node_count() {
            for &v in g.neighbors(u) {
                writeln!(a, "{}, {}", offset + u + 1, offset + v + 1).map_err(|e| MoseError::io(&pa, e))?;
            }
            writeln!(ind, "{}", gi + 1).map_err(|e| MoseError::io(&pi, e))?;
            if let Some((p, w)) = attrs.as_mut() {
                let row: Vec<String> = g.features().row(u).iter().map(|x| x.to_string()).collect();
                writeln!(w, "{}", row.join(", ")).map_err(|e| MoseError::io(&*p, e))?;
            }
        }
        writeln!(lab, "{}", g.graph_label().unwrap_or(0)).map_err(|e| MoseError::io(&pl, e))?;
        offset += g.node_count();
    }
    for (p, mut w) in [(pa, a), (pi, ind), (pl, lab)].into_iter().chain(attrs) {
        w.flush().map_err(|e| MoseError::io(&p, e))?;
    }
    Ok(())
}

/// Reads a node classification graph stored as
/// `out1_node_feature_label.txt` (tab-separated id, comma-separated features,
/// label) and `out1_graph_edges.txt` (tab-separated id pairs), each with a
/// header line. Edges are symmetrized and self-loops dropped.
pub fn load_node_dataset(directory: &Path, name: &str) -> Result<Dataset> {
    let root = if directory.join(name).join("out1_graph_edges.txt").exists() {
        directory.join(name)
    } else {
        directory.to_path_buf()
    };
    let feat_path = root.join("out1_node_feature_label.txt");
    let edge_path = root.join("out1_graph_edges.txt");
    let mut rows: BTreeMap<usize, (Vec<f64>, i64)> = BTreeMap::new();
    for (line, text) in open_lines(&feat_path)? {
        let text = text?;
        if line == 1 || text.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = text.split('\t').collect();
        let bad = |m: &str| MoseError::format(file_label(&feat_path), line, m.to_string());
        if parts.len() != 3 {
            return Err(bad("expected `id<TAB>features<TAB>label`"));
        }
        let id: usize = parts[0].trim().parse().map_err(|_| bad("bad node id"))?;
        let x: Vec<f64> = parts[1]
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad feature value"))?;
        let y: i64 = parts[2].trim().parse().map_err(|_| bad("bad label"))?;
        rows.insert(id, (x, y));
    }
    let n = rows.len();
    if rows.keys().copied().ne(0..n) {
        return Err(MoseError::format(file_label(&feat_path), 0, "node ids must be 0..n-1"));
    }
    let f = rows.values().next().map(|(x, _)| x.len()).unwrap_or(0);
    let mut x = Array2::zeros((n, f));
    let mut raw_labels = Vec::with_capacity(n);
    for (id, (row, y)) in &rows {
        if row.len() != f {
            return Err(MoseError::format(file_label(&feat_path), id + 2, "ragged feature rows"));
        }
        for (k, &val) in row.iter().enumerate() {
            x[[*id, k]] = val;
        }
        raw_labels.push(*y);
    }
    let mut edges = Vec::new();
    for (line, text) in open_lines(&edge_path)? {
        let text = text?;
        if line == 1 || text.trim().is_empty() {
            continue;
        }
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| MoseError::format(file_label(&edge_path), line, "bad node id"))?;
        let [u, v] = ids[..] else {
            return Err(MoseError::format(file_label(&edge_path), line, "expected two node ids"));
        };
        if u >= n || v >= n {
            return Err(MoseError::format(file_label(&edge_path), line, format!("dangling node id in ({u}, {v})")));
        }
        if u != v {
            edges.push((u, v));
        }
    }
    let (labels, class_count) = remap(&raw_labels);
    let g = Graph::from_edges(n, &edges, x)?.with_node_labels(Some(labels))?;
    let ds = Dataset {
        name: name.to_string(),
        graphs: vec![g],
        task: TaskKind::NodeLevel,
        class_count,
    };
    ds.validate()?;
    Ok(ds)
}

/// Loads `name` from `directory`, recognizing TU and node-graph layouts.
pub fn load_dataset(directory: &Path, name: &str) -> Result<Dataset> {
    let node_layout = [directory.join(name), directory.to_path_buf()]
        .iter()
        .any(|d| d.join("out1_graph_edges.txt").exists());
    if node_layout {
        load_node_dataset(directory, name)
    } else {
        load_tu_dataset(directory, name)
    }
}

/// Community-level wiring patterns of the synthetic datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Cycle,
    /// Random recursive tree over communities.
    NonCycle,
    Caveman,
    Grid,
    Ladder,
    Star,
}

impl Layout {
    /// Pairs of communities to wire together.
    pub fn community_edges(self, c: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
        match self {
            Layout::Cycle => (0..c).map(|i| (i, (i + 1) % c)).collect(),
            Layout::NonCycle => (1..c).map(|i| (rng.random_range(0..i), i)).collect(),
            Layout::Caveman => (0..c).flat_map(|i| (i + 1..c).map(move |j| (i, j))).collect(),
            Layout::Star => (1..c).map(|i| (0, i)).collect(),
            Layout::Ladder => {
                let rail = c.div_ceil(2);
                let mut e = Vec::new();
                for i in 0..c {
                    let (side, pos) = (i / rail, i % rail);
                    if pos + 1 < rail && i + 1 < c {
                        e.push((i, i + 1));
                    }
                    if side == 0 && i + rail < c {
                        e.push((i, i + rail));
                    }
                }
                e
            }
            Layout::Grid => {
                let rows = ((c as f64).sqrt().floor() as usize).max(1);
                let cols = c.div_ceil(rows);
                let mut e = Vec::new();
                for i in 0..c {
                    let (r, col) = (i / cols, i % cols);
                    if col + 1 < cols && i + 1 < c {
                        e.push((i, i + 1));
                    }
                    if i + cols < c {
                        e.push((i, i + cols));
                    }
                    let _ = r;
                }
                e
            }
        }
    }
}

/// Barabási–Albert graph: a star on `m + 1` nodes grown by preferential
/// attachment, each new node linking to `m` distinct existing nodes.
pub fn barabasi_albert(n: usize, m: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    assert!(m >= 1 && n > m);
    let mut edges: Vec<(usize, usize)> = (1..=m).map(|v| (0, v)).collect();
    let mut repeated: Vec<usize> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
    for v in m + 1..n {
        let mut targets = BTreeSet::new();
        while targets.len() < m {
            targets.insert(repeated[rng.random_range(0..repeated.len())]);
        }
        for &t in &targets {
            edges.push((t, v));
            repeated.push(t);
            repeated.push(v);
        }
    }
    edges
}

/// Parameters of the community-layout generator.
#[derive(Debug, Clone, Copy)]
pub struct CommunitySpec {
    pub communities: (usize, usize),
    pub community_size: (usize, usize),
    pub link_probability: (f64, f64),
}

/// One graph: BA communities wired along `layout`. Each layout-adjacent
/// community pair gets one bridge edge, then every cross pair of their nodes
/// is linked with probability `p`.
pub fn community_graph(layout: Layout, spec: &CommunitySpec, rng: &mut impl Rng) -> Result<Graph> {
    let c = rng.random_range(spec.communities.0..=spec.communities.1);
    let p = rng.random_range(spec.link_probability.0..=spec.link_probability.1);
    let mut offsets = Vec::with_capacity(c + 1);
    offsets.push(0usize);
    let mut edges = Vec::new();
    for _ in 0..c {
        let size = rng.random_range(spec.community_size.0..=spec.community_size.1);
        let m = rng.random_range(1..=3usize).min(size - 1);
        let base = *offsets.last().expect("non-empty");
        edges.extend(barabasi_albert(size, m, rng).into_iter().map(|(a, b)| (a + base, b + base)));
        offsets.push(base + size);
    }
    let members = |i: usize| offsets[i]..offsets[i + 1];
    for (a, b) in layout.community_edges(c, rng) {
        edges.push((rng.random_range(members(a)), rng.random_range(members(b))));
        for u in members(a) {
            for v in members(b) {
                if rng.random_bool(p) {
                    edges.push((u, v));
                }
            }
        }
    }
    Graph::unlabeled(offsets[c], &edges)
}

fn generate(name: &str, layouts: &[Layout], spec: CommunitySpec, count: usize, seed: u64) -> Result<Dataset> {
    if count < 2 {
        return Err(MoseError::InvalidArgument("count must be at least 2".into()));
    }
    let graphs = (0..count)
        .map(|i| {
            let class = i % layouts.len();
            let mut rng = substream(seed, &[tag::GENERATE, i as u64]);
            community_graph(layouts[class], &spec, &mut rng).map(|g| g.with_graph_label(Some(class)))
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        name: name.to_string(),
        graphs: with_degree_features(graphs)?,
        task: TaskKind::GraphLevel,
        class_count: layouts.len(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Two classes: communities wired in a ring (0) or a tree (1).
pub fn gen_graph_cycle(count: usize, seed: u64) -> Result<Dataset> {
    let spec = CommunitySpec {
        communities: (8, 15),
        community_size: (10, 34),
        link_probability: (0.05, 0.15),
    };
    generate("GraphCycle", &[Layout::Cycle, Layout::NonCycle], spec, count, seed)
}

/// Five classes: caveman, cycle, grid, ladder and star community layouts.
pub fn gen_graph_five(count: usize, seed: u64) -> Result<Dataset> {
    let spec = CommunitySpec {
        communities: (8, 15),
        community_size: (10, 15),
        link_probability: (0.05, 0.15),
    };
    let layouts = [Layout::Caveman, Layout::Cycle, Layout::Grid, Layout::Ladder, Layout::Star];
    generate("GraphFive", &layouts, spec, count, seed)
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NodeMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl NodeMasks {
    pub fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SplitKind {
    KFold(Vec<Fold>),
    Masks(NodeMasks),
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub seed: u64,
}

fn shuffled_by_class(labels: &[usize], class_count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); class_count];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut substream(seed, &[tag::SPLIT, c as u64]));
    }
    by_class
}

/// Stratified k-fold: members of each class are shuffled, the classes are
/// concatenated, and position `i` goes to fold `i mod k`.
pub fn make_folds(ds: &Dataset, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(MoseError::InvalidArgument("k must be at least 2".into()));
    }
    if ds.task != TaskKind::GraphLevel {
        return Err(MoseError::InvalidArgument("folds need a graph-level dataset".into()));
    }
    let labels = ds.labels();
    if labels.len() < k {
        return Err(MoseError::InvalidArgument(format!("{} graphs cannot fill {k} folds", labels.len())));
    }
    let by_class = shuffled_by_class(&labels, ds.class_count, seed);
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            log::warn!("class {c} has {} members for {k} folds; stratification is degenerate", members.len());
        }
    }
    let mut fold_of = vec![0usize; labels.len()];
    for (pos, &i) in by_class.iter().flatten().enumerate() {
        fold_of[i] = pos % k;
    }
    let folds = (0..k)
        .map(|f| {
            let (test, train) = (0..labels.len()).partition(|&i| fold_of[i] == f);
            Fold { train, test }
        })
        .collect();
    Ok(SplitPlan {
        kind: SplitKind::KFold(folds),
        seed,
    })
}

/// Stratified train/val/test masks. Part sizes are `floor(ratio · n)` with
/// leftovers going to train, then val, then test. Nodes are ordered by their
/// relative rank inside their shuffled class, so every prefix is close to
/// class-proportional.
pub fn make_node_splits(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<SplitPlan> {
    if ds.task != TaskKind::NodeLevel {
        return Err(MoseError::InvalidArgument("node splits need a node-level dataset".into()));
    }
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|&r| !(0.0..=1.0).contains(&r)) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(MoseError::InvalidArgument(format!("ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let labels = ds.labels();
    let n = labels.len();
    let by_class = shuffled_by_class(&labels, ds.class_count, seed);
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(MoseError::InvalidArgument(format!("class {c} has no labeled nodes")));
    }
    let mut sizes = [(rt * n as f64).floor() as usize, (rv * n as f64).floor() as usize, (rs * n as f64).floor() as usize];
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut part = 0;
    while leftover > 0 {
        if [rt, rv, rs][part] > 0.0 {
            sizes[part] += 1;
            leftover -= 1;
        }
        part = (part + 1) % 3;
    }
    let mut order: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for (c, members) in by_class.iter().enumerate() {
        for (rank, &i) in members.iter().enumerate() {
            order.push(((rank as f64 + 0.5) / members.len() as f64, c, i));
        }
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut masks = NodeMasks {
        train: vec![false; n],
        val: vec![false; n],
        test: vec![false; n],
    };
    for (pos, &(_, _, i)) in order.iter().enumerate() {
        let target = if pos < sizes[0] {
            &mut masks.train
        } else if pos < sizes[0] + sizes[1] {
            &mut masks.val
        } else {
            &mut masks.test
        };
        target[i] = true;
    }
    Ok(SplitPlan {
        kind: SplitKind::Masks(masks),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canon::isomorphic;

    fn write(dir: &Path, name: &str, suffix: &str, body: &str) {
        fs::write(dir.join(format!("{name}_{suffix}.txt")), body).unwrap();
    }

    #[test]
    fn smallest_tu_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "T", "A", "1, 2\n2, 1\n");
        write(dir.path(), "T", "graph_indicator", "1\n1\n");
        write(dir.path(), "T", "graph_labels", "-1\n");
        let ds = load_tu_dataset(dir.path(), "T").unwrap();
        assert_eq!(ds.graphs.len(), 1);
        assert_eq!(ds.graphs[0].node_count(), 2);
        assert_eq!(ds.graphs[0].edge_count(), 1);
        assert_eq!(ds.class_count, 1);
        // degree one-hot with global cap 1
        assert_eq!(ds.graphs[0].features().row(0).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn labels_and_attributes_become_features() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "T", "A", "1,2\n2,1\n3 , 4\n");
        write(dir.path(), "T", "graph_indicator", "1\n1\n2\n2\n");
        write(dir.path(), "T", "graph_labels", "-1\n1\n");
        write(dir.path(), "T", "node_labels", "5\n7\n7\n5\n");
        write(dir.path(), "T", "node_attributes", "0.5, 1\n2,3\n4, 5\n6 ,7\n");
        let ds = load_tu_dataset(dir.path(), "T").unwrap();
        assert_eq!(ds.labels(), vec![0, 1]);
        assert_eq!(ds.graphs[1].features().row(0).to_vec(), vec![4.0, 5.0, 0.0, 1.0]);
        assert_eq!(ds.graphs[0].features().row(0).to_vec(), vec![0.5, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn loader_errors_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "T", "A", "1, 2\n2, 9\n");
        write(dir.path(), "T", "graph_indicator", "1\n1\n");
        let err = load_tu_dataset(dir.path(), "T").unwrap_err().to_string();
        assert!(err.contains("T_graph_labels.txt"), "{err}");
        write(dir.path(), "T", "graph_labels", "0\n");
        let err = load_tu_dataset(dir.path(), "T").unwrap_err();
        match err {
            MoseError::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn tu_round_trip() {
        let ds = gen_graph_five(5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_tu_dataset(&ds, dir.path(), true).unwrap();
        let back = load_tu_dataset(dir.path(), "GraphFive").unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in ds.graphs.iter().zip(&back.graphs) {
            assert_eq!(a.features(), b.features());
            assert_eq!(a.edges().collect::<Vec<_>>(), b.edges().collect::<Vec<_>>());
        }
        let small = Dataset {
            name: "S".into(),
            graphs: vec![crate::graph::named::cycle(5).with_graph_label(Some(0))],
            task: TaskKind::GraphLevel,
            class_count: 1,
        };
        write_tu_dataset(&small, dir.path(), false).unwrap();
        let back = load_tu_dataset(dir.path(), "S").unwrap();
        assert!(isomorphic(&back.graphs[0], &small.graphs[0]).unwrap());
    }

    #[test]
    fn node_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("out1_node_feature_label.txt"),
            "node_id\tfeature\tlabel\n0\t1,0\t3\n1\t0,1\t4\n2\t1,1\t3\n",
        )
        .unwrap();
        fs::write(dir.path().join("out1_graph_edges.txt"), "node_id\tnode_id\n0\t1\n1\t0\n2\t2\n1\t2\n").unwrap();
        let ds = load_dataset(dir.path(), "tiny").unwrap();
        assert_eq!(ds.task, TaskKind::NodeLevel);
        assert_eq!(ds.labels(), vec![0, 1, 0]);
        assert_eq!(ds.graphs[0].edge_count(), 2);
    }

    #[test]
    fn generators_are_deterministic_balanced_and_connected() {
        let a = gen_graph_cycle(10, 42).unwrap();
        let b = gen_graph_cycle(10, 42).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let labels = a.labels();
        assert!(labels.contains(&0) && labels.contains(&1));
        let five = gen_graph_five(10, 1).unwrap();
        assert_eq!(five.class_count, 5);
        for g in a.graphs.iter().chain(&five.graphs) {
            assert!(g.is_connected());
        }
        assert!(gen_graph_cycle(1, 0).is_err());
    }

    #[test]
    fn layouts_have_expected_shape() {
        let mut rng = substream(0, &[]);
        assert_eq!(Layout::Cycle.community_edges(8, &mut rng).len(), 8);
        assert_eq!(Layout::NonCycle.community_edges(8, &mut rng).len(), 7);
        assert_eq!(Layout::Star.community_edges(8, &mut rng).len(), 7);
        assert_eq!(Layout::Caveman.community_edges(8, &mut rng).len(), 28);
        // 2 rails of 4 with 4 rungs
        assert_eq!(Layout::Ladder.community_edges(8, &mut rng).len(), 10);
        // 2x4 grid
        assert_eq!(Layout::Grid.community_edges(8, &mut rng).len(), 10);
    }

    fn graph_dataset(labels: &[usize], c: usize) -> Dataset {
        Dataset {
            name: "L".into(),
            graphs: labels
                .iter()
                .map(|&y| crate::graph::named::path(2).with_graph_label(Some(y)))
                .collect(),
            task: TaskKind::GraphLevel,
            class_count: c,
        }
    }

    #[test]
    fn folds_partition_and_balance() {
        let labels: Vec<usize> = (0..188).map(|i| usize::from(i % 3 == 0)).collect();
        let ds = graph_dataset(&labels, 2);
        let plan = make_folds(&ds, 10, 7).unwrap();
        let SplitKind::KFold(folds) = &plan.kind else { panic!() };
        let mut seen = vec![0; 188];
        for f in folds {
            assert!((18..=19).contains(&f.test.len()));
            assert_eq!(f.train.len() + f.test.len(), 188);
            for &i in &f.test {
                seen[i] += 1;
            }
            assert!(f.test.iter().any(|&i| labels[i] == 1));
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(make_folds(&ds, 10, 7).unwrap(), plan);
        let hundred = graph_dataset(&vec![0; 100], 1);
        let SplitKind::KFold(folds) = make_folds(&hundred, 10, 0).unwrap().kind else { panic!() };
        assert!(folds.iter().all(|f| f.test.len() == 10));
    }

    fn node_dataset(labels: Vec<usize>, c: usize) -> Dataset {
        let n = labels.len();
        Dataset {
            name: "N".into(),
            graphs: vec![Graph::unlabeled(n, &[]).unwrap().with_node_labels(Some(labels)).unwrap()],
            task: TaskKind::NodeLevel,
            class_count: c,
        }
    }

    #[test]
    fn node_splits_sizes_and_determinism() {
        let labels: Vec<usize> = (0..183).map(|i| i % 5).collect();
        let ds = node_dataset(labels.clone(), 5);
        let plan = make_node_splits(&ds, (0.6, 0.2, 0.2), 3).unwrap();
        let SplitKind::Masks(m) = &plan.kind else { panic!() };
        let count = |v: &[bool]| v.iter().filter(|&&b| b).count();
        assert!((109..=110).contains(&count(&m.train)));
        assert_eq!(count(&m.train) + count(&m.val) + count(&m.test), 183);
        for i in 0..183 {
            assert_eq!(u8::from(m.train[i]) + u8::from(m.val[i]) + u8::from(m.test[i]), 1);
        }
        for c in 0..5 {
            let in_class = NodeMasks::indices(&m.train).iter().filter(|&&i| labels[i] == c).count();
            assert!((21..=23).contains(&in_class), "class {c}: {in_class}");
        }
        assert_eq!(make_node_splits(&ds, (0.6, 0.2, 0.2), 3).unwrap(), plan);
        let SplitKind::Masks(all) = make_node_splits(&ds, (1.0, 0.0, 0.0), 3).unwrap().kind else { panic!() };
        assert!(all.train.iter().all(|&b| b));
        let empty = node_dataset(vec![0, 0, 2], 3);
        assert!(make_node_splits(&empty, (0.6, 0.2, 0.2), 0).is_err());
    }
}
