//! On-disk cache of extracted subgraphs.
//!
//! Line-oriented text: a magic line, `key value` header lines, then per graph
//! a `graph` line, its selected `pattern` lines, and one `node` line per node
//! listing the parent ids of its subgraph with the center first.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{MoseError, Result};
use crate::walks::{extract_graph, AnonymousWalk, GraphExtraction, WalkConfig};

const MAGIC: &str = "MOSE-SUBGRAPHS v1";

#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphCache {
    pub dataset: String,
    pub dataset_hash: String,
    pub config: WalkConfig,
    pub graphs: Vec<GraphExtraction>,
}

impl SubgraphCache {
    /// Runs pattern counting and extraction on every graph of `ds`.
    pub fn build(ds: &Dataset, config: &WalkConfig) -> Result<Self> {
        let graphs = ds
            .graphs
            .iter()
            .enumerate()
            .map(|(i, g)| extract_graph(g, config, i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(SubgraphCache {
            dataset: ds.name.clone(),
            dataset_hash: ds.content_hash(),
            config: config.clone(),
            graphs,
        })
    }

    /// True when the cache was built from this dataset with this config.
    pub fn matches(&self, ds: &Dataset, config: &WalkConfig) -> bool {
        self.dataset_hash == ds.content_hash() && &self.config == config && self.graphs.len() == ds.graphs.len()
    }

    pub fn singleton_count(&self) -> usize {
        self.graphs.iter().map(GraphExtraction::singleton_count).sum()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e| MoseError::io(path, e);
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        let c = &self.config;
        writeln!(w, "{MAGIC}").map_err(io)?;
        writeln!(w, "dataset {}", self.dataset).map_err(io)?;
        writeln!(w, "dataset_hash {}", self.dataset_hash).map_err(io)?;
        writeln!(w, "seed {}", c.seed).map_err(io)?;
        writeln!(w, "walk_length {}", c.walk_length).map_err(io)?;
        writeln!(w, "walks_per_node {}", c.walks_per_node).map_err(io)?;
        writeln!(w, "k_walk {}", c.k_walk).map_err(io)?;
        writeln!(w, "subgraph_cap {}", c.subgraph_cap).map_err(io)?;
        writeln!(w, "graphs {}", self.graphs.len()).map_err(io)?;
        for (gi, g) in self.graphs.iter().enumerate() {
            writeln!(w, "graph {gi} {} {}", g.node_sets.len(), g.patterns.len()).map_err(io)?;
            for (p, count) in &g.patterns {
                writeln!(w, "pattern {count} {p}").map_err(io)?;
            }
            for set in &g.node_sets {
                let ids: Vec<String> = set.iter().map(usize::to_string).collect();
                writeln!(w, "node {}", ids.join(" ")).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| MoseError::io(path, e))?;
        let name = path.display().to_string();
        let mut lines = BufReader::new(file).lines().enumerate();
        let mut next = || -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(MoseError::format(&name, i + 1, e.to_string())),
                None => Err(MoseError::format(&name, 0, "unexpected end of file")),
            }
        };
        let (line, magic) = next()?;
        if magic != MAGIC {
            return Err(MoseError::format(&name, line, format!("expected {MAGIC:?}")));
        }
        let mut header = |key: &str| -> Result<(usize, String)> {
            let (line, text) = next()?;
            match text.split_once(' ') {
                Some((k, v)) if k == key => Ok((line, v.to_string())),
                _ => Err(MoseError::format(&name, line, format!("expected `{key} ...`"))),
            }
        };
        let num = |(line, v): (usize, String)| -> Result<u64> {
            v.parse().map_err(|_| MoseError::format(&name, line, format!("bad number {v:?}")))
        };
        let dataset = header("dataset")?.1;
        let dataset_hash = header("dataset_hash")?.1;
        let seed = num(header("seed")?)?;
        let walk_length = num(header("walk_length")?)? as usize;
        let walks_per_node = num(header("walks_per_node")?)? as usize;
        let k_walk = num(header("k_walk")?)? as usize;
        let subgraph_cap = num(header("subgraph_cap")?)? as usize;
        let graph_count = num(header("graphs")?)? as usize;

        let mut graphs = Vec::with_capacity(graph_count);
        for gi in 0..graph_count {
            let (line, text) = next()?;
            let parts: Vec<&str> = text.split_whitespace().collect();
            let bad = |m: &str| MoseError::format(&name, line, m.to_string());
            if parts.len() != 4 || parts[0] != "graph" || parts[1] != gi.to_string() {
                return Err(bad("expected `graph <index> <nodes> <patterns>`"));
            }
            let nodes: usize = parts[2].parse().map_err(|_| bad("bad node count"))?;
            let pattern_count: usize = parts[3].parse().map_err(|_| bad("bad pattern count"))?;
            let mut patterns = Vec::with_capacity(pattern_count);
            for _ in 0..pattern_count {
                let (line, text) = next()?;
                let parts: Vec<&str> = text.split_whitespace().collect();
                let bad = |m: &str| MoseError::format(&name, line, m.to_string());
                if parts.len() != 3 || parts[0] != "pattern" {
                    return Err(bad("expected `pattern <count> <walk>`"));
                }
                let count: u64 = parts[1].parse().map_err(|_| bad("bad count"))?;
                let walk: AnonymousWalk = parts[2].parse().map_err(|_| bad("bad pattern"))?;
                patterns.push((walk, count));
            }
            let mut node_sets = Vec::with_capacity(nodes);
            for v in 0..nodes {
                let (line, text) = next()?;
                let bad = |m: &str| MoseError::format(&name, line, m.to_string());
                let rest = text.strip_prefix("node ").ok_or_else(|| bad("expected `node ...`"))?;
                let ids: Vec<usize> = rest
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("bad node id"))?;
                if ids.first() != Some(&v) || ids.iter().any(|&u| u >= nodes) {
                    return Err(bad("node record must start with its center and stay in range"));
                }
                node_sets.push(ids);
            }
            graphs.push(GraphExtraction { patterns, node_sets });
        }
        Ok(SubgraphCache {
            dataset,
            dataset_hash,
            config: WalkConfig {
                walk_length,
                walks_per_node,
                k_walk,
                subgraph_cap,
                seed,
            },
            graphs,
        })
    }

    /// Reuses the cache at `path` when it matches, otherwise rebuilds and
    /// rewrites it. The flag reports whether the file was reused.
    pub fn load_or_build(path: &Path, ds: &Dataset, config: &WalkConfig) -> Result<(Self, bool)> {
        if path.exists() {
            if let Ok(cache) = Self::read(path) {
                if cache.matches(ds, config) {
                    return Ok((cache, true));
                }
            }
        }
        let cache = Self::build(ds, config)?;
        cache.write(path)?;
        Ok((cache, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_graph_five;

    #[test]
    fn round_trip_and_reuse() {
        let ds = gen_graph_five(5, 2).unwrap();
        let cfg = WalkConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub.cache");
        let (built, reused) = SubgraphCache::load_or_build(&path, &ds, &cfg).unwrap();
        assert!(!reused);
        let back = SubgraphCache::read(&path).unwrap();
        assert_eq!(back, built);
        let (_, reused) = SubgraphCache::load_or_build(&path, &ds, &cfg).unwrap();
        assert!(reused);
        let other = WalkConfig { seed: 9, ..cfg };
        let (_, reused) = SubgraphCache::load_or_build(&path, &ds, &other).unwrap();
        assert!(!reused);
    }

    #[test]
    fn corrupt_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cache");
        fs::write(&path, "MOSE-SUBGRAPHS v0\n").unwrap();
        assert!(matches!(SubgraphCache::read(&path), Err(MoseError::Format { line: 1, .. })));
    }
}
