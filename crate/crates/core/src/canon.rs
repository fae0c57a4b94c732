//! Exact canonical forms for small colored graphs, and the exhaustive corpus
//! of non-isomorphic graphs used by the verification suites.

use std::collections::BTreeMap;

use crate::error::{MoseError, Result};
use crate::graph::Graph;

/// Largest graph the permutation search accepts.
pub const CANONICAL_CAP: usize = 8;

/// Isomorphism-invariant key of a node-colored graph. Two colored graphs get
/// equal forms iff they are color-preserving isomorphic.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CanonicalForm {
    pub colors: Vec<u64>,
    pub code: u64,
}

/// Canonical form of `g` under `colors`; `colors.len()` must equal the node
/// count. Roots are expressed by the caller through colors.
pub fn canonical_form(g: &Graph, colors: &[u64]) -> Result<CanonicalForm> {
    let n = g.node_count();
    if n > CANONICAL_CAP {
        return Err(MoseError::Resource(format!(
            "canonical form limited to {CANONICAL_CAP} nodes, got {n}"
        )));
    }
    if colors.len() != n {
        return Err(MoseError::InvalidArgument("one color per node required".into()));
    }
    let mut adj = [0u16; CANONICAL_CAP];
    for (u, row) in adj.iter_mut().enumerate().take(n) {
        for &v in g.neighbors(u) {
            *row |= 1 << v;
        }
    }

    // colour refinement yields canonically ordered cells; only labelings
    // that respect the cell order are searched
    let cells = refine_cells(g, colors);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| cells[v]);
    let mut slots: Vec<Vec<usize>> = Vec::new();
    let mut cell_of_position = Vec::with_capacity(n);
    for &v in &order {
        if slots.last().map(|s: &Vec<usize>| cells[s[0]] != cells[v]).unwrap_or(true) {
            slots.push(Vec::new());
        }
        slots.last_mut().unwrap().push(v);
        cell_of_position.push(slots.len() - 1);
    }
    let form_colors: Vec<u64> = order.iter().map(|&v| colors[v]).collect();

    let mut best = None;
    let mut labeling = vec![usize::MAX; n];
    let mut used = 0u16;
    search(&adj, &slots, &cell_of_position, 0, &mut labeling, &mut used, &mut best);
    Ok(CanonicalForm {
        colors: form_colors,
        code: best.unwrap_or(0),
    })
}

fn search(
    adj: &[u16; CANONICAL_CAP],
    slots: &[Vec<usize>],
    cell_of_position: &[usize],
    position: usize,
    labeling: &mut Vec<usize>,
    used: &mut u16,
    best: &mut Option<u64>,
) {
    let n = labeling.len();
    if position == n {
        let code = encode(adj, labeling);
        if best.map(|b| code > b).unwrap_or(true) {
            *best = Some(code);
        }
        return;
    }
    for &v in &slots[cell_of_position[position]] {
        if *used & (1 << v) != 0 {
            continue;
        }
        *used |= 1 << v;
        labeling[position] = v;
        search(adj, slots, cell_of_position, position + 1, labeling, used, best);
        *used &= !(1 << v);
    }
}

fn encode(adj: &[u16; CANONICAL_CAP], labeling: &[usize]) -> u64 {
    let n = labeling.len();
    let mut code = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            code <<= 1;
            if adj[labeling[i]] & (1 << labeling[j]) != 0 {
                code |= 1;
            }
        }
    }
    code
}

/// Stable colour refinement with canonical (rank-based) cell numbering.
fn refine_cells(g: &Graph, colors: &[u64]) -> Vec<usize> {
    let n = g.node_count();
    let mut cells = rank(colors);
    loop {
        let signatures: Vec<(usize, Vec<usize>)> = (0..n)
            .map(|v| {
                let mut neigh: Vec<usize> = g.neighbors(v).iter().map(|&u| cells[u]).collect();
                neigh.sort_unstable();
                (cells[v], neigh)
            })
            .collect();
        let next = rank(&signatures);
        let count = |c: &[usize]| c.iter().max().map(|m| m + 1).unwrap_or(0);
        if count(&next) == count(&cells) {
            return next;
        }
        cells = next;
    }
}

fn rank<T: Ord + Clone>(values: &[T]) -> Vec<usize> {
    let mut distinct: Vec<T> = values.to_vec();
    distinct.sort();
    distinct.dedup();
    values
        .iter()
        .map(|v| distinct.binary_search(v).expect("value present"))
        .collect()
}

/// True iff the two graphs are isomorphic (both within the canonical cap).
pub fn isomorphic(a: &Graph, b: &Graph) -> Result<bool> {
    if a.node_count() != b.node_count() || a.edge_count() != b.edge_count() {
        return Ok(false);
    }
    Ok(canonical_form(a, &vec![0; a.node_count()])? == canonical_form(b, &vec![0; b.node_count()])?)
}

/// True iff `(a, ra)` and `(b, rb)` are isomorphic as rooted graphs.
pub fn rooted_isomorphic(a: &Graph, ra: usize, b: &Graph, rb: usize) -> Result<bool> {
    if a.node_count() != b.node_count() || a.edge_count() != b.edge_count() {
        return Ok(false);
    }
    let colors = |n: usize, r: usize| (0..n).map(|v| u64::from(v == r)).collect::<Vec<_>>();
    Ok(canonical_form(a, &colors(a.node_count(), ra))? == canonical_form(b, &colors(b.node_count(), rb))?)
}

/// All pairwise non-isomorphic simple graphs with exactly `n` nodes, ordered
/// by canonical form.
pub fn graphs_with_nodes(n: usize) -> Result<Vec<Graph>> {
    if n > 7 {
        return Err(MoseError::Resource(format!("exhaustive enumeration limited to 7 nodes, got {n}")));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
    let mut seen: BTreeMap<CanonicalForm, Graph> = BTreeMap::new();
    for mask in 0u64..(1u64 << pairs.len()) {
        let edges: Vec<_> = pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &e)| e)
            .collect();
        let g = Graph::unlabeled(n, &edges)?;
        let form = canonical_form(&g, &vec![0; n])?;
        seen.entry(form).or_insert(g);
    }
    Ok(seen.into_values().collect())
}

/// All non-isomorphic graphs with 1..=max_nodes nodes.
pub fn graph_corpus(max_nodes: usize) -> Result<Vec<Graph>> {
    let mut out = Vec::new();
    for n in 1..=max_nodes {
        out.extend(graphs_with_nodes(n)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::named::*;

    #[test]
    fn counts_match_known_sequence() {
        // number of unlabeled graphs on n nodes
        let expected = [1, 2, 4, 11, 34, 156];
        for (i, &count) in expected.iter().enumerate() {
            assert_eq!(graphs_with_nodes(i + 1).unwrap().len(), count, "n = {}", i + 1);
        }
    }

    #[test]
    fn permuted_graphs_share_form() {
        let g = Graph::unlabeled(6, &[(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5)]).unwrap();
        let h = g.permute(&[3, 5, 0, 1, 4, 2]).unwrap();
        assert!(isomorphic(&g, &h).unwrap());
        assert!(!isomorphic(&cycle(6), &disjoint_copies(&cycle(3), 2)).unwrap());
    }

    #[test]
    fn roots_matter() {
        let p = path(3);
        assert!(!rooted_isomorphic(&p, 0, &p, 1).unwrap());
        assert!(rooted_isomorphic(&p, 0, &p, 2).unwrap());
    }

    #[test]
    fn cap_enforced() {
        assert!(matches!(canonical_form(&path(9), &[0; 9]), Err(MoseError::Resource(_))));
    }
}
