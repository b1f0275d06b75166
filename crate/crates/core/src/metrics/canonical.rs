//! Isomorphism-invariant keys for uniqueness counting.
//!
//! Graphs with at most [`EXACT_CANONICAL_MAX_NODES`] nodes get an exact
//! canonical form: color refinement, then a search that individualizes one
//! vertex of the first non-singleton cell at a time, keeping the smallest
//! adjacency encoding over all leaves. Vertices of a cell that are twins
//! (same edges to every other vertex) lead to identical subtrees, so only
//! one of them is tried. Larger graphs get a key built from refined colors,
//! which may merge non-isomorphic graphs.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use super::ValidityRule;
use crate::error::{invalid, Result};
use crate::graphs::Graph;

pub const EXACT_CANONICAL_MAX_NODES: usize = 12;

/// Canonical key; `exact` is false when the key is only an invariant.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CanonicalForm {
    pub exact: bool,
    pub code: Vec<u64>,
}

/// Refine `colors` to the coarsest stable partition; colors stay ranks in
/// `0..cells` ordered canonically.
fn refine(g: &Graph, colors: &mut [usize]) {
    let n = g.n_nodes();
    let mut n_cells = distinct(colors);
    loop {
        let signatures: Vec<(usize, Vec<(usize, usize)>)> = (0..n)
            .map(|v| {
                let mut s: Vec<(usize, usize)> = (0..n)
                    .filter(|&w| w != v && g.has_edge(v, w))
                    .map(|w| (g.edge(v, w), colors[w]))
                    .collect();
                s.sort_unstable();
                (colors[v], s)
            })
            .collect();
        let mut sorted: Vec<&(usize, Vec<(usize, usize)>)> = signatures.iter().collect();
        sorted.sort();
        sorted.dedup();
        for v in 0..n {
            colors[v] = sorted.binary_search(&&signatures[v]).expect("own signature present");
        }
        let now = sorted.len();
        if now == n_cells {
            return;
        }
        n_cells = now;
    }
}

fn distinct(colors: &[usize]) -> usize {
    colors.iter().collect::<HashSet<_>>().len()
}

fn initial_colors(g: &Graph) -> Vec<usize> {
    let mut labels: Vec<usize> = g.node_labels().to_vec();
    labels.sort_unstable();
    labels.dedup();
    g.node_labels()
        .iter()
        .map(|l| labels.binary_search(l).unwrap())
        .collect()
}

/// Encoding under the vertex order given by discrete `colors`.
fn encode(g: &Graph, colors: &[usize]) -> Vec<u64> {
    let n = g.n_nodes();
    let mut order = vec![0; n];
    for (v, &c) in colors.iter().enumerate() {
        order[c] = v;
    }
    let mut code = Vec::with_capacity(1 + n + n * (n - 1) / 2);
    code.push(n as u64);
    code.extend(order.iter().map(|&v| g.node_label(v) as u64));
    for i in 0..n {
        for j in i + 1..n {
            code.push(g.edge(order[i], order[j]) as u64);
        }
    }
    code
}

fn twins(g: &Graph, u: usize, v: usize) -> bool {
    (0..g.n_nodes()).all(|w| w == u || w == v || g.edge(u, w) == g.edge(v, w))
}

fn search(g: &Graph, colors: Vec<usize>, best: &mut Option<Vec<u64>>) {
    let n = g.n_nodes();
    let mut sizes = vec![0usize; n];
    for &c in &colors {
        sizes[c] += 1;
    }
    let Some(target) = (0..n).find(|&c| sizes[c] > 1) else {
        let code = encode(g, &colors);
        if best.as_ref().is_none_or(|b| code < *b) {
            *best = Some(code);
        }
        return;
    };
    let members: Vec<usize> = (0..n).filter(|&v| colors[v] == target).collect();
    let mut tried: Vec<usize> = Vec::new();
    for &v in &members {
        if tried.iter().any(|&u| twins(g, u, v)) {
            continue;
        }
        tried.push(v);
        // v keeps the cell's rank; its cell-mates and later cells move up one.
        let mut next: Vec<usize> = colors
            .iter()
            .enumerate()
            .map(|(w, &c)| {
                if c > target || (c == target && w != v) {
                    c + 1
                } else {
                    c
                }
            })
            .collect();
        refine(g, &mut next);
        search(g, next, best);
    }
}

pub fn canonical_form(g: &Graph) -> CanonicalForm {
    let mut colors = initial_colors(g);
    refine(g, &mut colors);
    if g.n_nodes() <= EXACT_CANONICAL_MAX_NODES {
        let mut best = None;
        if g.n_nodes() == 0 {
            best = Some(vec![0]);
        } else {
            search(g, colors, &mut best);
        }
        return CanonicalForm {
            exact: true,
            code: best.expect("search reaches a leaf"),
        };
    }
    // Invariant key: per refined cell, its size, label and the multiset of
    // (edge class, neighbor cell) pairs of a representative, plus the edge count.
    let n = g.n_nodes();
    let mut cells: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for v in 0..n {
        cells.entry(colors[v]).or_insert_with(|| {
            let mut sig: Vec<u64> = (0..n)
                .filter(|&w| w != v && g.has_edge(v, w))
                .map(|w| ((g.edge(v, w) as u64) << 32) | colors[w] as u64)
                .collect();
            sig.sort_unstable();
            let mut key = vec![g.node_label(v) as u64, sig.len() as u64];
            key.extend(sig);
            key
        });
    }
    let mut code = vec![n as u64, g.n_edges() as u64];
    for (c, key) in cells {
        code.push(colors.iter().filter(|&&x| x == c).count() as u64);
        code.extend(key);
        code.push(u64::MAX);
    }
    CanonicalForm { exact: false, code }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub fraction: f64,
    pub n_distinct: usize,
    pub n_samples: usize,
    /// True when some graph was keyed by invariants only.
    pub approximate: bool,
}

pub fn uniqueness(samples: &[Graph]) -> Result<UniquenessReport> {
    if samples.is_empty() {
        return Err(invalid("uniqueness of an empty sample set"));
    }
    let forms: Vec<CanonicalForm> = samples.iter().map(canonical_form).collect();
    let approximate = forms.iter().any(|f| !f.exact);
    let n_distinct = forms.into_iter().collect::<HashSet<_>>().len();
    Ok(UniquenessReport {
        fraction: n_distinct as f64 / samples.len() as f64,
        n_distinct,
        n_samples: samples.len(),
        approximate,
    })
}

/// Distinct isomorphism classes among the valid samples, over all samples.
pub fn valid_unique_fraction(samples: &[Graph], rule: ValidityRule) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("score of an empty sample set"));
    }
    let distinct: HashSet<CanonicalForm> = samples.iter().filter(|g| rule.holds(g)).map(canonical_form).collect();
    Ok(distinct.len() as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::Permutation;
    use crate::rng::from_seed;

    #[test]
    fn permuted_copies_share_a_form() {
        let g = Graph::from_edges(7, &[(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5), (5, 6), (6, 3)]).unwrap();
        let mut rng = from_seed(4);
        for _ in 0..20 {
            let p = Permutation::random(7, &mut rng);
            assert_eq!(canonical_form(&g), canonical_form(&g.permuted(&p).unwrap()));
        }
    }

    #[test]
    fn distinguishes_non_isomorphic_regular_graphs() {
        // 6-cycle versus two triangles: both 2-regular on 6 nodes.
        let c6 = Graph::from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]).unwrap();
        let tt = Graph::from_edges(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]).unwrap();
        assert_ne!(canonical_form(&c6), canonical_form(&tt));
    }

    #[test]
    fn uniqueness_examples() {
        let g = Graph::from_edges(3, &[(0, 1)]).unwrap();
        let same = vec![g.clone(); 4];
        assert_eq!(uniqueness(&same).unwrap().fraction, 0.25);
        let distinct = vec![Graph::empty(3), g, Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap()];
        assert_eq!(uniqueness(&distinct).unwrap().fraction, 1.0);
    }

    #[test]
    fn symmetric_graphs_finish_quickly() {
        assert!(canonical_form(&Graph::empty(12)).exact);
        let mut edges = Vec::new();
        for i in 0..12 {
            for j in i + 1..12 {
                edges.push((i, j));
            }
        }
        assert!(canonical_form(&Graph::from_edges(12, &edges).unwrap()).exact);
    }
}
