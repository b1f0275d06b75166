//! Categorical graphs.
//!
//! Every node is a categorical variable with `node_classes` classes and every
//! unordered node pair is a categorical variable with `edge_classes` classes,
//! where class 0 means the edge is absent.

pub mod generators;
pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::paths::{CategoricalSpace, FiniteDataset};

pub use generators::{gen_categorical_table, gen_community_small, gen_grid, CommunityParams, GridParams};

/// Edge class meaning "no edge".
pub const ABSENT: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Graph {
    n_nodes: usize,
    node_labels: Vec<usize>,
    /// Row-major `n x n`, symmetric, diagonal absent.
    edge_labels: Vec<usize>,
}

impl Graph {
    /// Graph with all nodes labelled 0 and no edges.
    pub fn empty(n_nodes: usize) -> Self {
        Self {
            n_nodes,
            node_labels: vec![0; n_nodes],
            edge_labels: vec![ABSENT; n_nodes * n_nodes],
        }
    }

    pub fn new(node_labels: Vec<usize>, edge_labels: Vec<usize>) -> Result<Self> {
        let n = node_labels.len();
        if edge_labels.len() != n * n {
            return Err(invalid(format!("{} edge labels for {n} nodes", edge_labels.len())));
        }
        for i in 0..n {
            if edge_labels[i * n + i] != ABSENT {
                return Err(invalid(format!("self-loop at node {i}")));
            }
            for j in i + 1..n {
                if edge_labels[i * n + j] != edge_labels[j * n + i] {
                    return Err(invalid(format!("edge labels not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self {
            n_nodes: n,
            node_labels,
            edge_labels,
        })
    }

    /// Single-class undirected graph from an edge list.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(n_nodes);
        for &(i, j) in edges {
            g.set_edge(i, j, 1)?;
        }
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn node_labels(&self) -> &[usize] {
        &self.node_labels
    }

    pub fn node_label(&self, i: usize) -> usize {
        self.node_labels[i]
    }

    pub fn set_node_label(&mut self, i: usize, label: usize) {
        self.node_labels[i] = label;
    }

    pub fn edge(&self, i: usize, j: usize) -> usize {
        self.edge_labels[i * self.n_nodes + j]
    }

    pub fn set_edge(&mut self, i: usize, j: usize, class: usize) -> Result<()> {
        let n = self.n_nodes;
        if i >= n || j >= n {
            return Err(invalid(format!("edge ({i}, {j}) out of range for {n} nodes")));
        }
        if i == j && class != ABSENT {
            return Err(invalid(format!("self-loop at node {i}")));
        }
        self.edge_labels[i * n + j] = class;
        self.edge_labels[j * n + i] = class;
        Ok(())
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edge(i, j) != ABSENT
    }

    /// `(i, j, class)` for every present edge with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, usize)> {
        let n = self.n_nodes;
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let c = self.edge(i, j);
                if c != ABSENT {
                    out.push((i, j, c));
                }
            }
        }
        out
    }

    pub fn n_edges(&self) -> usize {
        self.edge_labels.iter().filter(|&&c| c != ABSENT).count() / 2
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_nodes).filter(move |&j| self.has_edge(i, j))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n_nodes).map(|i| self.degree(i)).collect()
    }

    pub fn max_node_label(&self) -> Option<usize> {
        self.node_labels.iter().copied().max()
    }

    pub fn max_edge_label(&self) -> usize {
        self.edge_labels.iter().copied().max().unwrap_or(ABSENT)
    }

    /// Check label ranges against `node_classes` and `edge_classes` (absent included).
    pub fn check_classes(&self, node_classes: usize, edge_classes: usize) -> Result<()> {
        if let Some(l) = self.node_labels.iter().find(|&&l| l >= node_classes) {
            return Err(invalid(format!("node label {l} >= {node_classes} classes")));
        }
        if let Some(c) = self.edge_labels.iter().find(|&&c| c >= edge_classes) {
            return Err(invalid(format!("edge class {c} >= {edge_classes} classes")));
        }
        Ok(())
    }

    pub fn is_connected(&self) -> bool {
        if self.n_nodes == 0 {
            return true;
        }
        self.components().iter().filter(|&&c| c == 0).count() == self.n_nodes
    }

    /// Component id per node, ids numbered by first appearance.
    pub fn components(&self) -> Vec<usize> {
        let n = self.n_nodes;
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            let mut stack = vec![s];
            comp[s] = next;
            while let Some(v) = stack.pop() {
                for w in self.neighbors(v) {
                    if comp[w] == usize::MAX {
                        comp[w] = next;
                        stack.push(w);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn permuted(&self, p: &Permutation) -> Result<Graph> {
        let n = self.n_nodes;
        if p.len() != n {
            return Err(invalid(format!("permutation of {} for {n} nodes", p.len())));
        }
        let m = p.mapping();
        let node_labels = (0..n).map(|i| self.node_labels[m[i]]).collect();
        let mut edge_labels = vec![ABSENT; n * n];
        for i in 0..n {
            for j in 0..n {
                edge_labels[i * n + j] = self.edge(m[i], m[j]);
            }
        }
        Ok(Graph {
            n_nodes: n,
            node_labels,
            edge_labels,
        })
    }
}

/// Bijection on node indices; as a matrix `P[i, mapping[i]] = 1`, so
/// `(P H)[i] = H[mapping[i]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || std::mem::replace(&mut seen[m], true) {
                return Err(invalid(format!("{mapping:?} is not a bijection")));
            }
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn random(n: usize, rng: &mut impl rand::Rng) -> Self {
        use rand::seq::SliceRandom;
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Self { mapping }
    }

    /// Every permutation of `n` elements in lexicographic order.
    pub fn all(n: usize) -> Vec<Permutation> {
        fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Permutation>) {
            if prefix.len() == used.len() {
                out.push(Permutation {
                    mapping: prefix.clone(),
                });
                return;
            }
            for i in 0..used.len() {
                if !used[i] {
                    used[i] = true;
                    prefix.push(i);
                    rec(prefix, used, out);
                    prefix.pop();
                    used[i] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
        out
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }
}

/// One-hot node matrix and edge tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotGraph {
    pub n_nodes: usize,
    pub node_classes: usize,
    pub edge_classes: usize,
    /// `[n, node_classes]`
    pub hn: Vec<f64>,
    /// `[n, n, edge_classes]`
    pub he: Vec<f64>,
}

impl OneHotGraph {
    pub fn node(&self, i: usize) -> &[f64] {
        &self.hn[i * self.node_classes..(i + 1) * self.node_classes]
    }

    pub fn edge(&self, i: usize, j: usize) -> &[f64] {
        let k = self.edge_classes;
        let at = (i * self.n_nodes + j) * k;
        &self.he[at..at + k]
    }
}

pub fn encode(g: &Graph, node_classes: usize, edge_classes: usize) -> Result<OneHotGraph> {
    g.check_classes(node_classes, edge_classes)?;
    let n = g.n_nodes();
    let mut hn = vec![0.0; n * node_classes];
    for (i, &l) in g.node_labels().iter().enumerate() {
        hn[i * node_classes + l] = 1.0;
    }
    let mut he = vec![0.0; n * n * edge_classes];
    for i in 0..n {
        for j in 0..n {
            he[(i * n + j) * edge_classes + g.edge(i, j)] = 1.0;
        }
    }
    Ok(OneHotGraph {
        n_nodes: n,
        node_classes,
        edge_classes,
        hn,
        he,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

/// Per-block argmax; edge blocks `(i, j)` and `(j, i)` are averaged first and
/// the diagonal is forced absent.
pub fn decode(oh: &OneHotGraph) -> Result<Graph> {
    if oh.hn.iter().chain(&oh.he).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("graph state".into()));
    }
    let n = oh.n_nodes;
    let node_labels = (0..n).map(|i| argmax(oh.node(i))).collect();
    let mut g = Graph {
        n_nodes: n,
        node_labels,
        edge_labels: vec![ABSENT; n * n],
    };
    let mut avg = vec![0.0; oh.edge_classes];
    for i in 0..n {
        for j in i + 1..n {
            for (k, a) in avg.iter_mut().enumerate() {
                *a = 0.5 * (oh.edge(i, j)[k] + oh.edge(j, i)[k]);
            }
            g.set_edge(i, j, argmax(&avg))?;
        }
    }
    Ok(g)
}

/// `P Hn` and `P He Pᵀ`.
pub fn apply_permutation(oh: &OneHotGraph, p: &Permutation) -> Result<OneHotGraph> {
    let n = oh.n_nodes;
    if p.len() != n {
        return Err(invalid(format!("permutation of {} for {n} nodes", p.len())));
    }
    let m = p.mapping();
    let (kv, ke) = (oh.node_classes, oh.edge_classes);
    let mut hn = Vec::with_capacity(oh.hn.len());
    for &mi in m {
        hn.extend_from_slice(oh.node(mi));
    }
    let mut he = Vec::with_capacity(oh.he.len());
    for &mi in m {
        for &mj in m {
            he.extend_from_slice(oh.edge(mi, mj));
        }
    }
    Ok(OneHotGraph {
        n_nodes: n,
        node_classes: kv,
        edge_classes: ke,
        hn,
        he,
    })
}

/// Flat state layout of (possibly padded) graphs with `n_nodes` slots.
///
/// Node blocks come first and are omitted when `node_classes == 1`; then one
/// block per ordered pair `(i, j)`. Pairs `(i, j)` and `(j, i)` always carry
/// the same values; the diagonal and padded slots stay zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphLayout {
    pub n_nodes: usize,
    pub node_classes: usize,
    pub edge_classes: usize,
}

impl GraphLayout {
    pub fn new(n_nodes: usize, node_classes: usize, edge_classes: usize) -> Result<Self> {
        if n_nodes == 0 || node_classes == 0 || edge_classes < 2 {
            return Err(invalid(format!(
                "graph layout needs nodes >= 1, node classes >= 1, edge classes >= 2; got {n_nodes}, {node_classes}, {edge_classes}"
            )));
        }
        Ok(Self {
            n_nodes,
            node_classes,
            edge_classes,
        })
    }

    /// Node classes carried in the state (0 when nodes are unlabeled).
    pub fn node_dim(&self) -> usize {
        if self.node_classes >= 2 {
            self.node_classes
        } else {
            0
        }
    }

    pub fn node_part(&self) -> usize {
        self.n_nodes * self.node_dim()
    }

    pub fn dim(&self) -> usize {
        self.node_part() + self.n_nodes * self.n_nodes * self.edge_classes
    }

    pub fn edge_offset(&self, i: usize, j: usize) -> usize {
        self.node_part() + (i * self.n_nodes + j) * self.edge_classes
    }

    pub fn segments(&self) -> Vec<usize> {
        let mut s = vec![self.node_dim(); if self.node_dim() > 0 { self.n_nodes } else { 0 }];
        s.extend(std::iter::repeat_n(self.edge_classes, self.n_nodes * self.n_nodes));
        s
    }

    /// 1 on coordinates that evolve for a graph with `count` real nodes.
    pub fn state_mask(&self, count: usize) -> Vec<f64> {
        self.mask(count, false)
    }

    /// 1 on coordinates that enter the loss: real nodes and pairs `i < j`.
    pub fn loss_mask(&self, count: usize) -> Vec<f64> {
        self.mask(count, true)
    }

    fn mask(&self, count: usize, upper_only: bool) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        let kv = self.node_dim();
        m[..count * kv].iter_mut().for_each(|v| *v = 1.0);
        for i in 0..count {
            for j in 0..count {
                if i == j || (upper_only && j < i) {
                    continue;
                }
                let at = self.edge_offset(i, j);
                m[at..at + self.edge_classes].iter_mut().for_each(|v| *v = 1.0);
            }
        }
        m
    }

    /// Flat one-hot state of `g` padded to this layout.
    pub fn embed(&self, g: &Graph) -> Result<Vec<f64>> {
        let n = g.n_nodes();
        if n > self.n_nodes {
            return Err(invalid(format!(
                "graph with {n} nodes exceeds layout of {}",
                self.n_nodes
            )));
        }
        g.check_classes(self.node_classes, self.edge_classes)?;
        let mut x = vec![0.0; self.dim()];
        let kv = self.node_dim();
        if kv > 0 {
            for (i, &l) in g.node_labels().iter().enumerate() {
                x[i * kv + l] = 1.0;
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    x[self.edge_offset(i, j) + g.edge(i, j)] = 1.0;
                }
            }
        }
        Ok(x)
    }

    /// One-hot view of the first `count` nodes of a flat state.
    pub fn to_one_hot(&self, x: &[f64], count: usize) -> Result<OneHotGraph> {
        if x.len() != self.dim() || count > self.n_nodes {
            return Err(invalid(format!(
                "state of length {} does not fit layout {self:?}",
                x.len()
            )));
        }
        let kv = self.node_dim().max(1);
        let mut hn = vec![0.0; count * kv];
        if self.node_dim() > 0 {
            hn.copy_from_slice(&x[..count * kv]);
        } else {
            hn.iter_mut().for_each(|v| *v = 1.0);
        }
        let k = self.edge_classes;
        let mut he = vec![0.0; count * count * k];
        for i in 0..count {
            for j in 0..count {
                let dst = (i * count + j) * k;
                if i == j {
                    he[dst + ABSENT] = 1.0;
                } else {
                    let src = self.edge_offset(i, j);
                    he[dst..dst + k].copy_from_slice(&x[src..src + k]);
                }
            }
        }
        Ok(OneHotGraph {
            n_nodes: count,
            node_classes: kv,
            edge_classes: k,
            hn,
            he,
        })
    }

    /// Decode the first `count` nodes of a flat state.
    pub fn decode_state(&self, x: &[f64], count: usize) -> Result<Graph> {
        decode(&self.to_one_hot(x, count)?)
    }

    /// Relabel nodes of a flat state with `count` real nodes.
    pub fn permute_state(&self, x: &[f64], count: usize, p: &Permutation) -> Result<Vec<f64>> {
        if p.len() != count || x.len() != self.dim() {
            return Err(invalid("permutation or state does not fit the layout"));
        }
        let m = p.mapping();
        let mut out = x.to_vec();
        let kv = self.node_dim();
        for i in 0..count {
            out[i * kv..(i + 1) * kv].copy_from_slice(&x[m[i] * kv..(m[i] + 1) * kv]);
        }
        let k = self.edge_classes;
        for i in 0..count {
            for j in 0..count {
                let dst = self.edge_offset(i, j);
                let src = self.edge_offset(m[i], m[j]);
                out[dst..dst + k].copy_from_slice(&x[src..src + k]);
            }
        }
        Ok(out)
    }

    /// Standard-normal noise on the evolving coordinates, mirrored across
    /// the diagonal so each unordered pair gets one draw per class.
    pub fn noise(&self, count: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
        use rand_distr::StandardNormal;
        let mut x = vec![0.0; self.dim()];
        let kv = self.node_dim();
        for v in x[..count * kv].iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let k = self.edge_classes;
        for i in 0..count {
            for j in i + 1..count {
                let (a, b) = (self.edge_offset(i, j), self.edge_offset(j, i));
                for c in 0..k {
                    let z: f64 = rng.sample(StandardNormal);
                    x[a + c] = z;
                    x[b + c] = z;
                }
            }
        }
        x
    }
}

/// Dataset of edgeless records whose node labels each hold one row of a
/// categorical table.
pub fn table_dataset(graphs: &[Graph], space: &CategoricalSpace) -> Result<FiniteDataset> {
    let labels = graphs
        .iter()
        .map(|g| {
            space.check_labels(g.node_labels())?;
            Ok(g.node_labels().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    FiniteDataset::uniform(space.clone(), labels)
}

/// Edgeless record holding one categorical row as node labels.
pub fn table_record(labels: &[usize]) -> Graph {
    let mut g = Graph::empty(labels.len());
    g.node_labels.copy_from_slice(labels);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    fn triangle() -> Graph {
        Graph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap()
    }

    #[test]
    fn new_rejects_asymmetric_and_self_loops() {
        assert!(Graph::new(vec![0, 0], vec![0, 1, 0, 0]).is_err());
        assert!(Graph::new(vec![0, 0], vec![1, 0, 0, 0]).is_err());
        assert!(Graph::new(vec![0, 0], vec![0, 2, 2, 0]).is_ok());
    }

    #[test]
    fn triangle_round_trips() {
        let g = triangle();
        let oh = encode(&g, 1, 2).unwrap();
        assert_eq!(decode(&oh).unwrap(), g);
        assert_eq!(oh.edge(1, 1), &[1.0, 0.0]);
    }

    #[test]
    fn decode_of_perturbed_one_hot_is_stable() {
        use rand::Rng;
        let mut g = Graph::from_edges(5, &[(0, 1), (1, 2), (3, 4), (0, 4)]).unwrap();
        g.set_edge(1, 3, 2).unwrap();
        g.set_node_label(2, 1);
        let oh = encode(&g, 2, 3).unwrap();
        let mut rng = from_seed(11);
        let mut noisy = oh.clone();
        for v in noisy.hn.iter_mut().chain(noisy.he.iter_mut()) {
            *v += rng.random_range(-0.3..0.3);
        }
        // Any perturbation below 0.5 in magnitude keeps every argmax margin
        // positive: a one-hot block has margin 1 and the worst case moves the
        // hot entry down and another up by 0.3 each.
        let margin = 1.0 - 2.0 * 0.3;
        assert!(margin > 0.0);
        assert_eq!(decode(&noisy).unwrap(), decode(&oh).unwrap());
    }

    #[test]
    fn permutation_identity_and_inverse() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let oh = encode(&g, 1, 2).unwrap();
        assert_eq!(apply_permutation(&oh, &Permutation::identity(4)).unwrap(), oh);
        let p = Permutation::new(vec![2, 0, 3, 1]).unwrap();
        let moved = apply_permutation(&oh, &p).unwrap();
        assert_eq!(apply_permutation(&moved, &p.inverse()).unwrap(), oh);
        let mut d1 = g.degrees();
        let mut d2 = decode(&moved).unwrap().degrees();
        d1.sort_unstable();
        d2.sort_unstable();
        assert_eq!(d1, d2);
        assert_eq!(decode(&moved).unwrap(), g.permuted(&p).unwrap());
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
    }

    #[test]
    fn all_permutations_counts() {
        assert_eq!(Permutation::all(3).len(), 6);
        assert_eq!(Permutation::all(4).len(), 24);
    }

    #[test]
    fn layout_embed_decode_roundtrip_with_padding() {
        let mut g = triangle();
        g.set_node_label(1, 2);
        let layout = GraphLayout::new(5, 3, 2).unwrap();
        let x = layout.embed(&g).unwrap();
        assert_eq!(x.len(), 5 * 3 + 25 * 2);
        assert_eq!(layout.decode_state(&x, 3).unwrap(), g);
        let loss = layout.loss_mask(3);
        // 3 node blocks + 3 unordered pairs
        assert_eq!(loss.iter().sum::<f64>(), (3 * 3 + 3 * 2) as f64);
        let state = layout.state_mask(3);
        assert_eq!(state.iter().sum::<f64>(), (3 * 3 + 6 * 2) as f64);
    }

    #[test]
    fn unlabeled_nodes_are_not_in_state() {
        let layout = GraphLayout::new(4, 1, 2).unwrap();
        assert_eq!(layout.node_dim(), 0);
        assert_eq!(layout.dim(), 32);
        assert_eq!(layout.segments().len(), 16);
    }

    #[test]
    fn noise_is_mirrored_and_masked() {
        let layout = GraphLayout::new(4, 2, 3).unwrap();
        let x = layout.noise(3, &mut from_seed(2));
        for i in 0..4 {
            for j in 0..4 {
                let (a, b) = (layout.edge_offset(i, j), layout.edge_offset(j, i));
                assert_eq!(x[a..a + 3], x[b..b + 3]);
                if i == j || i == 3 || j == 3 {
                    assert!(x[a..a + 3].iter().all(|v| *v == 0.0));
                }
            }
        }
        assert!(x[6..8].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn permute_state_matches_graph_permutation() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)]).unwrap();
        let layout = GraphLayout::new(4, 1, 2).unwrap();
        let p = Permutation::new(vec![3, 1, 0, 2]).unwrap();
        let moved = layout.permute_state(&layout.embed(&g).unwrap(), 4, &p).unwrap();
        assert_eq!(layout.decode_state(&moved, 4).unwrap(), g.permuted(&p).unwrap());
    }
}
