//! Permutation-equivariant graph transformer.
//!
//! Node features `X [B, n, dn]`, edge features `E [B, n, n, de]` and global
//! features `y [B, dg]` are updated jointly. Per layer:
//!
//! 1. `Q, K, V = X Wq, X Wk, X Wv`; pair scores `Y_ij = Q_i ⊙ K_j / sqrt(dn)`.
//! 2. Edge modulation `Y <- Y ⊙ (E W1 + 1) + E W2`.
//! 3. New edges `E' = norm(E + FiLM(y, Y Weo) Wo)`.
//! 4. Per-head attention over `j` from the channel sums of `Y`, applied to
//!    `V`; node update `FiLM(y, .)`, residual, normalization and FFN.
//! 5. `y' = norm(y + (y Wy + PNA(X') + PNA(E')) Wo)` followed by an FFN
//!    (skipped in the last layer, whose global output would be unused).
//!
//! All batch members share one node count; there is no padding.

use rand::Rng;

use super::layers::{film, pna, time_embedding, Init, Linear};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::graphs::{GraphLayout, ABSENT};
use crate::numerics::{ParamSet, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
struct GlobalUpdate {
    self_map: Linear,
    pool_nodes: usize,
    pool_edges: usize,
    out: Linear,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    edge_mul: Linear,
    edge_add: Linear,
    edge_new: Linear,
    edge_film: (usize, usize),
    edge_out: Linear,
    node_film: (usize, usize),
    node_out: Linear,
    node_ff1: Linear,
    node_ff2: Linear,
    global: Option<GlobalUpdate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphTransformer {
    pub params: ParamSet,
    cfg: ModelConfig,
    node_classes: usize,
    edge_classes: usize,
    node_in: Linear,
    edge_in: Linear,
    global_in: Linear,
    layers: Vec<Layer>,
    node_head: Option<Linear>,
    edge_head: Linear,
    pair_head: Linear,
}

fn weight(params: &mut ParamSet, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> usize {
    Linear::new(params, name, rows, cols, false, Init::FanIn, rng).weight
}

impl GraphTransformer {
    pub fn new(cfg: &ModelConfig, node_classes: usize, edge_classes: usize, rng: &mut impl Rng) -> Self {
        let (dn, de, dg) = (cfg.hidden_node, cfg.hidden_edge, cfg.hidden_global);
        let node_dim = if node_classes >= 2 { node_classes } else { 0 };
        let mut ps = ParamSet::new();
        let p = &mut ps;
        let node_in = Linear::new(p, "input.node", node_dim + 3, dn, true, Init::FanIn, rng);
        let edge_in = Linear::new(p, "input.edge", edge_classes + 2, de, true, Init::FanIn, rng);
        let global_in = Linear::new(
            p,
            "input.global",
            cfg.time_embedding_dim + 3,
            dg,
            true,
            Init::FanIn,
            rng,
        );
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let name = |s: &str| format!("layer{l}.{s}");
            let lin =
                |p: &mut ParamSet, s: &str, a, b, rng: &mut _| Linear::new(p, &name(s), a, b, true, Init::FanIn, rng);
            let q = lin(p, "q", dn, dn, rng);
            let k = lin(p, "k", dn, dn, rng);
            let v = lin(p, "v", dn, dn, rng);
            let edge_mul = lin(p, "edge_mul", de, dn, rng);
            let edge_add = lin(p, "edge_add", de, dn, rng);
            let edge_new = lin(p, "edge_new", dn, de, rng);
            let edge_film = (
                weight(p, &name("edge_film_shift"), dg, de, rng),
                weight(p, &name("edge_film_scale"), dg, de, rng),
            );
            let edge_out = lin(p, "edge_out", de, de, rng);
            let node_film = (
                weight(p, &name("node_film_shift"), dg, dn, rng),
                weight(p, &name("node_film_scale"), dg, dn, rng),
            );
            let node_out = lin(p, "node_out", dn, dn, rng);
            let node_ff1 = lin(p, "node_ff1", dn, 2 * dn, rng);
            let node_ff2 = lin(p, "node_ff2", 2 * dn, dn, rng);
            let global = (l + 1 < cfg.n_layers).then(|| GlobalUpdate {
                self_map: lin(p, "global_self", dg, dg, rng),
                pool_nodes: weight(p, &name("pna_nodes"), 4 * dn, dg, rng),
                pool_edges: weight(p, &name("pna_edges"), 4 * de, dg, rng),
                out: lin(p, "global_out", dg, dg, rng),
                ff1: lin(p, "global_ff1", dg, 2 * dg, rng),
                ff2: lin(p, "global_ff2", 2 * dg, dg, rng),
            });
            layers.push(Layer {
                q,
                k,
                v,
                edge_mul,
                edge_add,
                edge_new,
                edge_film,
                edge_out,
                node_film,
                node_out,
                node_ff1,
                node_ff2,
                global,
            });
        }
        let node_head = (node_dim > 0).then(|| Linear::new(p, "head.node", dn, node_dim, true, Init::Zero, rng));
        let edge_head = Linear::new(p, "head.edge", de, edge_classes, true, Init::Zero, rng);
        let pair_head = Linear::new(p, "head.pair", dn, edge_classes, false, Init::Zero, rng);
        Self {
            params: ps,
            cfg: cfg.clone(),
            node_classes,
            edge_classes,
            node_in,
            edge_in,
            global_in,
            layers,
            node_head,
            edge_head,
            pair_head,
        }
    }

    pub fn layout(&self, n_nodes: usize) -> Result<GraphLayout> {
        GraphLayout::new(n_nodes, self.node_classes, self.edge_classes)
    }

    /// Input features from flat states. Nodes: class blocks, degree,
    /// triangle count and the size of the node's connected component. Edges:
    /// class blocks, common-neighbour count and whether the pair shares a
    /// component. Global: `[time embedding, n,
    /// mean degree, number of components]`. Everything is read off the argmax
    /// adjacency; sizes and counts other than the component count are divided
    /// by `size_scale`.
    /// Attention alone cannot count shared neighbours of a pair, which is
    /// what separates dense communities from the bridges between them.
    fn inputs(&self, layout: &GraphLayout, x: &Tensor, t: &[f64]) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, n) = (t.len(), layout.n_nodes);
        let (kv, ke) = (layout.node_dim(), layout.edge_classes);
        let scale = self.cfg.size_scale;
        let mut nodes = Vec::with_capacity(b * n * (kv + 3));
        let mut edges = Vec::with_capacity(b * n * n * (ke + 2));
        let mut global = Vec::with_capacity(b * 3);
        let mut adj = vec![false; n * n];
        for row in x.data().chunks(layout.dim()) {
            for i in 0..n {
                for j in 0..n {
                    let at = layout.edge_offset(i, j);
                    adj[i * n + j] = i != j && argmax(&row[at..at + ke]) != ABSENT;
                }
            }
            let (component, sizes) = components(&adj, n);
            let common = |i: usize, j: usize| (0..n).filter(|&k| adj[i * n + k] && adj[k * n + j]).count();
            let mut total_degree = 0.0;
            for i in 0..n {
                nodes.extend_from_slice(&row[i * kv..(i + 1) * kv]);
                let mut degree = 0usize;
                let mut paired = 0usize;
                for j in 0..n {
                    let at = layout.edge_offset(i, j);
                    edges.extend_from_slice(&row[at..at + ke]);
                    let c = if i == j { 0 } else { common(i, j) };
                    edges.push(c as f64 / scale);
                    edges.push(if component[i] == component[j] { 1.0 } else { 0.0 });
                    if adj[i * n + j] {
                        degree += 1;
                        paired += c;
                    }
                }
                nodes.push(degree as f64 / scale);
                // Each triangle through i is seen from both of its other corners.
                nodes.push((paired / 2) as f64 / scale);
                nodes.push(sizes[component[i]] as f64 / scale);
                total_degree += degree as f64;
            }
            global.push(n as f64 / scale);
            global.push(total_degree / n as f64 / scale);
            global.push(sizes.len() as f64);
        }
        let temb = time_embedding(t, self.cfg.time_embedding_dim)?;
        let te = self.cfg.time_embedding_dim;
        let mut g = Vec::with_capacity(b * (te + 3));
        for (e, extra) in temb.data().chunks(te).zip(global.chunks(3)) {
            g.extend_from_slice(e);
            g.extend_from_slice(extra);
        }
        Ok((
            Tensor::new(vec![b, n, kv + 3], nodes)?,
            Tensor::new(vec![b, n, n, ke + 2], edges)?,
            Tensor::new(vec![b, te + 3], g)?,
        ))
    }

    /// Raw outputs `[B, dim]` in the flat layout for `n`-node states `x`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        layout: &GraphLayout,
        x: &Tensor,
        t: &[f64],
    ) -> Result<Var<'t>> {
        let (b, n) = (t.len(), layout.n_nodes);
        if x.rank() != 2 || x.shape()[0] != b || x.shape()[1] != layout.dim() {
            return Err(Error::ShapeMismatch {
                op: "graph transformer",
                lhs: x.shape().to_vec(),
                rhs: vec![b, layout.dim()],
            });
        }
        if layout.node_classes != self.node_classes || layout.edge_classes != self.edge_classes {
            return Err(crate::error::invalid("layout classes differ from the model's"));
        }
        let (nodes, edges, global) = self.inputs(layout, x, t)?;
        let mut hx = self.node_in.apply(p, tape.constant(nodes))?.silu();
        let mut he = self.edge_in.apply(p, tape.constant(edges))?.silu();
        let mut hy = self.global_in.apply(p, tape.constant(global))?.silu();
        for (l, layer) in self.layers.iter().enumerate() {
            (hx, he, hy) = self.layer(tape, p, layer, hx, he, hy, n)?;
            for (what, v) in [("node", hx), ("edge", he), ("global", hy)] {
                if !v.value().is_finite() {
                    return Err(Error::NonFinite(format!("{what} features after layer {l}")));
                }
            }
        }
        let kv = layout.node_dim();
        let xi = hx.repeat_axis(2, n)?;
        let xj = hx.repeat_axis(1, n)?;
        let edge_logits = self
            .edge_head
            .apply(p, he)?
            .add(self.pair_head.apply(p, xi.mul(xj)?)?)?;
        let edge_logits = edge_logits
            .add(edge_logits.permute(&[0, 2, 1, 3])?)?
            .scale(0.5)
            .reshape(&[b, n * n * self.edge_classes])?;
        match &self.node_head {
            Some(head) => {
                let node_logits = head.apply(p, hx)?.reshape(&[b, n * kv])?;
                tape.concat(&[node_logits, edge_logits], 1)
            }
            None => Ok(edge_logits),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        layer: &Layer,
        hx: Var<'t>,
        he: Var<'t>,
        hy: Var<'t>,
        n: usize,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let cfg = &self.cfg;
        let b = hy.shape()[0];
        let (heads, dn) = (cfg.n_heads, cfg.hidden_node);
        let q = layer.q.apply(p, hx)?;
        let k = layer.k.apply(p, hx)?;
        let v = layer.v.apply(p, hx)?;
        let pair = q
            .repeat_axis(2, n)?
            .mul(k.repeat_axis(1, n)?)?
            .scale(1.0 / (dn as f64).sqrt());
        let e_mul = layer.edge_mul.apply(p, he)?;
        let e_add = layer.edge_add.apply(p, he)?;
        let pair = pair.add(pair.mul(e_mul)?)?.add(e_add)?;

        let e_new = layer.edge_new.apply(p, pair)?;
        let e_new = film(hy, e_new, p[layer.edge_film.0], p[layer.edge_film.1])?;
        let he_next = he.add(layer.edge_out.apply(p, e_new)?)?.normalize_last(NORM_EPS)?;

        let scores = pair
            .reshape(&[b, n, n, heads, dn / heads])?
            .sum_axis(4)?
            .permute(&[0, 3, 1, 2])?
            .softmax()?;
        let values = v.reshape(&[b, n, heads, dn / heads])?.permute(&[0, 2, 1, 3])?;
        let attended = scores.matmul(values)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, dn])?;
        let attended = film(hy, attended, p[layer.node_film.0], p[layer.node_film.1])?;
        let hx_mid = hx.add(layer.node_out.apply(p, attended)?)?.normalize_last(NORM_EPS)?;
        let ff = layer.node_ff2.apply(p, layer.node_ff1.apply(p, hx_mid)?.silu())?;
        let hx_next = hx_mid.add(ff)?.normalize_last(NORM_EPS)?;

        let hy_next = match &layer.global {
            Some(g) => {
                let de = cfg.hidden_edge;
                let pooled_edges = pna(tape, he_next.reshape(&[b, n * n, de])?, 1, p[g.pool_edges])?;
                let pooled_nodes = pna(tape, hx_next, 1, p[g.pool_nodes])?;
                let update = g.self_map.apply(p, hy)?.add(pooled_nodes)?.add(pooled_edges)?;
                let mid = hy.add(g.out.apply(p, update)?)?.normalize_last(NORM_EPS)?;
                let ff = g.ff2.apply(p, g.ff1.apply(p, mid)?.silu())?;
                mid.add(ff)?.normalize_last(NORM_EPS)?
            }
            None => hy,
        };
        Ok((hx_next, he_next, hy_next))
    }
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

/// Component id per node and the size of each component, for a dense
/// boolean adjacency.
fn components(adj: &[bool], n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        let mut stack = vec![s];
        comp[s] = id;
        while let Some(v) = stack.pop() {
            size += 1;
            for w in 0..n {
                if adj[v * n + w] && comp[w] == usize::MAX {
                    comp[w] = id;
                    stack.push(w);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}
