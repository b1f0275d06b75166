//! Synthetic datasets.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{invalid, Result};
use crate::paths::CategoricalSpace;

/// Two dense communities joined by a few random inter-community edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommunityParams {
    pub min_community: usize,
    pub max_community: usize,
    pub p_intra: f64,
    /// Inter-community edges per node, floored, at least one.
    pub inter_fraction: f64,
}

impl Default for CommunityParams {
    fn default() -> Self {
        Self {
            min_community: 6,
            max_community: 10,
            p_intra: 0.7,
            inter_fraction: 0.05,
        }
    }
}

impl CommunityParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_community < 2 || self.min_community > self.max_community {
            return Err(invalid(format!(
                "community sizes must satisfy 2 <= min <= max, got {}..={}",
                self.min_community, self.max_community
            )));
        }
        if !(self.p_intra > 0.0 && self.p_intra <= 1.0) {
            return Err(invalid(format!("p_intra must lie in (0, 1], got {}", self.p_intra)));
        }
        if !(0.0..=1.0).contains(&self.inter_fraction) {
            return Err(invalid(format!(
                "inter_fraction must lie in [0, 1], got {}",
                self.inter_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridParams {
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            min_side: 3,
            max_side: 5,
        }
    }
}

/// Connected Erdős–Rényi block on `size` nodes; redrawn until connected so
/// that the single inter-community edge is always a bridge.
fn connected_block(size: usize, p: f64, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    loop {
        let mut edges = Vec::new();
        for i in 0..size {
            for j in i + 1..size {
                if rng.random_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        let g = Graph::from_edges(size, &edges).expect("indices in range");
        if g.is_connected() {
            return edges;
        }
    }
}

pub fn gen_community_small(n_graphs: usize, params: &CommunityParams, rng: &mut impl Rng) -> Result<Vec<Graph>> {
    if n_graphs == 0 {
        return Err(invalid("n_graphs must be >= 1"));
    }
    params.validate()?;
    let mut out = Vec::with_capacity(n_graphs);
    for _ in 0..n_graphs {
        let a = rng.random_range(params.min_community..=params.max_community);
        let b = rng.random_range(params.min_community..=params.max_community);
        let n = a + b;
        let mut g = Graph::empty(n);
        for (i, j) in connected_block(a, params.p_intra, rng) {
            g.set_edge(i, j, 1)?;
        }
        for (i, j) in connected_block(b, params.p_intra, rng) {
            g.set_edge(a + i, a + j, 1)?;
        }
        let n_inter = ((params.inter_fraction * n as f64).floor() as usize).clamp(1, a * b);
        for pair in sample_indices(rng, a * b, n_inter) {
            g.set_edge(pair / b, a + pair % b, 1)?;
        }
        out.push(g);
    }
    Ok(out)
}

fn grid(rows: usize, cols: usize) -> Graph {
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = r * cols + c;
            if c + 1 < cols {
                edges.push((v, v + 1));
            }
            if r + 1 < rows {
                edges.push((v, v + cols));
            }
        }
    }
    Graph::from_edges(rows * cols, &edges).expect("indices in range")
}

pub fn gen_grid(n_graphs: usize, params: &GridParams, rng: &mut impl Rng) -> Result<Vec<Graph>> {
    if n_graphs == 0 {
        return Err(invalid("n_graphs must be >= 1"));
    }
    if params.min_side < 1 || params.min_side > params.max_side {
        return Err(invalid(format!(
            "grid sides must satisfy 1 <= min <= max, got {}..={}",
            params.min_side, params.max_side
        )));
    }
    Ok((0..n_graphs)
        .map(|_| {
            let rows = rng.random_range(params.min_side..=params.max_side);
            let cols = rng.random_range(params.min_side..=params.max_side);
            grid(rows, cols)
        })
        .collect())
}

/// Largest joint table accepted by [`gen_categorical_table`].
pub const MAX_TABLE_OUTCOMES: usize = 4096;

/// `n` i.i.d. label vectors from a joint table indexed like
/// [`CategoricalSpace::outcome_index`].
pub fn gen_categorical_table(
    space: &CategoricalSpace,
    probs: &[f64],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let outcomes = space.n_outcomes();
    if outcomes > MAX_TABLE_OUTCOMES {
        return Err(invalid(format!(
            "table has {outcomes} outcomes, limit {MAX_TABLE_OUTCOMES}"
        )));
    }
    if probs.len() != outcomes {
        return Err(invalid(format!(
            "table has {} entries, space has {outcomes} outcomes",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(invalid("table entries must be finite and nonnegative"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("table sums to {total}, expected 1")));
    }
    let mut cdf = Vec::with_capacity(outcomes);
    let mut acc = 0.0;
    for p in probs {
        acc += p;
        cdf.push(acc);
    }
    let last_positive = probs.iter().rposition(|&p| p > 0.0).expect("table sums to 1");
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * total;
            let idx = cdf.partition_point(|&c| c <= u).min(last_positive);
            space.outcome_labels(idx)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    #[test]
    fn grid_3x3_counts() {
        let g = grid(3, 3);
        assert_eq!(g.n_edges(), 12);
        for corner in [0, 2, 6, 8] {
            assert_eq!(g.degree(corner), 2);
        }
        assert_eq!(g.degree(4), 4);
    }

    #[test]
    fn community_sizes_and_bridge() {
        let graphs = gen_community_small(50, &CommunityParams::default(), &mut from_seed(3)).unwrap();
        for g in &graphs {
            assert!((12..=20).contains(&g.n_nodes()));
            assert!(g.is_connected());
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let p = CommunityParams::default();
        let a = gen_community_small(10, &p, &mut from_seed(7)).unwrap();
        let b = gen_community_small(10, &p, &mut from_seed(7)).unwrap();
        assert_eq!(a, b);
        assert!(gen_community_small(0, &p, &mut from_seed(7)).is_err());
    }

    #[test]
    fn deterministic_table() {
        let space = CategoricalSpace::new(vec![2, 3]).unwrap();
        let mut probs = vec![0.0; 6];
        probs[4] = 1.0;
        let rows = gen_categorical_table(&space, &probs, 100, &mut from_seed(1)).unwrap();
        assert!(rows.iter().all(|r| r == &vec![1, 1]));
        assert!(gen_categorical_table(&space, &[0.5; 6], 1, &mut from_seed(1)).is_err());
    }
}
