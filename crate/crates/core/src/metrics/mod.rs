//! Graph statistics, MMD with a Gaussian EMD kernel, uniqueness and validity.

pub mod canonical;
pub mod orbits;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graphs::Graph;

pub use canonical::{canonical_form, uniqueness, valid_unique_fraction, UniquenessReport, EXACT_CANONICAL_MAX_NODES};
pub use orbits::{orbit_counts, orbit_counts_by_walks, orbit_profile, per_node_orbits, N_ORBITS};

/// Degrees `0..=DEGREE_CAP` get their own bin; larger degrees share one overflow bin.
pub const DEGREE_CAP: usize = 20;
pub const CLUSTERING_BINS: usize = 10;
pub const MAX_ORBIT_NODES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    DegreeHist,
    ClusteringHist,
    OrbitCounts,
}

impl StatKind {
    pub const ALL: [StatKind; 3] = [StatKind::DegreeHist, StatKind::ClusteringHist, StatKind::OrbitCounts];

    pub fn name(self) -> &'static str {
        match self {
            StatKind::DegreeHist => "degree",
            StatKind::ClusteringHist => "clustering",
            StatKind::OrbitCounts => "orbit",
        }
    }

    pub fn compute(self, g: &Graph) -> Result<StatVector> {
        match self {
            StatKind::DegreeHist => degree_hist(g),
            StatKind::ClusteringHist => clustering_hist(g),
            StatKind::OrbitCounts => orbit_profile(g),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatVector {
    pub kind: StatKind,
    pub values: Vec<f64>,
}

fn nonempty(g: &Graph) -> Result<()> {
    if g.n_nodes() == 0 {
        Err(invalid("statistics of a graph with no nodes"))
    } else {
        Ok(())
    }
}

pub fn degree_hist(g: &Graph) -> Result<StatVector> {
    nonempty(g)?;
    let mut values = vec![0.0; DEGREE_CAP + 2];
    let share = 1.0 / g.n_nodes() as f64;
    for d in g.degrees() {
        values[d.min(DEGREE_CAP + 1)] += share;
    }
    Ok(StatVector {
        kind: StatKind::DegreeHist,
        values,
    })
}

/// Local clustering coefficient of every node (0 below degree 2).
pub fn clustering_coefficients(g: &Graph) -> Vec<f64> {
    (0..g.n_nodes())
        .map(|v| {
            let nb: Vec<usize> = g.neighbors(v).collect();
            let d = nb.len();
            if d < 2 {
                return 0.0;
            }
            let mut links = 0;
            for (a, &x) in nb.iter().enumerate() {
                for &y in &nb[a + 1..] {
                    if g.has_edge(x, y) {
                        links += 1;
                    }
                }
            }
            2.0 * links as f64 / (d * (d - 1)) as f64
        })
        .collect()
}

pub fn clustering_hist(g: &Graph) -> Result<StatVector> {
    nonempty(g)?;
    let mut values = vec![0.0; CLUSTERING_BINS];
    let share = 1.0 / g.n_nodes() as f64;
    for c in clustering_coefficients(g) {
        let bin = ((c * CLUSTERING_BINS as f64) as usize).min(CLUSTERING_BINS - 1);
        values[bin] += share;
    }
    Ok(StatVector {
        kind: StatKind::ClusteringHist,
        values,
    })
}

/// 1-D Wasserstein distance between two vectors on a shared unit-spaced
/// support: `sum |cumsum(a) - cumsum(b)|`, shorter vector zero-padded.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    let (mut ca, mut cb, mut total) = (0.0, 0.0, 0.0);
    for i in 0..n {
        ca += a.get(i).copied().unwrap_or(0.0);
        cb += b.get(i).copied().unwrap_or(0.0);
        total += (ca - cb).abs();
    }
    total
}

pub fn emd_kernel(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let w = wasserstein_1d(a, b);
    (-w * w / (2.0 * sigma * sigma)).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub metric: StatKind,
    /// Biased MMD² estimate (diagonal terms included), clipped at zero.
    pub value: f64,
    pub kernel_sigma: f64,
    pub n_ref: usize,
    pub n_gen: usize,
    pub estimator: String,
}

pub const DEFAULT_SIGMA: f64 = 1.0;

pub fn mmd_emd_gaussian(reference: &[StatVector], generated: &[StatVector], sigma: f64) -> Result<MmdReport> {
    if reference.is_empty() || generated.is_empty() {
        return Err(invalid("MMD needs nonempty sample sets"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("kernel sigma must be positive, got {sigma}")));
    }
    let kind = reference[0].kind;
    if let Some(bad) = reference.iter().chain(generated).find(|s| s.kind != kind) {
        return Err(invalid(format!("cannot compare {:?} with {:?}", kind, bad.kind)));
    }
    let mean_kernel = |xs: &[StatVector], ys: &[StatVector]| {
        let mut s = 0.0;
        for x in xs {
            for y in ys {
                s += emd_kernel(&x.values, &y.values, sigma);
            }
        }
        s / (xs.len() * ys.len()) as f64
    };
    let raw =
        mean_kernel(reference, reference) + mean_kernel(generated, generated) - 2.0 * mean_kernel(reference, generated);
    Ok(MmdReport {
        metric: kind,
        value: raw.max(0.0),
        kernel_sigma: sigma,
        n_ref: reference.len(),
        n_gen: generated.len(),
        estimator: "biased".into(),
    })
}

/// Per-graph statistic of `kind` for every graph.
pub fn stats(graphs: &[Graph], kind: StatKind) -> Result<Vec<StatVector>> {
    graphs.iter().map(|g| kind.compute(g)).collect()
}

/// Degree, clustering and orbit MMDs of `generated` against `reference`.
pub fn graph_mmds(reference: &[Graph], generated: &[Graph], sigma: f64) -> Result<Vec<MmdReport>> {
    StatKind::ALL
        .iter()
        .map(|&k| mmd_emd_gaussian(&stats(reference, k)?, &stats(generated, k)?, sigma))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidityRule {
    Connected,
    TwoCommunities,
}

impl ValidityRule {
    pub const ALL: [ValidityRule; 2] = [ValidityRule::Connected, ValidityRule::TwoCommunities];

    pub fn name(self) -> &'static str {
        match self {
            ValidityRule::Connected => "connected",
            ValidityRule::TwoCommunities => "two_communities",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name).ok_or_else(|| {
            invalid(format!(
                "unknown validity rule '{name}' (expected one of: connected, two_communities)"
            ))
        })
    }

    pub fn holds(self, g: &Graph) -> bool {
        match self {
            ValidityRule::Connected => g.n_nodes() > 0 && g.is_connected(),
            ValidityRule::TwoCommunities => g.n_nodes() > 0 && g.is_connected() && has_splitting_bridge(g, 3),
        }
    }
}

/// Some edge whose removal leaves two components of at least `min_side` nodes.
fn has_splitting_bridge(g: &Graph, min_side: usize) -> bool {
    let mut h = g.clone();
    for (i, j, c) in g.edges() {
        h.set_edge(i, j, 0).expect("existing edge");
        let comp = h.components();
        let side = comp.iter().filter(|&&c| c == comp[i]).count();
        let split = comp[i] != comp[j] && side >= min_side && g.n_nodes() - side >= min_side;
        h.set_edge(i, j, c).expect("existing edge");
        if split {
            return true;
        }
    }
    false
}

pub fn toy_validity(samples: &[Graph], rule: ValidityRule) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("validity of an empty sample set"));
    }
    Ok(samples.iter().filter(|g| rule.holds(g)).count() as f64 / samples.len() as f64)
}
