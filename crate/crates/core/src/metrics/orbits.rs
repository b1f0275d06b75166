//! Per-node counts of the 11 orbits of connected 4-node graphlets.
//!
//! Orbit order: path end, path middle, star leaf, star center, 4-cycle,
//! paw pendant, paw triangle node of degree 2, paw center, diamond node of
//! degree 2, diamond node of degree 3, 4-clique.

use super::{nonempty, StatKind, StatVector, MAX_ORBIT_NODES};
use crate::error::{invalid, Result};
use crate::graphs::Graph;

pub const N_ORBITS: usize = 11;

/// Orbit of each member of a connected 4-subset given its degree inside the
/// subset and the subset's sorted degree sequence.
fn orbit_by_degrees(local: usize, sorted: [usize; 4]) -> Option<usize> {
    let orbit = match (sorted, local) {
        ([1, 1, 2, 2], 1) => 0,
        ([1, 1, 2, 2], 2) => 1,
        ([1, 1, 1, 3], 1) => 2,
        ([1, 1, 1, 3], 3) => 3,
        ([2, 2, 2, 2], _) => 4,
        ([1, 2, 2, 3], 1) => 5,
        ([1, 2, 2, 3], 2) => 6,
        ([1, 2, 2, 3], 3) => 7,
        ([2, 2, 3, 3], 2) => 8,
        ([2, 2, 3, 3], 3) => 9,
        ([3, 3, 3, 3], _) => 10,
        _ => return None,
    };
    Some(orbit)
}

fn check_size(g: &Graph) -> Result<()> {
    nonempty(g)?;
    if g.n_nodes() > MAX_ORBIT_NODES {
        return Err(invalid(format!(
            "orbit counting supports at most {MAX_ORBIT_NODES} nodes, got {}",
            g.n_nodes()
        )));
    }
    Ok(())
}

/// Exhaustive enumeration of 4-subsets, classified by induced degrees.
pub fn per_node_orbits(g: &Graph) -> Result<Vec<[u64; N_ORBITS]>> {
    check_size(g)?;
    let n = g.n_nodes();
    let mut counts = vec![[0u64; N_ORBITS]; n];
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                for d in c + 1..n {
                    let q = [a, b, c, d];
                    let mut deg = [0usize; 4];
                    for i in 0..4 {
                        for j in i + 1..4 {
                            if g.has_edge(q[i], q[j]) {
                                deg[i] += 1;
                                deg[j] += 1;
                            }
                        }
                    }
                    let mut sorted = deg;
                    sorted.sort_unstable();
                    // Degree sequences of disconnected 4-node graphs never
                    // match a connected pattern.
                    for i in 0..4 {
                        if let Some(o) = orbit_by_degrees(deg[i], sorted) {
                            counts[q[i]][o] += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(counts)
}

/// Mean per-node orbit counts.
pub fn orbit_counts(g: &Graph) -> Result<StatVector> {
    Ok(mean_counts(&per_node_orbits(g)?))
}

/// Mean orbit counts rescaled to sum to one (all zeros without any connected
/// 4-set). Raw counts run into the hundreds, far beyond any sensible kernel
/// bandwidth, so this is what the MMD compares.
pub fn orbit_profile(g: &Graph) -> Result<StatVector> {
    let mut s = orbit_counts(g)?;
    let total: f64 = s.values.iter().sum();
    if total > 0.0 {
        s.values.iter_mut().for_each(|v| *v /= total);
    }
    Ok(s)
}

fn mean_counts(per_node: &[[u64; N_ORBITS]]) -> StatVector {
    let mut values = vec![0.0; N_ORBITS];
    for row in per_node {
        for (v, c) in values.iter_mut().zip(row) {
            *v += *c as f64;
        }
    }
    let n = per_node.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    StatVector {
        kind: StatKind::OrbitCounts,
        values,
    }
}

/// Graphlet templates as adjacency bitmasks over positions, with orbit labels.
type Template = (&'static [(usize, usize)], [usize; 4]);

const TEMPLATES: [Template; 6] = [
    (&[(0, 1), (1, 2), (2, 3)], [0, 1, 1, 0]),
    (&[(0, 1), (0, 2), (0, 3)], [3, 2, 2, 2]),
    (&[(0, 1), (1, 2), (2, 3), (3, 0)], [4, 4, 4, 4]),
    (&[(0, 1), (1, 2), (0, 2), (2, 3)], [6, 6, 7, 5]),
    (&[(0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], [8, 8, 9, 9]),
    (&[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], [10, 10, 10, 10]),
];

fn permutations4() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    if (0..4).all(|i| p[..i].iter().all(|&x| x != p[i])) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// Orbits of the members of a connected 4-set by matching it against every
/// relabelling of every template.
fn match_template(g: &Graph, set: [usize; 4], perms: &[[usize; 4]]) -> Option<[usize; 4]> {
    for (edges, orbits) in TEMPLATES {
        let mut template = [[false; 4]; 4];
        for &(i, j) in edges {
            template[i][j] = true;
            template[j][i] = true;
        }
        for p in perms {
            let fits = (0..4).all(|i| (0..4).all(|j| i == j || template[i][j] == g.has_edge(set[p[i]], set[p[j]])));
            if fits {
                let mut out = [0; 4];
                for i in 0..4 {
                    out[p[i]] = orbits[i];
                }
                return Some(out);
            }
        }
    }
    None
}

/// Second implementation: connected 4-sets grown from each vertex along
/// edges (ESU enumeration), classified by template matching.
pub fn orbit_counts_by_walks(g: &Graph) -> Result<Vec<[u64; N_ORBITS]>> {
    check_size(g)?;
    let n = g.n_nodes();
    let perms = permutations4();
    let mut counts = vec![[0u64; N_ORBITS]; n];
    let adjacency: Vec<Vec<usize>> = (0..n).map(|v| g.neighbors(v).collect()).collect();

    fn extend(
        adjacency: &[Vec<usize>],
        sub: &mut Vec<usize>,
        ext: Vec<usize>,
        root: usize,
        found: &mut Vec<[usize; 4]>,
    ) {
        if sub.len() == 4 {
            found.push([sub[0], sub[1], sub[2], sub[3]]);
            return;
        }
        let mut ext = ext;
        while let Some(w) = ext.pop() {
            let mut next = ext.clone();
            for &u in &adjacency[w] {
                let exclusive = u > root
                    && !sub.contains(&u)
                    && u != w
                    && !next.contains(&u)
                    && !sub.iter().any(|&s| adjacency[s].contains(&u));
                if exclusive {
                    next.push(u);
                }
            }
            sub.push(w);
            extend(adjacency, sub, next, root, found);
            sub.pop();
        }
    }

    let mut found = Vec::new();
    for v in 0..n {
        let ext: Vec<usize> = adjacency[v].iter().copied().filter(|&u| u > v).collect();
        extend(&adjacency, &mut vec![v], ext, v, &mut found);
    }
    for set in found {
        let orbits = match_template(g, set, &perms).expect("ESU yields connected sets");
        for i in 0..4 {
            counts[set[i]][orbits[i]] += 1;
        }
    }
    Ok(counts)
}
