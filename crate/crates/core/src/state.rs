//! Flat real-valued states for categorical tables and graphs.
//!
//! A table row with space `K = (K_1, .., K_D)` becomes a vector of length
//! `sum K_d`. A graph becomes the node blocks followed by one edge block per
//! ordered node pair (see [`GraphLayout`]). Everything downstream of data
//! loading (losses, models, integrators) only sees these vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graphs::{Graph, GraphLayout};
use crate::paths::CategoricalSpace;
use crate::rng::standard_normal;

/// What a dataset item is.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Table { classes: CategoricalSpace },
    Graphs { node_classes: usize, edge_classes: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Item {
    Row(Vec<usize>),
    Graph(Graph),
}

impl Item {
    pub fn as_graph(&self) -> Option<&Graph> {
        match self {
            Item::Graph(g) => Some(g),
            Item::Row(_) => None,
        }
    }

    pub fn as_row(&self) -> Option<&[usize]> {
        match self {
            Item::Row(r) => Some(r),
            Item::Graph(_) => None,
        }
    }
}

impl DataSpec {
    pub fn is_graph(&self) -> bool {
        matches!(self, DataSpec::Graphs { .. })
    }

    /// Number of nodes of a graph item, number of variables of a row.
    pub fn size_of(&self, item: &Item) -> usize {
        match item {
            Item::Row(r) => r.len(),
            Item::Graph(g) => g.n_nodes(),
        }
    }

    pub fn layout(&self, size: usize) -> Result<StateLayout> {
        match self {
            DataSpec::Table { classes } => {
                if size != classes.n_vars() {
                    return Err(invalid(format!(
                        "table rows have {} variables, got {size}",
                        classes.n_vars()
                    )));
                }
                Ok(StateLayout::Table(classes.clone()))
            }
            DataSpec::Graphs {
                node_classes,
                edge_classes,
            } => Ok(StateLayout::Graph(GraphLayout::new(
                size,
                *node_classes,
                *edge_classes,
            )?)),
        }
    }

    pub fn layout_of(&self, item: &Item) -> Result<StateLayout> {
        self.layout(self.size_of(item))
    }

    /// Check that an item fits this spec.
    pub fn validate(&self, item: &Item) -> Result<()> {
        match (self, item) {
            (DataSpec::Table { classes }, Item::Row(r)) => classes.check_labels(r),
            (
                DataSpec::Graphs {
                    node_classes,
                    edge_classes,
                },
                Item::Graph(g),
            ) => {
                if g.n_nodes() == 0 {
                    return Err(invalid("graph with no nodes"));
                }
                g.check_classes(*node_classes, *edge_classes)
            }
            _ => Err(invalid("item kind does not match the data spec")),
        }
    }

    pub fn embed(&self, item: &Item) -> Result<Vec<f64>> {
        self.validate(item)?;
        match (self.layout_of(item)?, item) {
            (StateLayout::Table(space), Item::Row(r)) => space.one_hot(r),
            (StateLayout::Graph(layout), Item::Graph(g)) => layout.embed(g),
            _ => unreachable!("validated above"),
        }
    }
}

/// Layout of the flat state of items of one size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StateLayout {
    Table(CategoricalSpace),
    Graph(GraphLayout),
}

impl StateLayout {
    pub fn dim(&self) -> usize {
        match self {
            StateLayout::Table(s) => s.total_dim(),
            StateLayout::Graph(g) => g.dim(),
        }
    }

    /// Block sizes tiling the state.
    pub fn segments(&self) -> Vec<usize> {
        match self {
            StateLayout::Table(s) => s.classes().to_vec(),
            StateLayout::Graph(g) => g.segments(),
        }
    }

    /// Every block of the state as a categorical space (graph diagonal
    /// blocks included).
    pub fn block_space(&self) -> CategoricalSpace {
        match self {
            StateLayout::Table(s) => s.clone(),
            StateLayout::Graph(g) => CategoricalSpace::new(g.segments()).expect("graph blocks have >= 2 classes"),
        }
    }

    /// 1 where the state evolves, 0 where it is pinned at zero.
    pub fn state_mask(&self) -> Vec<f64> {
        match self {
            StateLayout::Table(s) => vec![1.0; s.total_dim()],
            StateLayout::Graph(g) => g.state_mask(g.n_nodes),
        }
    }

    /// 1 on coordinates counted by the losses (each categorical variable once).
    pub fn loss_mask(&self) -> Vec<f64> {
        match self {
            StateLayout::Table(s) => vec![1.0; s.total_dim()],
            StateLayout::Graph(g) => g.loss_mask(g.n_nodes),
        }
    }

    /// Number of categorical variables a loss counts.
    pub fn n_variables(&self) -> usize {
        match self {
            StateLayout::Table(s) => s.n_vars(),
            StateLayout::Graph(g) => {
                let n = g.n_nodes;
                (if g.node_dim() > 0 { n } else { 0 }) + n * (n - 1) / 2
            }
        }
    }

    /// Draw from the noise distribution restricted to the evolving coordinates.
    pub fn noise(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            StateLayout::Table(s) => standard_normal(rng, s.total_dim()),
            StateLayout::Graph(g) => g.noise(g.n_nodes, rng),
        }
    }

    /// Per-block argmax of a final state.
    pub fn decode(&self, x: &[f64]) -> Result<Item> {
        if x.len() != self.dim() {
            return Err(invalid(format!(
                "state of length {} for layout of dim {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite("final state".into()));
        }
        match self {
            StateLayout::Table(s) => Ok(Item::Row(s.argmax(x))),
            StateLayout::Graph(g) => Ok(Item::Graph(g.decode_state(x, g.n_nodes)?)),
        }
    }
}

/// Empirical distribution of item sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeHistogram {
    /// `(size, count)` sorted by size.
    pub counts: Vec<(usize, usize)>,
}

impl SizeHistogram {
    pub fn from_items(spec: &DataSpec, items: &[Item]) -> Result<Self> {
        if items.is_empty() {
            return Err(invalid("size histogram of an empty dataset"));
        }
        let mut map = std::collections::BTreeMap::new();
        for it in items {
            *map.entry(spec.size_of(it)).or_insert(0usize) += 1;
        }
        Ok(Self {
            counts: map.into_iter().collect(),
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let total: usize = self.counts.iter().map(|c| c.1).sum();
        let mut u = rng.random_range(0..total);
        for &(size, c) in &self.counts {
            if u < c {
                return size;
            }
            u -= c;
        }
        unreachable!("u < total")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    #[test]
    fn table_layout_roundtrip() {
        let spec = DataSpec::Table {
            classes: CategoricalSpace::new(vec![2, 3]).unwrap(),
        };
        let item = Item::Row(vec![1, 2]);
        let x = spec.embed(&item).unwrap();
        let layout = spec.layout_of(&item).unwrap();
        assert_eq!(layout.decode(&x).unwrap(), item);
        assert_eq!(layout.n_variables(), 2);
        assert!(spec.embed(&Item::Row(vec![2, 0])).is_err());
    }

    #[test]
    fn graph_variables_count_pairs_once() {
        let spec = DataSpec::Graphs {
            node_classes: 1,
            edge_classes: 2,
        };
        assert_eq!(spec.layout(5).unwrap().n_variables(), 10);
        let layout = spec.layout(5).unwrap();
        let m = layout.loss_mask();
        assert_eq!(m.iter().sum::<f64>(), 20.0);
    }

    #[test]
    fn size_histogram_samples_observed_sizes() {
        let spec = DataSpec::Graphs {
            node_classes: 1,
            edge_classes: 2,
        };
        let items: Vec<Item> = [3, 3, 5].iter().map(|&n| Item::Graph(Graph::empty(n))).collect();
        let h = SizeHistogram::from_items(&spec, &items).unwrap();
        assert_eq!(h.counts, vec![(3, 2), (5, 1)]);
        let mut rng = from_seed(0);
        let draws: Vec<usize> = (0..200).map(|_| h.sample(&mut rng)).collect();
        assert!(draws.contains(&3) && draws.contains(&5));
        assert!(draws.iter().all(|d| *d == 3 || *d == 5));
    }
}
