//! Datasets as the commands see them.
//!
//! Everything is stored in the graph line format; table rows are written as
//! edgeless graphs whose node labels are the row.

use std::path::Path;

use catflow::graphs::io::{read_graphs, write_graphs};
use catflow::graphs::{gen_categorical_table, gen_community_small, gen_grid, table_record, Graph};
use catflow::paths::CategoricalSpace;
use catflow::rng::split;
use catflow::state::{DataSpec, Item};

use crate::config::{DatasetConfig, Generator};
use crate::error::{invalid, io_at, Result};
use crate::manifest::write_atomic;

const TRAIN_STREAM: u64 = u64::MAX - 1;
const HELD_OUT_STREAM: u64 = u64::MAX - 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DataSpec,
    pub train: Vec<Item>,
    pub held_out: Vec<Item>,
}

pub fn spec_of(cfg: &DatasetConfig) -> Result<DataSpec> {
    Ok(match cfg.generator {
        Generator::Table => DataSpec::Table {
            classes: CategoricalSpace::new(cfg.classes.clone())?,
        },
        _ => DataSpec::Graphs {
            node_classes: cfg.node_classes,
            edge_classes: cfg.edge_classes,
        },
    })
}

fn generate_graphs(cfg: &DatasetConfig, spec: &DataSpec, n: usize, stream: u64, seed: u64) -> Result<Vec<Item>> {
    let mut rng = split(seed, stream);
    Ok(match cfg.generator {
        Generator::CommunitySmall => to_items(spec, gen_community_small(n, &cfg.community, &mut rng)?)?,
        Generator::Grid => to_items(spec, gen_grid(n, &cfg.grid, &mut rng)?)?,
        Generator::Table => {
            let DataSpec::Table { classes } = spec else {
                unreachable!("table spec")
            };
            gen_categorical_table(classes, &cfg.probs, n, &mut rng)?
                .into_iter()
                .map(Item::Row)
                .collect()
        }
        Generator::File => unreachable!("files are loaded, not generated"),
    })
}

/// Training and held-out sets: generated from `seed`, or read from disk.
pub fn build(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    let spec = spec_of(cfg)?;
    let (train, held_out) = match cfg.generator {
        Generator::File => {
            let path = cfg.path.as_deref().expect("validated");
            let train = read_items(&spec, path)?;
            let held_out = match &cfg.held_out_path {
                Some(p) => read_items(&spec, p)?,
                None => Vec::new(),
            };
            (train, held_out)
        }
        _ => (
            generate_graphs(cfg, &spec, cfg.n_graphs, TRAIN_STREAM, seed)?,
            if cfg.held_out == 0 {
                Vec::new()
            } else {
                generate_graphs(cfg, &spec, cfg.held_out, HELD_OUT_STREAM, seed)?
            },
        ),
    };
    if train.is_empty() {
        return Err(invalid("training set is empty"));
    }
    for item in train.iter().chain(&held_out) {
        spec.validate(item)?;
    }
    Ok(Dataset { spec, train, held_out })
}

pub fn to_items(spec: &DataSpec, graphs: Vec<Graph>) -> Result<Vec<Item>> {
    graphs
        .into_iter()
        .map(|g| {
            let item = match spec {
                DataSpec::Table { .. } => Item::Row(g.node_labels().to_vec()),
                DataSpec::Graphs { .. } => Item::Graph(g),
            };
            spec.validate(&item)?;
            Ok(item)
        })
        .collect()
}

pub fn to_graphs(items: &[Item]) -> Vec<Graph> {
    items
        .iter()
        .map(|item| match item {
            Item::Row(labels) => table_record(labels),
            Item::Graph(g) => g.clone(),
        })
        .collect()
}

pub fn read_items(spec: &DataSpec, path: &Path) -> Result<Vec<Item>> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    to_items(spec, read_graphs(bytes.as_slice())?)
}

pub fn write_items(path: &Path, items: &[Item]) -> Result<()> {
    let mut buf = Vec::new();
    write_graphs(&mut buf, &to_graphs(items))?;
    write_atomic(path, &buf)
}
