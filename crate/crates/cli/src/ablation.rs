//! Sweeps over training-set size, depth and objective.

use catflow::metrics::valid_unique_fraction;
use catflow::objectives::Objective;
use catflow::sampling::{batch_sample, ModelField};
use catflow::state::{DataSpec, Item};
use catflow::train::{train_loop, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::data::{self, to_graphs};
use crate::error::{invalid, io_at, Result};
use crate::manifest::{write_atomic, ManifestBuilder, RunManifest};

pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub data_fraction: f64,
    pub n_layers: usize,
    pub objective: Objective,
    /// Fraction of samples that are valid and distinct.
    pub score: f64,
}

/// Leading `fraction` of the training set, at least one item.
pub fn subset(train: &[Item], fraction: f64) -> &[Item] {
    let n = ((train.len() as f64 * fraction).round() as usize).clamp(1, train.len());
    &train[..n]
}

/// One model trained and scored per cell; every cell uses the run seed.
pub fn run_cell(
    cfg: &RunConfig,
    spec: &DataSpec,
    train: &[Item],
    n_layers: usize,
    objective: Objective,
) -> Result<f64> {
    let model = catflow::model::ModelConfig {
        n_layers,
        ..cfg.model.clone()
    };
    let tc = TrainConfig {
        total_steps: cfg.ablate.steps,
        ..cfg.train.clone()
    };
    let mut state = TrainState::new(
        spec.clone(),
        model,
        objective,
        cfg.optimizer,
        tc.ema_decay,
        cfg.seed,
        train,
    )?;
    train_loop(&mut state, train, &tc, |_, _| Ok(()))?;
    let ema = state.ema_model();
    let field = ModelField { model: &ema, objective };
    let samples = batch_sample(
        &field,
        spec,
        &state.sizes,
        cfg.ablate.n_samples,
        &cfg.integrator,
        cfg.seed,
    )?;
    Ok(valid_unique_fraction(&to_graphs(&samples), cfg.eval.rule)?)
}

/// The full grid, rows ordered by fraction, then depth, then objective.
pub fn run_ablation(cfg: &RunConfig, mut on_row: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let ds = data::build(&cfg.dataset, cfg.seed)?;
    if !matches!(ds.spec, DataSpec::Graphs { .. }) {
        return Err(invalid("ablation scores graph validity and needs a graph dataset"));
    }
    let mut rows = Vec::new();
    for &fraction in &cfg.ablate.fractions {
        let train = subset(&ds.train, fraction);
        for &n_layers in &cfg.ablate.layers {
            for &objective in &cfg.ablate.objectives {
                let row = AblationRow {
                    data_fraction: fraction,
                    n_layers,
                    objective,
                    score: run_cell(cfg, &ds.spec, train, n_layers, objective)?,
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<(RunManifest, Vec<AblationRow>)> {
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| invalid("no output directory: pass --out or set output_dir"))?;
    std::fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    let mut manifest = ManifestBuilder::start("ablate", cfg.to_toml(), cfg.seed);
    if let Some(p) = &cfg.dataset.path {
        manifest.input(p)?;
    }
    let rows = run_ablation(cfg, |r| {
        eprintln!(
            "fraction {} layers {} {}: {:.3}",
            r.data_fraction,
            r.n_layers,
            r.objective.name(),
            r.score
        )
    })?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).map_err(|e| invalid(e.to_string()))?;
    }
    write_atomic(
        &dir.join(ABLATION_FILE),
        &w.into_inner().map_err(|e| invalid(e.to_string()))?,
    )?;
    let manifest = manifest.finish(&dir, &[ABLATION_FILE], json!({ "rows": rows.len() }))?;
    Ok((manifest, rows))
}
