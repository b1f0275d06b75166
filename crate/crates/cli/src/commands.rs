//! The subcommands, callable without going through argument parsing.

use std::path::{Path, PathBuf};

use catflow::checks::{self, CheckOutcome, Fault};
use catflow::graphs::io::read_graphs;
use catflow::graphs::Graph;
use catflow::metrics::{graph_mmds, uniqueness};
use catflow::model::Checkpoint;
use catflow::sampling::{batch_sample, ModelField, Scheme};
use catflow::state::Item;
use catflow::train::{train_loop, StepRecord, StopReason, TrainState};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Generator, RunConfig};
use crate::data::{self, write_items};
use crate::error::{invalid, io_at, CliError, Result};
use crate::manifest::{write_atomic, ManifestBuilder, RunManifest};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const HELD_OUT_FILE: &str = "held_out.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";

const LOSS_HEADER: [&str; 5] = ["step", "t_mean", "loss", "lr", "clamps"];

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub steps: Option<u64>,
    pub scheme: Option<Scheme>,
}

pub fn resolve_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, ov)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, ov: &Overrides) -> Result<()> {
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &ov.out {
        cfg.output_dir = Some(out.clone());
    }
    if let Some(steps) = ov.steps {
        cfg.train.total_steps = steps;
    }
    if let Some(scheme) = ov.scheme {
        cfg.integrator.scheme = scheme;
    }
    cfg.validate()
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| invalid("no output directory: pass --out or set output_dir"))?;
    std::fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    Ok(dir)
}

fn record_dataset_inputs(manifest: &mut ManifestBuilder, cfg: &RunConfig) -> Result<()> {
    if cfg.dataset.generator == Generator::File {
        for p in cfg.dataset.path.iter().chain(&cfg.dataset.held_out_path) {
            manifest.input(p)?;
        }
    }
    Ok(())
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<RunManifest> {
    let dir = output_dir(cfg)?;
    let mut manifest = ManifestBuilder::start("generate", cfg.to_toml(), cfg.seed);
    record_dataset_inputs(&mut manifest, cfg)?;
    let ds = data::build(&cfg.dataset, cfg.seed)?;
    write_items(&dir.join(DATASET_FILE), &ds.train)?;
    write_items(&dir.join(HELD_OUT_FILE), &ds.held_out)?;
    manifest.finish(
        &dir,
        &[DATASET_FILE, HELD_OUT_FILE],
        json!({ "n_train": ds.train.len(), "n_held_out": ds.held_out.len() }),
    )
}

/// Rows of an earlier log that precede `step`, for continuing it on resume.
fn earlier_loss_rows(path: &Path, step: u64) -> Result<Vec<csv::StringRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let row_step: u64 = row
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| invalid(format!("{}: malformed step column", path.display())))?;
        if row_step < step {
            rows.push(row);
        }
    }
    Ok(rows)
}

fn write_loss_log(path: &Path, earlier: &[csv::StringRecord], records: &[StepRecord]) -> Result<()> {
    let to_invalid = |e: csv::Error| invalid(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(LOSS_HEADER).map_err(to_invalid)?;
    for row in earlier {
        w.write_record(row).map_err(to_invalid)?;
    }
    for rec in records {
        w.serialize(rec).map_err(to_invalid)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn periodic_checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:08}.bin")
}

/// Train from scratch, or continue the state stored in `resume`.
///
/// A non-finite loss stops the run before the final checkpoint is written,
/// leaving the last periodic checkpoint as the newest one on disk.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<RunManifest> {
    let dir = output_dir(cfg)?;
    let config_text = cfg.to_toml();
    let ckpt_text = cfg.portable_toml();
    let mut manifest = ManifestBuilder::start("train", config_text.clone(), cfg.seed);
    record_dataset_inputs(&mut manifest, cfg)?;
    let ds = data::build(&cfg.dataset, cfg.seed)?;
    let mut state = match resume {
        Some(path) => {
            manifest.input(path)?;
            let state = TrainState::from_checkpoint(&Checkpoint::load(path)?)?;
            if state.spec != ds.spec {
                return Err(invalid("checkpoint was trained on a different kind of data"));
            }
            state
        }
        None => TrainState::new(
            ds.spec.clone(),
            cfg.model.clone(),
            cfg.objective,
            cfg.optimizer,
            cfg.train.ema_decay,
            cfg.seed,
            &ds.train,
        )?,
    };
    if state.step > cfg.train.total_steps {
        return Err(invalid(format!(
            "checkpoint is at step {}, beyond train.total_steps {}",
            state.step, cfg.train.total_steps
        )));
    }
    write_atomic(&dir.join(CONFIG_FILE), config_text.as_bytes())?;
    let loss_path = dir.join(LOSS_FILE);
    let earlier = match resume {
        Some(_) => earlier_loss_rows(&loss_path, state.step)?,
        None => Vec::new(),
    };

    let every = cfg.train.checkpoint_every;
    let log_every = (cfg.train.total_steps / 20).max(1);
    let mut records: Vec<StepRecord> = Vec::new();
    let outcome = train_loop(&mut state, &ds.train, &cfg.train, |rec, st| {
        records.push(rec.clone());
        if !rec.loss.is_finite() {
            return Err(catflow::Error::NonFinite(format!("loss at step {}", rec.step)));
        }
        if every > 0 && st.step % every == 0 {
            st.to_checkpoint(&ckpt_text)?
                .save(&dir.join(periodic_checkpoint_name(st.step)))?;
        }
        if st.step % log_every == 0 {
            eprintln!("step {} loss {:.4} lr {:.3e}", st.step, rec.loss, rec.lr);
        }
        Ok(())
    });
    write_loss_log(&loss_path, &earlier, &records)?;
    let stop = outcome?;
    state.to_checkpoint(&ckpt_text)?.save(&dir.join(CHECKPOINT_FILE))?;

    let tail = &records[records.len().saturating_sub(100)..];
    let tail_loss = if tail.is_empty() {
        None
    } else {
        Some(tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
    };
    manifest.finish(
        &dir,
        &[CONFIG_FILE, LOSS_FILE, CHECKPOINT_FILE],
        json!({
            "final_step": state.step,
            "stopped_by": match stop { StopReason::Budget => "budget", StopReason::Plateau => "plateau" },
            "mean_loss_last_100": tail_loss,
        }),
    )
}

/// Options of `sample` that have no config-file counterpart.
#[derive(Clone, Debug, Default)]
pub struct SampleOptions {
    pub n: Option<usize>,
    /// Integration steps.
    pub steps: Option<usize>,
}

/// Draw samples from the EMA weights of a checkpoint. Without an explicit
/// config the one stored in the checkpoint is used.
pub fn cmd_sample(
    config: Option<&Path>,
    checkpoint: &Path,
    ov: &Overrides,
    opts: &SampleOptions,
) -> Result<(RunManifest, Vec<Item>)> {
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| match e {
        catflow::Error::Io(source) => CliError::Io {
            path: checkpoint.to_path_buf(),
            source,
        },
        e => e.into(),
    })?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_toml(&ckpt.header.config)?,
    };
    apply_overrides(&mut cfg, ov)?;
    if let Some(steps) = opts.steps {
        cfg.integrator.n_steps = steps;
        cfg.integrator.validate()?;
    }
    let n = opts.n.unwrap_or(cfg.eval.n_samples);
    let dir = output_dir(&cfg)?;
    let mut manifest = ManifestBuilder::start("sample", cfg.to_toml(), cfg.seed);
    manifest.input(checkpoint)?;

    let state = TrainState::from_checkpoint(&ckpt)?;
    let model = state.ema_model();
    let field = ModelField {
        model: &model,
        objective: state.objective,
    };
    let samples = batch_sample(&field, &state.spec, &state.sizes, n, &cfg.integrator, cfg.seed)?;
    write_items(&dir.join(SAMPLES_FILE), &samples)?;
    let manifest = manifest.finish(
        &dir,
        &[SAMPLES_FILE],
        json!({ "n_samples": n, "objective": state.objective.name(), "scheme": cfg.integrator.scheme.name() }),
    )?;
    Ok((manifest, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n_reference: usize,
    pub n_samples: usize,
}

fn read_graph_file(path: &Path) -> Result<Vec<Graph>> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    let graphs = read_graphs(bytes.as_slice())?;
    if graphs.is_empty() {
        return Err(invalid(format!("{} holds no records", path.display())));
    }
    Ok(graphs)
}

/// Degree, clustering and orbit MMDs against `reference`, and the fraction of
/// distinct samples up to isomorphism.
pub fn evaluate(reference: &[Graph], samples: &[Graph], sigma: f64) -> Result<Vec<MetricRow>> {
    let mut rows: Vec<MetricRow> = graph_mmds(reference, samples, sigma)?
        .into_iter()
        .map(|r| MetricRow {
            metric: r.metric.name().to_string(),
            value: r.value,
            n_reference: r.n_ref,
            n_samples: r.n_gen,
        })
        .collect();
    rows.push(MetricRow {
        metric: "uniqueness".to_string(),
        value: uniqueness(samples)?.fraction,
        n_reference: reference.len(),
        n_samples: samples.len(),
    });
    Ok(rows)
}

/// Compare two graph files; artifacts are written only when an output
/// directory is configured.
pub fn cmd_eval(cfg: &RunConfig, reference: &Path, samples: &Path) -> Result<Vec<MetricRow>> {
    let ref_graphs = read_graph_file(reference)?;
    let gen_graphs = read_graph_file(samples)?;
    let rows = evaluate(&ref_graphs, &gen_graphs, cfg.eval.sigma)?;
    if cfg.output_dir.is_none() {
        return Ok(rows);
    }
    let dir = output_dir(cfg)?;
    let mut manifest = ManifestBuilder::start("eval", cfg.to_toml(), cfg.seed);
    manifest.input(reference)?;
    manifest.input(samples)?;
    let mut jsonl = String::new();
    for row in &rows {
        jsonl.push_str(&serde_json::to_string(row).expect("row serializes"));
        jsonl.push('\n');
    }
    write_atomic(&dir.join(METRICS_JSONL), jsonl.as_bytes())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).map_err(|e| invalid(e.to_string()))?;
    }
    write_atomic(
        &dir.join(METRICS_CSV),
        &w.into_inner().map_err(|e| invalid(e.to_string()))?,
    )?;
    let summary: serde_json::Map<String, serde_json::Value> =
        rows.iter().map(|r| (r.metric.clone(), json!(r.value))).collect();
    manifest.finish(&dir, &[METRICS_JSONL, METRICS_CSV], summary.into())?;
    Ok(rows)
}

pub fn cmd_verify(seed: u64, fault: Option<Fault>) -> Result<Vec<CheckOutcome>> {
    Ok(checks::run_all(seed, fault)?)
}
