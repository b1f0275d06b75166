//! Training loop state, one optimization step, and checkpoint conversion.
//!
//! Step `k` draws everything it needs (batch indices, times, noise) from the
//! stream `split(seed, k)`, so a run resumed from a checkpoint at step `k`
//! continues exactly as the uninterrupted run would.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{Checkpoint, CheckpointHeader, Model, ModelConfig};
use crate::numerics::{cosine_lr, AdamW, AdamWConfig, Ema, Tape, Tensor};
use crate::objectives::{catflow_loss_tape, fm_baseline_loss_tape, gaussian_vfm_loss_tape, LossTargets, Objective};
use crate::rng::split;
use crate::state::{DataSpec, Item, SizeHistogram, StateLayout};

/// Times for the flow-matching baseline stay below `1 - FM_TIME_MARGIN`,
/// where its regression target diverges.
pub const FM_TIME_MARGIN: f64 = 1e-3;

/// Stream index reserved for parameter initialization.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub ema_decay: f64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Stop once the mean loss over a window of this many steps fails to
    /// improve on the previous window (0 = never).
    pub plateau_window: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 20_000,
            batch_size: 64,
            ema_decay: 0.999,
            checkpoint_every: 0,
            plateau_window: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(invalid("train.total_steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("train.batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(invalid("train.ema_decay must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One training-log record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub t_mean: f64,
    pub loss: f64,
    pub lr: f64,
    pub clamps: usize,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub spec: DataSpec,
    pub model_config: ModelConfig,
    pub objective: Objective,
    pub model: Model,
    pub optimizer: AdamW,
    pub ema: Ema,
    pub step: u64,
    pub seed: u64,
    pub sizes: SizeHistogram,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    spec: DataSpec,
    model: ModelConfig,
    objective: Objective,
    adamw: AdamWConfig,
    optimizer_step: u64,
    ema_decay: f64,
    has_ema: bool,
    sizes: SizeHistogram,
}

impl TrainState {
    pub fn new(
        spec: DataSpec,
        model_config: ModelConfig,
        objective: Objective,
        adamw: AdamWConfig,
        ema_decay: f64,
        seed: u64,
        data: &[Item],
    ) -> Result<Self> {
        for item in data {
            spec.validate(item)?;
        }
        let sizes = SizeHistogram::from_items(&spec, data)?;
        let model = Model::new(&spec, &model_config, &mut split(seed, INIT_STREAM))?;
        let optimizer = AdamW::new(adamw, model.params());
        Ok(Self {
            spec,
            model_config,
            objective,
            model,
            optimizer,
            ema: Ema::new(ema_decay)?,
            step: 0,
            seed,
            sizes,
        })
    }

    /// Batch loss and gradients without touching the parameters.
    pub fn loss_and_grads(&self, data: &[Item], batch_size: usize, step: u64) -> Result<(StepRecord, Vec<Tensor>)> {
        if data.is_empty() {
            return Err(invalid("training data is empty"));
        }
        let mut rng = split(self.seed, step);
        let picks: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &picks {
            groups.entry(self.spec.size_of(&data[i])).or_default().push(i);
        }
        let tape = Tape::new();
        let leaves = self.model.params().leaves(&tape);
        let mut total = None;
        let (mut clamps, mut t_sum) = (0, 0.0);
        for (size, members) in &groups {
            let layout = self.spec.layout(*size)?;
            let batch = self.make_batch(&layout, data, members, &mut rng)?;
            t_sum += batch.t.iter().sum::<f64>();
            let out = self.model.forward(&tape, &leaves, &layout, &batch.xt, &batch.t)?;
            let loss = match self.objective {
                Objective::Catflow => {
                    let (l, c) = catflow_loss_tape(&tape, out, &batch.targets)?;
                    clamps += c;
                    l
                }
                Objective::GaussianVfm => gaussian_vfm_loss_tape(&tape, out, &batch.targets)?,
                Objective::FmBaseline => fm_baseline_loss_tape(&tape, out, &batch.velocity, &batch.targets)?,
            };
            let loss = loss.scale(members.len() as f64 / batch_size as f64);
            total = Some(match total {
                None => loss,
                Some(acc) => loss.add(acc)?,
            });
        }
        let total = total.expect("batch_size >= 1");
        let value = total.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        tape.backward(total)?;
        let grads = self.model.params().collect_grads(&leaves);
        let record = StepRecord {
            step,
            t_mean: t_sum / batch_size as f64,
            loss: value,
            lr: 0.0,
            clamps,
        };
        Ok((record, grads))
    }

    fn make_batch(&self, layout: &StateLayout, data: &[Item], members: &[usize], rng: &mut impl Rng) -> Result<Batch> {
        let dim = layout.dim();
        let b = members.len();
        let mask = layout.loss_mask();
        let t_max = match self.objective {
            Objective::FmBaseline => 1.0 - FM_TIME_MARGIN,
            _ => 1.0,
        };
        let mut x1 = Vec::with_capacity(b * dim);
        let mut xt = Vec::with_capacity(b * dim);
        let mut velocity = Vec::with_capacity(b * dim);
        let mut t = Vec::with_capacity(b);
        for &i in members {
            let target = self.spec.embed(&data[i])?;
            let ti: f64 = rng.random::<f64>() * t_max;
            let x0 = layout.noise(rng);
            let x: Vec<f64> = target.iter().zip(&x0).map(|(a, z)| ti * a + (1.0 - ti) * z).collect();
            if self.objective == Objective::FmBaseline {
                velocity.extend(target.iter().zip(&x).map(|(a, xv)| (a - xv) / (1.0 - ti)));
            }
            x1.extend_from_slice(&target);
            xt.extend_from_slice(&x);
            t.push(ti);
        }
        let weights: Vec<f64> = mask.iter().copied().cycle().take(b * dim).collect();
        let velocity = if velocity.is_empty() {
            Tensor::zeros(&[0])
        } else {
            Tensor::new(vec![b, dim], velocity)?
        };
        Ok(Batch {
            xt: Tensor::new(vec![b, dim], xt)?,
            t,
            velocity,
            targets: LossTargets {
                x1: Tensor::new(vec![b, dim], x1)?,
                weights: Tensor::new(vec![b, dim], weights)?,
                segments: layout.segments(),
            },
        })
    }

    /// One AdamW update at the cosine-scheduled rate, then an EMA update.
    /// On error nothing is modified.
    pub fn step(&mut self, data: &[Item], cfg: &TrainConfig) -> Result<StepRecord> {
        if self.step >= cfg.total_steps {
            return Err(invalid(format!("already at step {} of {}", self.step, cfg.total_steps)));
        }
        let (mut record, grads) = self.loss_and_grads(data, cfg.batch_size, self.step)?;
        let lr = cosine_lr(self.step, cfg.total_steps, self.optimizer.config.lr)?;
        self.optimizer.step(self.model.params_mut(), &grads, lr)?;
        if !self.model.params().is_finite() {
            return Err(Error::NonFinite(format!("parameters after step {}", self.step)));
        }
        self.ema.update(self.model.params())?;
        record.lr = lr;
        self.step += 1;
        Ok(record)
    }

    /// Copy of the model carrying the EMA weights (live weights before any update).
    pub fn ema_model(&self) -> Model {
        let mut model = self.model.clone();
        if let Some(shadow) = &self.ema.shadow {
            model.params_mut().values_mut().clone_from_slice(shadow);
        }
        model
    }

    pub fn to_checkpoint(&self, config_text: &str) -> Result<Checkpoint> {
        let meta = Meta {
            spec: self.spec.clone(),
            model: self.model_config.clone(),
            objective: self.objective,
            adamw: self.optimizer.config,
            optimizer_step: self.optimizer.step_count,
            ema_decay: self.ema.decay,
            has_ema: self.ema.shadow.is_some(),
            sizes: self.sizes.clone(),
        };
        let params = self.model.params();
        let mut arrays = Vec::new();
        for (name, v) in params.names().iter().zip(params.values()) {
            arrays.push((format!("param/{name}"), v.clone()));
        }
        for (name, v) in params.names().iter().zip(&self.optimizer.first_moment) {
            arrays.push((format!("adam_m/{name}"), v.clone()));
        }
        for (name, v) in params.names().iter().zip(&self.optimizer.second_moment) {
            arrays.push((format!("adam_v/{name}"), v.clone()));
        }
        if let Some(shadow) = &self.ema.shadow {
            for (name, v) in params.names().iter().zip(shadow) {
                arrays.push((format!("ema/{name}"), v.clone()));
            }
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                config: config_text.to_string(),
                seed: self.seed,
                step: self.step,
                meta: serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
            },
            arrays,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: Meta = serde_json::from_value(ckpt.header.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let mut model = Model::new(&meta.spec, &meta.model, &mut split(ckpt.header.seed, INIT_STREAM))?;
        let names = model.params().names().to_vec();
        let fetch = |prefix: &str, name: &str, like: &Tensor| -> Result<Tensor> {
            let key = format!("{prefix}/{name}");
            let t = ckpt
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!(
                    "array {key} has shape {:?}, model expects {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t.clone())
        };
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut shadow = Vec::new();
        for (i, name) in names.iter().enumerate() {
            let like = model.params().get(i).clone();
            model.params_mut().values_mut()[i] = fetch("param", name, &like)?;
            first.push(fetch("adam_m", name, &like)?);
            second.push(fetch("adam_v", name, &like)?);
            if meta.has_ema {
                shadow.push(fetch("ema", name, &like)?);
            }
        }
        let expected = names.len() * if meta.has_ema { 4 } else { 3 };
        if ckpt.arrays.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} arrays stored, model needs {expected}",
                ckpt.arrays.len()
            )));
        }
        let mut ema = Ema::new(meta.ema_decay)?;
        ema.shadow = meta.has_ema.then_some(shadow);
        Ok(Self {
            spec: meta.spec,
            model_config: meta.model,
            objective: meta.objective,
            model,
            optimizer: AdamW {
                config: meta.adamw,
                step_count: meta.optimizer_step,
                first_moment: first,
                second_moment: second,
            },
            ema,
            step: ckpt.header.step,
            seed: ckpt.header.seed,
            sizes: meta.sizes,
        })
    }
}

struct Batch {
    xt: Tensor,
    t: Vec<f64>,
    /// Conditional velocities (baseline objective only).
    velocity: Tensor,
    targets: LossTargets,
}

/// Why a training loop returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    Plateau,
}

/// Run until `cfg.total_steps` (or a loss plateau), calling `on_step` after
/// every update.
pub fn train_loop<F>(state: &mut TrainState, data: &[Item], cfg: &TrainConfig, mut on_step: F) -> Result<StopReason>
where
    F: FnMut(&StepRecord, &TrainState) -> Result<()>,
{
    cfg.validate()?;
    let window = cfg.plateau_window as usize;
    let mut recent: Vec<f64> = Vec::new();
    let mut previous_mean: Option<f64> = None;
    while state.step < cfg.total_steps {
        let record = state.step(data, cfg)?;
        on_step(&record, state)?;
        if window > 0 {
            recent.push(record.loss);
            if recent.len() == window {
                let mean = recent.iter().sum::<f64>() / window as f64;
                recent.clear();
                if previous_mean.is_some_and(|p| mean >= p) {
                    return Ok(StopReason::Plateau);
                }
                previous_mean = Some(mean);
            }
        }
    }
    Ok(StopReason::Budget)
}
