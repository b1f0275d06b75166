//! Fixed-step ODE and SDE integration of the learned field.
//!
//! The deterministic field is `v = (mu - x) / (1 - t + eps)` where `mu` is
//! the predicted endpoint mean. The stochastic sampler adds
//! `g^2 / 2 * s` with the score `s = -(x - t mu) / (1 - t)^2` of the
//! straight-line path and Brownian increments scaled by `g`; its final step
//! is taken without score or noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::objectives::Objective;
use crate::paths::{posterior_oracle, FiniteDataset, StatePoint};
use crate::rng::split;
use crate::state::{DataSpec, Item, SizeHistogram, StateLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Midpoint,
    Rk4,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Euler, Scheme::Midpoint, Scheme::Rk4];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Midpoint => "midpoint",
            Scheme::Rk4 => "rk4",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name).ok_or_else(|| {
            invalid(format!(
                "unknown scheme '{name}' (expected one of: euler, midpoint, rk4)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub n_steps: usize,
    pub scheme: Scheme,
    pub eps_denom: f64,
    /// Constant diffusion coefficient; 0 gives the deterministic sampler.
    pub g: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            n_steps: 200,
            scheme: Scheme::Euler,
            eps_denom: 1e-5,
            g: 0.0,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(invalid("integrator.n_steps must be >= 1"));
        }
        if !(self.eps_denom >= 0.0 && self.eps_denom.is_finite()) {
            return Err(invalid("integrator.eps_denom must be finite and >= 0"));
        }
        if !(self.g >= 0.0 && self.g.is_finite()) {
            return Err(invalid("integrator.g must be finite and >= 0"));
        }
        Ok(())
    }

    /// `t_k = k / n_steps`.
    pub fn grid(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| k as f64 / self.n_steps as f64).collect()
    }
}

/// What a field's raw evaluation means.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    /// Predicted endpoint mean `mu`.
    Endpoint,
    /// Velocity used as is.
    Velocity,
}

/// Something the integrators can query for a batch `[B, dim]` of states.
pub trait Field {
    fn kind(&self) -> FieldKind;
    fn eval(&self, layout: &StateLayout, t: f64, x: &Tensor) -> Result<Tensor>;
}

/// A trained model read according to its objective.
pub struct ModelField<'a> {
    pub model: &'a Model,
    pub objective: Objective,
}

impl Field for ModelField<'_> {
    fn kind(&self) -> FieldKind {
        match self.objective {
            Objective::FmBaseline => FieldKind::Velocity,
            _ => FieldKind::Endpoint,
        }
    }

    fn eval(&self, layout: &StateLayout, t: f64, x: &Tensor) -> Result<Tensor> {
        let ts = vec![t; x.shape()[0]];
        match self.objective {
            Objective::FmBaseline => self.model.evaluate(layout, x, &ts),
            obj => self.model.predict_endpoints(obj, layout, x, &ts),
        }
    }
}

/// Exact posterior marginals of a finite table dataset.
pub struct OracleField<'a> {
    pub dataset: &'a FiniteDataset,
}

impl Field for OracleField<'_> {
    fn kind(&self) -> FieldKind {
        FieldKind::Endpoint
    }

    fn eval(&self, _layout: &StateLayout, t: f64, x: &Tensor) -> Result<Tensor> {
        let dim = self.dataset.space().total_dim();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(dim) {
            let post = posterior_oracle(self.dataset, &StatePoint::new(t.min(1.0 - 1e-12), row.to_vec())?)?;
            out.extend_from_slice(&post.marginals);
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

/// `(mu - x) / (1 - t + eps)`.
pub fn variational_velocity(t: f64, x: &[f64], mu: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != mu.len() {
        return Err(invalid(format!(
            "state of length {} vs endpoint of length {}",
            x.len(),
            mu.len()
        )));
    }
    let denom = 1.0 - t + eps;
    if denom <= 0.0 {
        return Err(invalid(format!("1 - t + eps = {denom} is not positive")));
    }
    Ok(x.iter().zip(mu).map(|(a, m)| (m - a) / denom).collect())
}

/// Score `-(x - t mu) / (1 - t)^2` of the straight-line path given the
/// endpoint mean `mu`.
pub fn variational_score(t: f64, x: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
    if t >= 1.0 {
        return Err(invalid("score is undefined at t = 1"));
    }
    let c = (1.0 - t).powi(2);
    Ok(x.iter().zip(mu).map(|(a, m)| -(a - t * m) / c).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub final_item: Item,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }
}

/// Drift, and the endpoint mean behind it, for a batch.
fn drift(
    field: &dyn Field,
    layout: &StateLayout,
    mask: &[f64],
    t: f64,
    x: &Tensor,
    eps: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let raw = field.eval(layout, t, x)?;
    if raw.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "field",
            lhs: raw.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let dim = layout.dim();
    let mut v = Vec::with_capacity(x.len());
    let mut mu = Vec::with_capacity(x.len());
    for (xr, rr) in x.data().chunks(dim).zip(raw.data().chunks(dim)) {
        for ((xv, rv), m) in xr.iter().zip(rr).zip(mask) {
            let (vel, end) = match field.kind() {
                FieldKind::Endpoint => ((rv - xv) / (1.0 - t + eps), *rv),
                FieldKind::Velocity => (*rv, xv + (1.0 - t) * rv),
            };
            v.push(m * vel);
            mu.push(m * end);
        }
    }
    Ok((v, mu))
}

fn axpy(x: &Tensor, a: f64, v: &[f64]) -> Tensor {
    let data = x.data().iter().zip(v).map(|(xi, vi)| xi + a * vi).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same length")
}

fn check_finite(x: &Tensor, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("state at integration step {step}")))
    }
}

/// Integrate a batch of trajectories sharing one layout. `noise_rngs` (one
/// per trajectory) drive the Brownian increments when `cfg.g > 0`.
/// `on_state` sees the state after every step.
pub fn integrate_batch<R: Rng>(
    field: &dyn Field,
    layout: &StateLayout,
    x0: Tensor,
    cfg: &IntegratorConfig,
    noise_rngs: &mut [R],
    mut on_state: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    cfg.validate()?;
    let dim = layout.dim();
    if x0.rank() != 2 || x0.shape()[1] != dim {
        return Err(invalid(format!(
            "initial states of shape {:?} for dim {dim}",
            x0.shape()
        )));
    }
    let b = x0.shape()[0];
    let stochastic = cfg.g > 0.0;
    if stochastic && noise_rngs.len() != b {
        return Err(invalid(format!(
            "{} noise streams for {b} trajectories",
            noise_rngs.len()
        )));
    }
    let mask = layout.state_mask();
    let n = cfg.n_steps;
    let h = 1.0 / n as f64;
    let eps = cfg.eps_denom;
    let mut x = x0;
    check_finite(&x, 0)?;
    on_state(0, &x);
    for k in 0..n {
        let t = k as f64 / n as f64;
        let last = k + 1 == n;
        if stochastic && !last {
            let (v, mu) = drift(field, layout, &mask, t, &x, eps)?;
            let c = cfg.g * cfg.g / 2.0 / (1.0 - t).powi(2);
            let sq = cfg.g * h.sqrt();
            let mut data = x.data().to_vec();
            for (row, (rng, (vr, mr))) in data
                .chunks_mut(dim)
                .zip(noise_rngs.iter_mut().zip(v.chunks(dim).zip(mu.chunks(dim))))
            {
                let dw = layout.noise(rng);
                for j in 0..dim {
                    let score = -(row[j] - t * mr[j]) * mask[j];
                    row[j] += h * (vr[j] + c * score) + sq * dw[j];
                }
            }
            x = Tensor::new(x.shape().to_vec(), data)?;
        } else {
            x = match cfg.scheme {
                Scheme::Euler => {
                    let (v, _) = drift(field, layout, &mask, t, &x, eps)?;
                    axpy(&x, h, &v)
                }
                Scheme::Midpoint => {
                    let (k1, _) = drift(field, layout, &mask, t, &x, eps)?;
                    let (k2, _) = drift(field, layout, &mask, t + h / 2.0, &axpy(&x, h / 2.0, &k1), eps)?;
                    axpy(&x, h, &k2)
                }
                Scheme::Rk4 => {
                    let (k1, _) = drift(field, layout, &mask, t, &x, eps)?;
                    let (k2, _) = drift(field, layout, &mask, t + h / 2.0, &axpy(&x, h / 2.0, &k1), eps)?;
                    let (k3, _) = drift(field, layout, &mask, t + h / 2.0, &axpy(&x, h / 2.0, &k2), eps)?;
                    let (k4, _) = drift(field, layout, &mask, t + h, &axpy(&x, h, &k3), eps)?;
                    let combined: Vec<f64> = (0..k1.len())
                        .map(|i| (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0)
                        .collect();
                    axpy(&x, h, &combined)
                }
            };
        }
        check_finite(&x, k + 1)?;
        on_state(k + 1, &x);
    }
    Ok(x)
}

/// Deterministic trajectory from one initial state, keeping every state.
pub fn integrate_ode(
    field: &dyn Field,
    layout: &StateLayout,
    x0: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let cfg = IntegratorConfig { g: 0.0, ..cfg.clone() };
    integrate_one::<rand_chacha::ChaCha8Rng>(field, layout, x0, &cfg, None)
}

/// Stochastic trajectory from one initial state, keeping every state.
pub fn integrate_sde(
    field: &dyn Field,
    layout: &StateLayout,
    x0: &[f64],
    cfg: &IntegratorConfig,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    integrate_one(field, layout, x0, cfg, Some(rng))
}

fn integrate_one<R: Rng>(
    field: &dyn Field,
    layout: &StateLayout,
    x0: &[f64],
    cfg: &IntegratorConfig,
    rng: Option<&mut R>,
) -> Result<Trajectory> {
    let x0 = Tensor::new(vec![1, x0.len()], x0.to_vec())?;
    let mut states = Vec::with_capacity(cfg.n_steps + 1);
    let record = |_: usize, x: &Tensor| states.push(x.data().to_vec());
    let rngs: &mut [&mut R] = &mut rng.into_iter().collect::<Vec<_>>();
    let fin = integrate_batch(field, layout, x0, cfg, rngs, record)?;
    Ok(Trajectory {
        times: cfg.grid(),
        states,
        final_item: layout.decode(fin.data())?,
    })
}

/// Largest number of trajectories evaluated together.
const MAX_CHUNK: usize = 1024;

/// `n` samples; trajectory `i` uses the stream `split(seed, i)` for its size,
/// its initial state and its Brownian increments.
pub fn batch_sample(
    field: &dyn Field,
    spec: &DataSpec,
    sizes: &SizeHistogram,
    n: usize,
    cfg: &IntegratorConfig,
    seed: u64,
) -> Result<Vec<Item>> {
    if n == 0 {
        return Err(invalid("number of samples must be >= 1"));
    }
    cfg.validate()?;
    let mut rngs: Vec<_> = (0..n as u64).map(|i| split(seed, i)).collect();
    let mut plan: std::collections::BTreeMap<usize, Vec<(usize, Vec<f64>)>> = Default::default();
    for (i, rng) in rngs.iter_mut().enumerate() {
        let size = sizes.sample(rng);
        let x0 = spec.layout(size)?.noise(rng);
        plan.entry(size).or_default().push((i, x0));
    }
    let mut out: Vec<Option<Item>> = vec![None; n];
    for (size, members) in plan {
        let layout = spec.layout(size)?;
        for chunk in members.chunks(MAX_CHUNK) {
            let dim = layout.dim();
            let data: Vec<f64> = chunk.iter().flat_map(|(_, x)| x.iter().copied()).collect();
            let x0 = Tensor::new(vec![chunk.len(), dim], data)?;
            let mut chunk_rngs: Vec<_> = chunk.iter().map(|(i, _)| rngs[*i].clone()).collect();
            let fin = integrate_batch(field, &layout, x0, cfg, &mut chunk_rngs, |_, _| {})?;
            for ((i, _), row) in chunk.iter().zip(fin.data().chunks(dim)) {
                out[*i] = Some(layout.decode(row)?);
            }
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every index planned")).collect())
}
