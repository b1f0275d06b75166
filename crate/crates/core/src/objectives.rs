//! Training objectives.
//!
//! * CatFlow: per-variable cross-entropy between the predicted marginals and
//!   the one-hot endpoint.
//! * Gaussian VFM: half squared error between a predicted endpoint mean and
//!   the endpoint.
//! * Flow-matching baseline: squared error between a predicted velocity and
//!   the straight-line conditional velocity.
//!
//! Each objective exists as a plain evaluation on `f64` slices and as a
//! batched, differentiable version on a [`Tape`]. Batched losses are summed
//! over variables and averaged over the batch.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::paths::{conditional_velocity, interpolate, posterior_oracle, CategoricalSpace, FiniteDataset, StatePoint};
use crate::rng::standard_normal;

/// Probability floor applied inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Catflow,
    GaussianVfm,
    FmBaseline,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Catflow, Objective::GaussianVfm, Objective::FmBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Catflow => "catflow",
            Objective::GaussianVfm => "gaussian_vfm",
            Objective::FmBaseline => "fm_baseline",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|o| o.name() == name).ok_or_else(|| {
            invalid(format!(
                "unknown objective {name:?}; expected catflow, gaussian_vfm or fm_baseline"
            ))
        })
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-variable probability vectors, concatenated in space order.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMarginals {
    space: CategoricalSpace,
    mu: Vec<f64>,
}

impl PosteriorMarginals {
    pub fn new(space: CategoricalSpace, mu: Vec<f64>) -> Result<Self> {
        if mu.len() != space.total_dim() {
            return Err(invalid(format!(
                "{} marginal entries for dimension {}",
                mu.len(),
                space.total_dim()
            )));
        }
        for d in 0..space.n_vars() {
            let block = &mu[space.block(d)];
            if block.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(invalid(format!(
                    "marginal block {d} has negative or non-finite entries"
                )));
            }
            let s: f64 = block.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("marginal block {d} sums to {s}")));
            }
        }
        Ok(Self { space, mu })
    }

    pub fn uniform(space: CategoricalSpace) -> Self {
        let mut mu = vec![0.0; space.total_dim()];
        for d in 0..space.n_vars() {
            let k = space.classes()[d] as f64;
            mu[space.block(d)].iter_mut().for_each(|m| *m = 1.0 / k);
        }
        Self { space, mu }
    }

    pub fn space(&self) -> &CategoricalSpace {
        &self.space
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn block(&self, d: usize) -> &[f64] {
        &self.mu[self.space.block(d)]
    }
}

/// A scalar loss in nats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub kind: Objective,
    /// Target probabilities raised to the floor.
    pub clamped: usize,
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(invalid(format!("{what}: length {a} vs {b}")));
    }
    Ok(())
}

/// `-sum_d log mu^d[x1^d]` with the probability floor.
pub fn catflow_loss(mu: &PosteriorMarginals, x1: &[f64]) -> Result<LossValue> {
    same_len(mu.mu.len(), x1.len(), "catflow_loss")?;
    let (mut value, mut clamped) = (0.0, 0);
    for d in 0..mu.space.n_vars() {
        let r = mu.space.block(d);
        let target = &x1[r.clone()];
        let hot: Vec<usize> = (0..target.len()).filter(|&k| target[k] == 1.0).collect();
        if hot.len() != 1 || target.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(invalid(format!("target block {d} is not one-hot")));
        }
        let p = mu.mu[r.start + hot[0]];
        if p < PROB_FLOOR {
            clamped += 1;
        }
        value -= p.max(PROB_FLOOR).ln();
    }
    Ok(LossValue {
        value,
        kind: Objective::Catflow,
        clamped,
    })
}

/// `0.5 * ||mu - x1||^2`.
pub fn gaussian_vfm_loss(mu: &[f64], x1: &[f64]) -> Result<LossValue> {
    same_len(mu.len(), x1.len(), "gaussian_vfm_loss")?;
    let value = 0.5 * mu.iter().zip(x1).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    Ok(LossValue {
        value,
        kind: Objective::GaussianVfm,
        clamped: 0,
    })
}

/// `||v - (x1 - x) / (1 - t)||^2`.
pub fn fm_baseline_loss(v: &[f64], t: f64, x: &[f64], x1: &[f64]) -> Result<LossValue> {
    same_len(v.len(), x.len(), "fm_baseline_loss")?;
    let u = conditional_velocity(t, x, x1)?;
    let value = v.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(LossValue {
        value,
        kind: Objective::FmBaseline,
        clamped: 0,
    })
}

/// Velocity induced by an endpoint mean: `(mu - x) / (1 - t)`.
pub fn velocity_from_endpoint(mu: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>> {
    conditional_velocity(t, x, mu)
}

/// Gap between the Gaussian variational negative log-likelihood (constant
/// removed) and the flow-matching loss of the velocity it induces.
///
/// The Gaussian has covariance `(1 - t)^2 / 2 * I`, which makes the two
/// objectives coincide.
pub fn gaussian_vfm_residual(mu: &[f64], x: &[f64], x1: &[f64], t: f64) -> Result<f64> {
    gaussian_vfm_residual_with_variance(mu, x, x1, t, (1.0 - t).powi(2) / 2.0)
}

/// [`gaussian_vfm_residual`] with an arbitrary isotropic Gaussian variance; only
/// `(1 - t)^2 / 2` makes the residual vanish.
pub fn gaussian_vfm_residual_with_variance(mu: &[f64], x: &[f64], x1: &[f64], t: f64, var: f64) -> Result<f64> {
    same_len(mu.len(), x1.len(), "gaussian_vfm_residual")?;
    if !(0.0..1.0).contains(&t) {
        return Err(invalid(format!("gaussian_vfm_residual needs 0 <= t < 1, got {t}")));
    }
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
    if !(var > 0.0) {
        return Err(invalid(format!("variance must be positive, got {var}")));
    }
    let log_norm = 0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let nll: f64 = x1
        .iter()
        .zip(mu)
        .map(|(a, m)| (a - m).powi(2) / (2.0 * var) + log_norm)
        .sum();
    let constant = mu.len() as f64 * log_norm;
    let v = velocity_from_endpoint(mu, t, x)?;
    let fm = fm_baseline_loss(&v, t, x, x1)?.value;
    Ok(((nll - constant) - fm).abs())
}

/// Per-coordinate batch weights and targets shared by the tape losses.
#[derive(Clone, Debug)]
pub struct LossTargets {
    /// `[B, dim]` endpoint `x1`.
    pub x1: Tensor,
    /// `[B, dim]` weight of each coordinate (0 excludes it).
    pub weights: Tensor,
    /// Block sizes tiling each row.
    pub segments: Vec<usize>,
}

fn check_targets(out: &Var<'_>, targets: &LossTargets) -> Result<usize> {
    let shape = out.shape();
    if shape != targets.x1.shape() || shape != targets.weights.shape() || shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: shape,
            rhs: targets.x1.shape().to_vec(),
        });
    }
    Ok(shape[0])
}

/// Batched CatFlow loss from logits; returns the loss and the clamp count.
pub fn catflow_loss_tape<'t>(tape: &'t Tape, logits: Var<'t>, targets: &LossTargets) -> Result<(Var<'t>, usize)> {
    let b = check_targets(&logits, targets)?;
    let log_mu = logits.segment_log_softmax(&targets.segments)?;
    let floor = PROB_FLOOR.ln();
    let selector: Vec<f64> = targets
        .x1
        .data()
        .iter()
        .zip(targets.weights.data())
        .map(|(x, w)| x * w)
        .collect();
    let clamped = log_mu
        .value()
        .data()
        .iter()
        .zip(&selector)
        .filter(|(l, s)| **s != 0.0 && **l < floor)
        .count();
    let sel = tape.constant(Tensor::new(targets.x1.shape().to_vec(), selector)?);
    let loss = log_mu.clamp_min(floor).mul(sel)?.sum().scale(-1.0 / b as f64);
    Ok((loss, clamped))
}

/// Batched Gaussian VFM loss on a predicted endpoint mean.
pub fn gaussian_vfm_loss_tape<'t>(tape: &'t Tape, mu: Var<'t>, targets: &LossTargets) -> Result<Var<'t>> {
    let b = check_targets(&mu, targets)?;
    let x1 = tape.constant(targets.x1.clone());
    let w = tape.constant(targets.weights.clone());
    Ok(mu.sub(x1)?.square().mul(w)?.sum().scale(0.5 / b as f64))
}

/// Batched flow-matching loss against precomputed conditional velocities.
pub fn fm_baseline_loss_tape<'t>(
    tape: &'t Tape,
    v: Var<'t>,
    target_velocity: &Tensor,
    targets: &LossTargets,
) -> Result<Var<'t>> {
    let b = check_targets(&v, targets)?;
    let u = tape.constant(target_velocity.clone());
    let w = tape.constant(targets.weights.clone());
    Ok(v.sub(u)?.square().mul(w)?.sum().scale(1.0 / b as f64))
}

/// Monte-Carlo estimate of `E_{t,x} KL(p_t(x1|x) || prod_d q_t(x1^d|x))`.
///
/// `q` maps `(t, x)` to predicted marginals. The exact posterior comes from
/// [`posterior_oracle`]; duplicate dataset points are merged into outcomes
/// before the divergence is taken. Points are visited in a canonical order
/// so the estimate does not depend on how the dataset is listed.
pub fn vfm_kl_gap<F, R>(ds: &FiniteDataset, mut q: F, n_samples: usize, rng: &mut R) -> Result<f64>
where
    F: FnMut(f64, &[f64]) -> Result<PosteriorMarginals>,
    R: Rng,
{
    if n_samples == 0 {
        return Err(invalid("vfm_kl_gap needs n_samples >= 1"));
    }
    let space = ds.space().clone();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| ds.labels()[a].cmp(&ds.labels()[b]));
    let cumulative: Vec<f64> = order
        .iter()
        .scan(0.0, |acc, &i| {
            *acc += ds.weights()[i];
            Some(*acc)
        })
        .collect();
    let mut total = 0.0;
    for _ in 0..n_samples {
        let t: f64 = rng.random::<f64>();
        let u: f64 = rng.random::<f64>() * cumulative.last().unwrap();
        let pick = order[cumulative.partition_point(|&c| c <= u).min(order.len() - 1)];
        let x0 = standard_normal(rng, space.total_dim());
        let x = interpolate(t, &x0, &ds.points()[pick])?;
        let post = posterior_oracle(ds, &StatePoint::new(t, x.clone())?)?;
        let mut outcomes: BTreeMap<&[usize], f64> = BTreeMap::new();
        for (p, labels) in post.probs.iter().zip(ds.labels()) {
            *outcomes.entry(labels.as_slice()).or_insert(0.0) += p;
        }
        let qm = q(t, &x)?;
        if qm.space() != &space {
            return Err(invalid("variational marginals live on a different space"));
        }
        let mut kl = 0.0;
        for (labels, p) in outcomes {
            if p <= 0.0 {
                continue;
            }
            let log_q: f64 = labels
                .iter()
                .enumerate()
                .map(|(d, &k)| qm.mu()[space.index(d, k)].max(PROB_FLOOR).ln())
                .sum();
            kl += p * (p.ln() - log_q);
        }
        total += kl;
    }
    Ok(total / n_samples as f64)
}
