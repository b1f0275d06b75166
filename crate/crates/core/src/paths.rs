//! Probability-path geometry on the one-hot embedding.
//!
//! States live in `R^{sum K_d}`. The noise distribution is a standard normal
//! on that space and the interpolant is the straight line
//! `x_t = t x1 + (1 - t) x0`, so the conditional path is
//! `N(t x1, (1 - t)^2 I)`. The oracles below evaluate the exact posterior
//! over a finite dataset and the velocity and score fields it induces.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Product of `D` categorical variables with `K_d` classes each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct CategoricalSpace {
    classes: Vec<usize>,
    offsets: Vec<usize>,
}

impl CategoricalSpace {
    pub fn new(classes: Vec<usize>) -> Result<Self> {
        if classes.is_empty() {
            return Err(invalid("categorical space needs at least one variable"));
        }
        if let Some(k) = classes.iter().find(|&&k| k < 2) {
            return Err(invalid(format!("every variable needs >= 2 classes, got {k}")));
        }
        let mut offsets = Vec::with_capacity(classes.len() + 1);
        let mut acc = 0;
        for &k in &classes {
            offsets.push(acc);
            acc += k;
        }
        offsets.push(acc);
        Ok(Self { classes, offsets })
    }

    /// `n_vars` variables with `k` classes each.
    pub fn uniform(n_vars: usize, k: usize) -> Result<Self> {
        Self::new(vec![k; n_vars])
    }

    pub fn n_vars(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn total_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Flat index of class `k` of variable `d`.
    pub fn index(&self, d: usize, k: usize) -> usize {
        debug_assert!(k < self.classes[d]);
        self.offsets[d] + k
    }

    /// `(variable, class)` owning a flat index.
    pub fn locate(&self, flat: usize) -> (usize, usize) {
        let d = self.offsets.partition_point(|&o| o <= flat) - 1;
        (d, flat - self.offsets[d])
    }

    pub fn block(&self, d: usize) -> std::ops::Range<usize> {
        self.offsets[d]..self.offsets[d + 1]
    }

    /// Number of joint outcomes, saturating on overflow.
    pub fn n_outcomes(&self) -> usize {
        self.classes.iter().fold(1usize, |acc, &k| acc.saturating_mul(k))
    }

    pub fn one_hot(&self, labels: &[usize]) -> Result<Vec<f64>> {
        self.check_labels(labels)?;
        let mut x = vec![0.0; self.total_dim()];
        for (d, &k) in labels.iter().enumerate() {
            x[self.index(d, k)] = 1.0;
        }
        Ok(x)
    }

    pub fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.n_vars() {
            return Err(invalid(format!(
                "{} labels for {} variables",
                labels.len(),
                self.n_vars()
            )));
        }
        for (d, (&k, &kd)) in labels.iter().zip(&self.classes).enumerate() {
            if k >= kd {
                return Err(invalid(format!(
                    "label {k} out of range for variable {d} with {kd} classes"
                )));
            }
        }
        Ok(())
    }

    /// Per-block argmax.
    pub fn argmax(&self, x: &[f64]) -> Vec<usize> {
        (0..self.n_vars())
            .map(|d| {
                let block = &x[self.block(d)];
                let mut best = 0;
                for (k, v) in block.iter().enumerate() {
                    if *v > block[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Mixed-radix decoding of a joint outcome index (variable 0 most significant).
    pub fn outcome_labels(&self, mut index: usize) -> Vec<usize> {
        let mut labels = vec![0; self.n_vars()];
        for d in (0..self.n_vars()).rev() {
            labels[d] = index % self.classes[d];
            index /= self.classes[d];
        }
        labels
    }

    pub fn outcome_index(&self, labels: &[usize]) -> usize {
        labels.iter().zip(&self.classes).fold(0, |acc, (&l, &k)| acc * k + l)
    }
}

impl TryFrom<Vec<usize>> for CategoricalSpace {
    type Error = Error;
    fn try_from(classes: Vec<usize>) -> Result<Self> {
        Self::new(classes)
    }
}

impl From<CategoricalSpace> for Vec<usize> {
    fn from(s: CategoricalSpace) -> Self {
        s.classes
    }
}

/// Position `x` at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePoint {
    pub t: f64,
    pub x: Vec<f64>,
}

impl StatePoint {
    pub fn new(t: f64, x: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("time {t} outside [0, 1]")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state point".into()));
        }
        Ok(Self { t, x })
    }
}

/// Weighted finite set of one-hot endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDataset {
    space: CategoricalSpace,
    labels: Vec<Vec<usize>>,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Exact summation is only attempted up to this many points.
pub const MAX_ORACLE_POINTS: usize = 10_000;

impl FiniteDataset {
    /// Weights are normalized to sum to one.
    pub fn new(space: CategoricalSpace, labels: Vec<Vec<usize>>, weights: Vec<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        if labels.len() > MAX_ORACLE_POINTS {
            return Err(invalid(format!(
                "{} points exceeds the exact-oracle limit of {MAX_ORACLE_POINTS}",
                labels.len()
            )));
        }
        if weights.len() != labels.len() {
            return Err(invalid(format!(
                "{} weights for {} points",
                weights.len(),
                labels.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(invalid("weights sum to zero"));
        }
        let points = labels.iter().map(|l| space.one_hot(l)).collect::<Result<_>>()?;
        Ok(Self {
            space,
            labels,
            points,
            weights: weights.iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(space: CategoricalSpace, labels: Vec<Vec<usize>>) -> Result<Self> {
        let n = labels.len();
        Self::new(space, labels, vec![1.0; n])
    }

    pub fn space(&self) -> &CategoricalSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn labels(&self) -> &[Vec<usize>] {
        &self.labels
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Exact posterior over dataset endpoints given a state.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDistribution {
    /// Probability of each dataset point, in dataset order.
    pub probs: Vec<f64>,
    /// Posterior mean of the endpoint: block `d` holds `P(x1^d = k | x)`.
    pub marginals: Vec<f64>,
}

fn check_dims(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(invalid(format!("{what}: dimension {a} vs {b}")));
    }
    Ok(())
}

fn check_time_below_one(t: f64, op: &str) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(invalid(format!("{op} needs 0 <= t < 1, got {t}")));
    }
    Ok(())
}

/// `t x1 + (1 - t) x0`.
pub fn interpolate(t: f64, x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    check_dims(x0.len(), x1.len(), "interpolate")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("interpolate needs t in [0, 1], got {t}")));
    }
    Ok(x0.iter().zip(x1).map(|(a, b)| t * b + (1.0 - t) * a).collect())
}

/// Straight-line field toward `x1`: `(x1 - x) / (1 - t)`.
pub fn conditional_velocity(t: f64, x: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    check_dims(x.len(), x1.len(), "conditional_velocity")?;
    check_time_below_one(t, "conditional_velocity")?;
    let s = 1.0 / (1.0 - t);
    Ok(x.iter().zip(x1).map(|(a, b)| (b - a) * s).collect())
}

/// Score of `N(t x1, (1 - t)^2 I)` at `x`.
pub fn conditional_score(t: f64, x: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    check_dims(x.len(), x1.len(), "conditional_score")?;
    check_time_below_one(t, "conditional_score")?;
    let var = (1.0 - t).powi(2);
    Ok(x.iter().zip(x1).map(|(a, b)| -(a - t * b) / var).collect())
}

/// `log N(x; t x1, (1 - t)^2 I)`.
pub fn conditional_log_density(t: f64, x: &[f64], x1: &[f64]) -> f64 {
    let var = (1.0 - t).powi(2);
    let sq: f64 = x.iter().zip(x1).map(|(a, b)| (a - t * b).powi(2)).sum();
    -0.5 * sq / var - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * var).ln()
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log p_t(x) = log sum_i w_i N(x; t x1_i, (1 - t)^2 I)`.
pub fn marginal_log_density(ds: &FiniteDataset, t: f64, x: &[f64]) -> Result<f64> {
    check_dims(x.len(), ds.space.total_dim(), "marginal_log_density")?;
    check_time_below_one(t, "marginal_log_density")?;
    let terms: Vec<f64> = ds
        .points
        .iter()
        .zip(&ds.weights)
        .map(|(p, w)| w.ln() + conditional_log_density(t, x, p))
        .collect();
    Ok(log_sum_exp(&terms))
}

/// Bayes posterior over dataset points, computed in log space.
pub fn posterior_oracle(ds: &FiniteDataset, sp: &StatePoint) -> Result<PosteriorDistribution> {
    check_dims(sp.x.len(), ds.space.total_dim(), "posterior_oracle")?;
    check_time_below_one(sp.t, "posterior_oracle")?;
    let log_lik: Vec<f64> = ds
        .points
        .iter()
        .map(|p| conditional_log_density(sp.t, &sp.x, p))
        .collect();
    let log_joint: Vec<f64> = log_lik.iter().zip(&ds.weights).map(|(l, w)| l + w.ln()).collect();
    let lse = log_sum_exp(&log_joint);
    if !lse.is_finite() {
        let max_log_lik = log_lik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::PosteriorUnderflow { max_log_lik });
    }
    let probs: Vec<f64> = log_joint.iter().map(|l| (l - lse).exp()).collect();
    let mut marginals = vec![0.0; ds.space.total_dim()];
    for (p, point) in probs.iter().zip(&ds.points) {
        for (m, v) in marginals.iter_mut().zip(point) {
            *m += p * v;
        }
    }
    Ok(PosteriorDistribution { probs, marginals })
}

/// Posterior expectation of the conditional velocity.
pub fn marginal_velocity_oracle(ds: &FiniteDataset, sp: &StatePoint) -> Result<Vec<f64>> {
    let post = posterior_oracle(ds, sp)?;
    let mut v = vec![0.0; sp.x.len()];
    for (p, point) in post.probs.iter().zip(&ds.points) {
        let u = conditional_velocity(sp.t, &sp.x, point)?;
        for (acc, ui) in v.iter_mut().zip(u) {
            *acc += p * ui;
        }
    }
    Ok(v)
}

/// Posterior expectation of the conditional score, i.e. `grad_x log p_t(x)`.
pub fn marginal_score_oracle(ds: &FiniteDataset, sp: &StatePoint) -> Result<Vec<f64>> {
    let post = posterior_oracle(ds, sp)?;
    let mut s = vec![0.0; sp.x.len()];
    for (p, point) in post.probs.iter().zip(&ds.points) {
        let c = conditional_score(sp.t, &sp.x, point)?;
        for (acc, ci) in s.iter_mut().zip(c) {
            *acc += p * ci;
        }
    }
    Ok(s)
}
