//! Oracle-backed numerical checks of the identities the library relies on.
//!
//! Each check draws its own random instances from a seed and reports the
//! worst measured discrepancy against a fixed bound.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::graphs::{GraphLayout, Permutation};
use crate::model::{Model, ModelConfig};
use crate::numerics::registry::{check_registered, registered_ops};
use crate::numerics::{check_gradient_sampled, Tape, Tensor, Var};
use crate::objectives::{
    catflow_loss_tape, fm_baseline_loss, gaussian_vfm_loss, gaussian_vfm_residual_with_variance,
    velocity_from_endpoint, LossTargets, Objective,
};
use crate::paths::{
    conditional_velocity, interpolate, marginal_log_density, marginal_score_oracle, marginal_velocity_oracle,
    posterior_oracle, CategoricalSpace, FiniteDataset, StatePoint,
};
use crate::rng::{from_seed, split, standard_normal, RunRng};
use crate::sampling::{integrate_ode, variational_score, IntegratorConfig, ModelField, OracleField};
use crate::state::{DataSpec, Item, StateLayout};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst discrepancy seen (or failure count, see `bound`).
    pub measured: f64,
    /// The check passes when `measured < bound`.
    pub bound: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound,
            passed: measured < bound,
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} measured {:.3e} bound {:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.bound
        )
    }
}

/// Deliberate errors for exercising the reporting path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Use covariance `(1 - t)^2 I` instead of `(1 - t)^2 / 2 I`.
    GaussianVariance,
}

impl Fault {
    pub const ALL: [Fault; 1] = [Fault::GaussianVariance];

    pub fn name(self) -> &'static str {
        match self {
            Fault::GaussianVariance => "gaussian_vfm",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| invalid(format!("unknown fault '{name}' (expected one of: gaussian_vfm)")))
    }
}

/// Random dataset with up to `max_vars` variables of 2..=`max_classes`
/// classes and 1..=`max_points` points with random positive weights.
pub fn random_dataset(
    rng: &mut impl Rng,
    max_vars: usize,
    max_classes: usize,
    max_points: usize,
) -> Result<FiniteDataset> {
    let d = rng.random_range(1..=max_vars);
    let classes: Vec<usize> = (0..d).map(|_| rng.random_range(2..=max_classes)).collect();
    let space = CategoricalSpace::new(classes.clone())?;
    let n = rng.random_range(1..=max_points);
    let labels: Vec<Vec<usize>> = (0..n)
        .map(|_| classes.iter().map(|&k| rng.random_range(0..k)).collect())
        .collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    FiniteDataset::new(space, labels, raw.iter().map(|w| w / total).collect())
}

/// A state on the interpolation path toward a random dataset point.
fn random_state(ds: &FiniteDataset, t: f64, rng: &mut impl Rng) -> Result<StatePoint> {
    let x1 = &ds.points()[rng.random_range(0..ds.len())];
    let x0 = standard_normal(rng, x1.len());
    StatePoint::new(t, interpolate(t, &x0, x1)?)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Expected conditional velocity under the exact posterior against the
/// velocity toward the posterior marginal mean.
pub fn mean_field_velocity(n_datasets: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_datasets {
        let ds = random_dataset(&mut rng, 3, 4, 16)?;
        for _ in 0..5 {
            let t: f64 = rng.random_range(0.0..0.99);
            let sp = random_state(&ds, t, &mut rng)?;
            let full = marginal_velocity_oracle(&ds, &sp)?;
            let post = posterior_oracle(&ds, &sp)?;
            let mean_field = conditional_velocity(t, &sp.x, &post.marginals)?;
            worst = worst.max(max_abs_diff(&full, &mean_field));
        }
    }
    Ok(CheckOutcome::new("mean_field_velocity", worst, 1e-10))
}

/// Gaussian variational objective against flow matching, constant removed.
pub fn gaussian_vfm_equals_fm(n: usize, seed: u64, fault: Option<Fault>) -> Result<CheckOutcome> {
    let mut rng = from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let dim = rng.random_range(1..=8);
        let t: f64 = rng.random_range(0.0..0.99);
        let mu = standard_normal(&mut rng, dim);
        let x = standard_normal(&mut rng, dim);
        let mut x1 = vec![0.0; dim];
        x1[rng.random_range(0..dim)] = 1.0;
        let var = match fault {
            Some(Fault::GaussianVariance) => (1.0 - t).powi(2),
            None => (1.0 - t).powi(2) / 2.0,
        };
        worst = worst.max(gaussian_vfm_residual_with_variance(&mu, &x, &x1, t, var)?);
    }
    Ok(CheckOutcome::new("gaussian_vfm_equals_fm", worst, 1e-10))
}

/// `fm_loss(v(mu)) = 2 / (1 - t)^2 * gaussian_vfm_loss(mu)`, relative error.
pub fn loss_relation(n: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let dim = rng.random_range(1..=8);
        let t: f64 = rng.random_range(0.0..0.99);
        let mu = standard_normal(&mut rng, dim);
        let x = standard_normal(&mut rng, dim);
        let mut x1 = vec![0.0; dim];
        x1[rng.random_range(0..dim)] = 1.0;
        let fm = fm_baseline_loss(&velocity_from_endpoint(&mu, t, &x)?, t, &x, &x1)?.value;
        let scaled = 2.0 / (1.0 - t).powi(2) * gaussian_vfm_loss(&mu, &x1)?.value;
        worst = worst.max((fm - scaled).abs() / fm.abs().max(f64::MIN_POSITIVE));
    }
    Ok(CheckOutcome::new("fm_gaussian_loss_relation", worst, 1e-12))
}

/// Score from oracle marginals against the posterior-averaged score, and
/// the latter against finite differences of the exact log-density.
pub fn score_identity(n: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = from_seed(seed);
    let (mut via_mean, mut via_fd) = (0.0f64, 0.0f64);
    let h = 1e-5;
    for _ in 0..n {
        let ds = random_dataset(&mut rng, 3, 4, 8)?;
        let t: f64 = rng.random_range(0.05..0.95);
        let sp = random_state(&ds, t, &mut rng)?;
        let oracle = marginal_score_oracle(&ds, &sp)?;
        let post = posterior_oracle(&ds, &sp)?;
        via_mean = via_mean.max(max_abs_diff(&variational_score(t, &sp.x, &post.marginals)?, &oracle));
        let mut fd = vec![0.0; sp.x.len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let mut up = sp.x.clone();
            let mut down = sp.x.clone();
            up[j] += h;
            down[j] -= h;
            *slot = (marginal_log_density(&ds, t, &up)? - marginal_log_density(&ds, t, &down)?) / (2.0 * h);
        }
        let err: f64 = fd.iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = oracle.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        via_fd = via_fd.max(err / scale);
    }
    Ok(vec![
        CheckOutcome::new("score_from_marginal_mean", via_mean, 1e-10),
        CheckOutcome::new("score_vs_finite_difference", via_fd, 1e-5),
    ])
}

/// Small widths for checks that differentiate or permute the network.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden_node: 8,
        hidden_edge: 4,
        hidden_global: 8,
        n_heads: 2,
        time_embedding_dim: 4,
        mlp_hidden: 8,
        ..ModelConfig::default()
    }
}

/// Overwrite every parameter with `N(0, scale^2)` draws. A freshly built
/// model has a zero logit layer, which hides everything upstream of it.
pub fn randomize_params(model: &mut Model, scale: f64, rng: &mut impl Rng) {
    for p in model.params_mut().values_mut() {
        for v in p.data_mut() {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn random_batch(layout: &StateLayout, b: usize, rng: &mut RunRng) -> Result<(Tensor, Vec<f64>, LossTargets)> {
    let dim = layout.dim();
    let segments = layout.segments();
    let mask = layout.loss_mask();
    let (mut x, mut x1, mut w, mut ts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..b {
        let t = rng.random_range(0.0..1.0);
        let mut target = vec![0.0; dim];
        let mut start = 0;
        for &len in &segments {
            target[start + rng.random_range(0..len)] = 1.0;
            start += len;
        }
        let noise = layout.noise(rng);
        let state_mask = layout.state_mask();
        x.extend(
            noise
                .iter()
                .zip(&target)
                .zip(&state_mask)
                .map(|((z, y), m)| m * (t * y + (1.0 - t) * z)),
        );
        x1.extend(target);
        w.extend_from_slice(&mask);
        ts.push(t);
    }
    let targets = LossTargets {
        x1: Tensor::new(vec![b, dim], x1)?,
        weights: Tensor::new(vec![b, dim], w)?,
        segments,
    };
    Ok((Tensor::new(vec![b, dim], x)?, ts, targets))
}

/// Finite-difference steps tried for the network heads.
const KINK_STEPS: [f64; 2] = [1e-5, 1e-6];

/// Finite-difference check of the CatFlow loss gradient with respect to
/// every parameter of `model`, on `trials` random batches. Each trial probes
/// a few random coordinates and one random direction.
fn model_gradient(model: &Model, layout: &StateLayout, trials: usize, rng: &mut RunRng) -> Result<f64> {
    let inputs: Vec<Tensor> = model.params().values().to_vec();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (x, ts, targets) = random_batch(layout, 2, rng)?;
        let coords: Vec<(usize, usize)> = (0..8)
            .map(|_| {
                let k = rng.random_range(0..inputs.len());
                (k, rng.random_range(0..inputs[k].len()))
            })
            .collect();
        let direction: Vec<Tensor> = inputs
            .iter()
            .map(|p| Tensor::new(p.shape().to_vec(), standard_normal(rng, p.len())))
            .collect::<Result<_>>()?;
        // A kink (relu, max/min pooling) within one step of the point spoils
        // that step size only; a wrong gradient fails at both.
        let mut err = f64::INFINITY;
        for h in KINK_STEPS {
            let check = check_gradient_sampled(
                |tape: &Tape, p: &[Var<'_>]| {
                    let out = model.forward(tape, p, layout, &x, &ts)?;
                    Ok(catflow_loss_tape(tape, out, &targets)?.0)
                },
                &inputs,
                &coords,
                &direction,
                h,
            )?;
            err = err.min(check.max_rel_err);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Every registered tape op, then the MLP head and the graph head.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = from_seed(seed);
    let mut out = Vec::new();
    for op in registered_ops() {
        let err = check_registered(&op, trials, &mut rng)?;
        out.push(CheckOutcome::new(format!("grad_{}", op.name), err, 1e-4));
    }
    let cfg = small_model_config();
    let table = DataSpec::Table {
        classes: CategoricalSpace::new(vec![2, 3, 4])?,
    };
    let mut mlp = Model::new(&table, &cfg, &mut rng)?;
    randomize_params(&mut mlp, 0.5, &mut rng);
    let err = model_gradient(&mlp, &table.layout(3)?, trials, &mut rng)?;
    out.push(CheckOutcome::new("grad_mlp_head", err, 1e-4));
    let graphs = DataSpec::Graphs {
        node_classes: 2,
        edge_classes: 3,
    };
    let mut net = Model::new(&graphs, &cfg, &mut rng)?;
    randomize_params(&mut net, 0.5, &mut rng);
    let err = model_gradient(&net, &graphs.layout(4)?, trials, &mut rng)?;
    out.push(CheckOutcome::new("grad_graph_head", err, 1e-4));
    Ok(out)
}

/// Permutations tried at each size: all of them up to 4 nodes, a sample above.
fn permutations_for(n: usize, sampled: usize, rng: &mut impl Rng) -> Vec<Permutation> {
    if n <= 4 {
        Permutation::all(n)
    } else {
        (0..sampled).map(|_| Permutation::random(n, rng)).collect()
    }
}

/// `predict(pi x) = pi predict(x)` and the same for ODE end states, on
/// graphs of `sizes` nodes under a randomly initialized network.
pub fn equivariance(sizes: std::ops::RangeInclusive<usize>, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = from_seed(seed);
    let spec = DataSpec::Graphs {
        node_classes: 2,
        edge_classes: 3,
    };
    let mut model = Model::new(&spec, &small_model_config(), &mut rng)?;
    randomize_params(&mut model, 0.5, &mut rng);
    let field = ModelField {
        model: &model,
        objective: Objective::Catflow,
    };
    let ode = IntegratorConfig {
        n_steps: 50,
        ..IntegratorConfig::default()
    };
    let (mut worst_pred, mut worst_traj) = (0.0f64, 0.0f64);
    for n in sizes {
        let layout = spec.layout(n)?;
        let StateLayout::Graph(g) = &layout else {
            unreachable!("graph spec")
        };
        let t = rng.random_range(0.0..1.0);
        let x = layout.noise(&mut rng);
        let base = model.predict_marginals(&layout, &x, t)?;
        for p in permutations_for(n, 10, &mut rng) {
            let moved = model.predict_marginals(&layout, &permute(g, &x, &p)?, t)?;
            worst_pred = worst_pred.max(max_abs_diff(moved.mu(), &permute(g, base.mu(), &p)?));
        }
        let x0 = layout.noise(&mut rng);
        let end = integrate_ode(&field, &layout, &x0, &ode)?;
        for p in permutations_for(n, 3, &mut rng).into_iter().take(6) {
            let moved = integrate_ode(&field, &layout, &permute(g, &x0, &p)?, &ode)?;
            worst_traj = worst_traj.max(max_abs_diff(moved.final_state(), &permute(g, end.final_state(), &p)?));
        }
    }
    Ok(vec![
        CheckOutcome::new("equivariance_marginals", worst_pred, 1e-8),
        CheckOutcome::new("equivariance_trajectories", worst_traj, 1e-8),
    ])
}

fn permute(layout: &GraphLayout, x: &[f64], p: &Permutation) -> Result<Vec<f64>> {
    layout.permute_state(x, layout.n_nodes, p)
}

/// ODE trajectories driven by the exact posterior of a one-point dataset;
/// `measured` counts trajectories that decode to anything else.
pub fn oracle_sampling(n_trajectories: usize, seed: u64) -> Result<CheckOutcome> {
    let space = CategoricalSpace::new(vec![3, 2, 4])?;
    let point = vec![2, 0, 1];
    let ds = FiniteDataset::uniform(space.clone(), vec![point.clone()])?;
    let field = OracleField { dataset: &ds };
    let layout = StateLayout::Table(space);
    let cfg = IntegratorConfig::default();
    let mut misses = 0usize;
    for i in 0..n_trajectories {
        let x0 = layout.noise(&mut split(seed, i as u64));
        if integrate_ode(&field, &layout, &x0, &cfg)?.final_item != Item::Row(point.clone()) {
            misses += 1;
        }
    }
    Ok(CheckOutcome::new("oracle_ode_recovers_point", misses as f64, 1.0))
}

/// Every check at the sizes used by the `verify` command.
pub fn run_all(seed: u64, fault: Option<Fault>) -> Result<Vec<CheckOutcome>> {
    let mut out = vec![
        mean_field_velocity(100, seed)?,
        gaussian_vfm_equals_fm(1000, seed, fault)?,
        loss_relation(1000, seed)?,
    ];
    out.extend(score_identity(50, seed)?);
    out.extend(gradient_suite(100, seed)?);
    out.extend(equivariance(3..=6, seed)?);
    out.push(oracle_sampling(100, seed)?);
    Ok(out)
}
