//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|, floor)`
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

pub const DEFAULT_STEP: f64 = 1e-5;
const SCALE_FLOOR: f64 = 1e-8;

/// Check every input coordinate of a scalar function.
///
/// `f` builds the scalar from leaves placed on a fresh tape; it is called
/// once for the analytic pass and twice per coordinate for the numeric one.
pub fn check_gradient<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let mut numeric = Vec::with_capacity(inputs.len());
    for (k, x) in inputs.iter().enumerate() {
        let mut g = vec![0.0; x.len()];
        for (j, slot) in g.iter_mut().enumerate() {
            *slot = central_difference(&f, inputs, k, j, h)?;
        }
        numeric.push(g);
    }
    Ok(compare(
        analytic.iter().map(|t| t.data()),
        numeric.iter().map(Vec::as_slice),
    ))
}

/// Check a subset of coordinates plus one random direction.
///
/// `coords` lists `(input index, flat element index)` pairs; `direction`
/// (one tensor per input) is compared through the directional derivative.
pub fn check_gradient_sampled<F>(
    f: F,
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    direction: &[Tensor],
    h: f64,
) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let mut a = Vec::with_capacity(coords.len() + 1);
    let mut n = Vec::with_capacity(coords.len() + 1);
    for &(k, j) in coords {
        a.push(analytic[k].data()[j]);
        n.push(central_difference(&f, inputs, k, j, h)?);
    }
    let dir_analytic: f64 = analytic
        .iter()
        .zip(direction)
        .map(|(g, d)| g.data().iter().zip(d.data()).map(|(x, y)| x * y).sum::<f64>())
        .sum();
    let shifted = |sign: f64| -> Result<f64> {
        let moved: Vec<Tensor> = inputs
            .iter()
            .zip(direction)
            .map(|(x, d)| {
                let data = x.data().iter().zip(d.data()).map(|(a, b)| a + sign * h * b).collect();
                Tensor::new(x.shape().to_vec(), data)
            })
            .collect::<Result<_>>()?;
        evaluate(&f, &moved)
    };
    a.push(dir_analytic);
    n.push((shifted(1.0)? - shifted(-1.0)?) / (2.0 * h));
    Ok(compare(std::iter::once(a.as_slice()), std::iter::once(n.as_slice())))
}

fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &leaves)?;
    tape.backward(out)?;
    Ok(leaves
        .iter()
        .zip(inputs)
        .map(|(l, x)| l.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect())
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    f(&tape, &leaves)?.item()
}

fn central_difference<F>(f: &F, inputs: &[Tensor], k: usize, j: usize, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut moved = inputs.to_vec();
    let x0 = moved[k].data()[j];
    moved[k].data_mut()[j] = x0 + h;
    let plus = evaluate(f, &moved)?;
    moved[k].data_mut()[j] = x0 - h;
    let minus = evaluate(f, &moved)?;
    Ok((plus - minus) / (2.0 * h))
}

fn compare<'a>(analytic: impl Iterator<Item = &'a [f64]>, numeric: impl Iterator<Item = &'a [f64]>) -> GradCheck {
    let (mut diff, mut scale) = (0.0f64, SCALE_FLOOR);
    for (a, n) in analytic.zip(numeric) {
        for (x, y) in a.iter().zip(n) {
            diff = diff.max((x - y).abs());
            scale = scale.max(x.abs()).max(y.abs());
        }
    }
    GradCheck {
        max_rel_err: diff / scale,
        max_abs_err: diff,
    }
}
