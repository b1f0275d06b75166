//! Every differentiable tape op with a representative input configuration,
//! for finite-difference sweeps.

use rand::Rng;

use super::gradcheck::{check_gradient, DEFAULT_STEP};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

#[derive(Clone, Copy)]
pub struct RegisteredOp {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    /// Inputs are drawn uniformly from this interval.
    pub domain: (f64, f64),
    pub apply: OpFn,
}

const FULL: (f64, f64) = (-2.0, 2.0);
/// Positive part of the standard interval, for ops defined on `x > 0`.
const POSITIVE: (f64, f64) = (0.1, 2.0);

macro_rules! op {
    ($name:literal, $shapes:expr, $domain:expr, |$t:ident, $v:ident| $body:expr) => {
        RegisteredOp {
            name: $name,
            shapes: $shapes,
            domain: $domain,
            apply: {
                fn f<'t>($t: &'t Tape, $v: &[Var<'t>]) -> Result<Var<'t>> {
                    let _ = $t;
                    $body
                }
                f
            },
        }
    };
}

pub fn registered_ops() -> Vec<RegisteredOp> {
    vec![
        op!("add", &[&[3, 4], &[3, 4]], FULL, |t, v| v[0].add(v[1])),
        op!("add_broadcast", &[&[2, 3, 4], &[4]], FULL, |t, v| v[0].add(v[1])),
        op!("sub", &[&[3, 4], &[3, 4]], FULL, |t, v| v[0].sub(v[1])),
        op!("mul", &[&[3, 4], &[3, 4]], FULL, |t, v| v[0].mul(v[1])),
        op!("mul_broadcast", &[&[2, 3, 4], &[3, 4]], FULL, |t, v| v[0].mul(v[1])),
        op!("scale", &[&[5]], FULL, |t, v| Ok(v[0].scale(-1.7))),
        op!("add_scalar", &[&[5]], FULL, |t, v| Ok(v[0].add_scalar(0.3))),
        op!("neg", &[&[5]], FULL, |t, v| Ok(v[0].neg())),
        op!("exp", &[&[6]], FULL, |t, v| Ok(v[0].exp())),
        op!("log", &[&[6]], POSITIVE, |t, v| Ok(v[0].log())),
        op!("sqrt", &[&[6]], POSITIVE, |t, v| Ok(v[0].sqrt())),
        op!("square", &[&[6]], FULL, |t, v| Ok(v[0].square())),
        op!("silu", &[&[6]], FULL, |t, v| Ok(v[0].silu())),
        op!("relu", &[&[6]], FULL, |t, v| Ok(v[0].relu())),
        op!("tanh", &[&[6]], FULL, |t, v| Ok(v[0].tanh())),
        op!("clamp_min", &[&[6]], FULL, |t, v| Ok(v[0].clamp_min(-0.5))),
        op!("matmul", &[&[3, 4], &[4, 5]], FULL, |t, v| v[0].matmul(v[1])),
        op!("matmul_leading", &[&[2, 3, 4], &[4, 2]], FULL, |t, v| v[0].matmul(v[1])),
        op!("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], FULL, |t, v| v[0]
            .matmul(v[1])),
        op!("sum", &[&[3, 4]], FULL, |t, v| Ok(v[0].sum())),
        op!("mean", &[&[3, 4]], FULL, |t, v| Ok(v[0].mean())),
        op!("sum_axis", &[&[2, 3, 4]], FULL, |t, v| v[0].sum_axis(1)),
        op!("mean_axis", &[&[2, 3, 4]], FULL, |t, v| v[0].mean_axis(0)),
        op!("max_axis", &[&[2, 5, 3]], FULL, |t, v| v[0].max_axis(1)),
        op!("min_axis", &[&[2, 5, 3]], FULL, |t, v| v[0].min_axis(2)),
        op!("std_axis", &[&[2, 5, 3]], FULL, |t, v| v[0].std_axis(1)),
        op!("softmax", &[&[3, 5]], FULL, |t, v| v[0].softmax()),
        op!("log_softmax", &[&[3, 5]], FULL, |t, v| v[0].log_softmax()),
        op!("segment_log_softmax", &[&[2, 7]], FULL, |t, v| v[0]
            .segment_log_softmax(&[3, 4])),
        op!("normalize_last", &[&[3, 6]], FULL, |t, v| v[0].normalize_last(1e-5)),
        op!("concat", &[&[2, 3, 2], &[2, 1, 2]], FULL, |t, v| t
            .concat(&[v[0], v[1]], 1)),
        op!("permute", &[&[2, 3, 4]], FULL, |t, v| v[0].permute(&[2, 0, 1])),
        op!("transpose", &[&[3, 4]], FULL, |t, v| v[0].transpose()),
        op!("reshape", &[&[3, 4]], FULL, |t, v| v[0].reshape(&[2, 6])),
        op!("repeat_axis", &[&[2, 3]], FULL, |t, v| v[0].repeat_axis(1, 4)),
    ]
}

/// Worst relative error over `trials` random draws. Each trial contracts the
/// op's output with a random weight tensor so every output entry matters.
pub fn check_registered(op: &RegisteredOp, trials: usize, rng: &mut impl Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let inputs: Vec<Tensor> = op
            .shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|_| rng.random_range(op.domain.0..op.domain.1)).collect();
                Tensor::new(s.to_vec(), data)
            })
            .collect::<Result<_>>()?;
        let out_shape = {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            (op.apply)(&tape, &vars)?.shape()
        };
        let n: usize = out_shape.iter().product();
        let weights = Tensor::new(out_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let apply = op.apply;
        let check = check_gradient(
            |tape, vars| {
                let w = tape.constant(weights.clone());
                Ok(apply(tape, vars)?.mul(w)?.sum())
            },
            &inputs,
            DEFAULT_STEP,
        )?;
        worst = worst.max(check.max_rel_err);
    }
    Ok(worst)
}
