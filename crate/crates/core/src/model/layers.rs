//! Building blocks shared by the model heads.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::numerics::{ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    FanIn,
    Zero,
}

/// Affine map on the last axis; parameters live in a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = match init {
            Init::FanIn => (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect(),
            Init::Zero => vec![0.0; fan_in * fan_out],
        };
        let weight = params.push(
            format!("{name}.weight"),
            Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data"),
        );
        let bias = bias.then(|| params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// `x W + b` for `x` of shape `[.., fan_in]`.
    pub fn apply<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p[self.weight])?;
        match self.bias {
            Some(b) => y.add(p[b]),
            None => Ok(y),
        }
    }
}

/// Broadcast `[B, d]` to the shape of `like` (`[B, .., d]`) by repeating over
/// the middle axes.
pub fn broadcast_rows<'t>(v: Var<'t>, like: &[usize]) -> Result<Var<'t>> {
    let mut out = v;
    for (axis, &n) in like.iter().enumerate().take(like.len() - 1).skip(1) {
        out = out.repeat_axis(axis, n)?;
    }
    Ok(out)
}

/// `M1 W1 + (M1 W2) ⊙ M2 + M2`.
///
/// `m1` is `[B, a]` and `m2` is `[B, .., b]`; the conditioning rows are
/// shared across every middle axis of `m2`.
pub fn film<'t>(m1: Var<'t>, m2: Var<'t>, w1: Var<'t>, w2: Var<'t>) -> Result<Var<'t>> {
    let shape = m2.shape();
    let m1_shape = m1.shape();
    if m1_shape.len() != 2 || shape.len() < 2 || m1_shape[0] != shape[0] {
        return Err(Error::ShapeMismatch {
            op: "film",
            lhs: m1_shape,
            rhs: shape,
        });
    }
    let shift = broadcast_rows(m1.matmul(w1)?, &shape)?;
    let scale = broadcast_rows(m1.matmul(w2)?, &shape)?;
    shift.add(scale.mul(m2)?)?.add(m2)
}

/// `cat(max, min, mean, std) W` over `axis` of `x`.
pub fn pna<'t>(tape: &'t Tape, x: Var<'t>, axis: usize, w: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(Error::InvalidShape {
            op: "pna",
            shape,
            reason: format!("needs at least one element along axis {axis}"),
        });
    }
    let parts = [
        x.max_axis(axis)?,
        x.min_axis(axis)?,
        x.mean_axis(axis)?,
        x.std_axis(axis)?,
    ];
    let last = parts[0].shape().len() - 1;
    let pooled = tape.concat(&parts, last)?;
    if last == 0 {
        let width = pooled.shape()[0];
        let out = pooled.reshape(&[1, width])?.matmul(w)?;
        let out_width = out.shape()[1];
        return out.reshape(&[out_width]);
    }
    pooled.matmul(w)
}

/// Direct evaluation of [`film`] on matrices with matching rows.
pub fn film_plain(m1: &Tensor, m2: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let [a, b, c, d] = [m1, m2, w1, w2].map(|t| tape.constant(t.clone()));
    let out = film(a, b, c, d)?;
    let v = out.value().clone();
    Ok(v)
}

/// Direct evaluation of [`pna`] on a `[nodes, features]` matrix.
pub fn pna_plain(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(invalid(format!(
            "pna expects a [nodes, features] matrix, got {:?}",
            x.shape()
        )));
    }
    let tape = Tape::new();
    let out = pna(&tape, tape.constant(x.clone()), 0, tape.constant(w.clone()))?;
    let v = out.value().clone();
    Ok(v)
}

/// Sinusoidal embedding `[sin(w_k t), cos(w_k t)]` with `w_k` log-spaced in `[1, 100]`.
pub fn time_embedding(t: &[f64], dim: usize) -> Result<Tensor> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(invalid(format!("time embedding dim must be even and >= 2, got {dim}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half == 1 {
                1.0
            } else {
                100f64.powf(k as f64 / (half - 1) as f64)
            }
        })
        .collect();
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        data.extend(freqs.iter().map(|w| (w * ti).sin()));
        data.extend(freqs.iter().map(|w| (w * ti).cos()));
    }
    Tensor::new(vec![t.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn film_collapses_to_features() {
        let m1 = m(2, 2, &[0.3, -1.0, 2.0, 0.5]);
        let m2 = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let zero = Tensor::zeros(&[2, 3]);
        assert_eq!(film_plain(&m1, &m2, &zero, &zero).unwrap(), m2);
        let w = m(2, 3, &[1.0, -1.0, 0.5, 2.0, 0.0, 1.0]);
        assert_eq!(film_plain(&Tensor::zeros(&[2, 2]), &m2, &w, &w).unwrap(), m2);
    }

    #[test]
    fn pna_hand_case() {
        let x = m(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        let out = pna_plain(&x, &Tensor::eye(8)).unwrap();
        assert_eq!(out.data(), &[3.0, 3.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0]);
        assert!(pna_plain(&Tensor::zeros(&[0, 2]), &Tensor::eye(8)).is_err());
    }

    #[test]
    fn pna_single_node() {
        let x = m(1, 2, &[0.5, -2.0]);
        let out = pna_plain(&x, &Tensor::eye(8)).unwrap();
        assert_eq!(out.data(), &[0.5, -2.0, 0.5, -2.0, 0.5, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn time_embedding_at_zero() {
        let e = time_embedding(&[0.0], 4).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 1.0, 1.0]);
        assert!(time_embedding(&[0.0], 3).is_err());
    }
}
