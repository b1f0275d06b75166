//! Fully connected head for flat categorical tables.

use rand::Rng;

use super::layers::{time_embedding, Init, Linear};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub params: ParamSet,
    hidden: Vec<Linear>,
    out: Linear,
    dim: usize,
    time_dim: usize,
}

impl Mlp {
    pub fn new(dim: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let mut hidden = Vec::with_capacity(cfg.n_layers);
        let mut width = dim + cfg.time_embedding_dim;
        for l in 0..cfg.n_layers {
            hidden.push(Linear::new(
                &mut params,
                &format!("mlp.hidden{l}"),
                width,
                cfg.mlp_hidden,
                true,
                Init::FanIn,
                rng,
            ));
            width = cfg.mlp_hidden;
        }
        let out = Linear::new(&mut params, "mlp.out", width, dim, true, Init::Zero, rng);
        Self {
            params,
            hidden,
            out,
            dim,
            time_dim: cfg.time_embedding_dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Raw outputs `[B, dim]` for states `x` of shape `[B, dim]`.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], x: &Tensor, t: &[f64]) -> Result<Var<'t>> {
        if x.rank() != 2 || x.shape()[1] != self.dim || x.shape()[0] != t.len() {
            return Err(Error::ShapeMismatch {
                op: "mlp",
                lhs: x.shape().to_vec(),
                rhs: vec![t.len(), self.dim],
            });
        }
        let input = tape.concat(
            &[
                tape.constant(x.clone()),
                tape.constant(time_embedding(t, self.time_dim)?),
            ],
            1,
        )?;
        let mut h = input;
        for (l, layer) in self.hidden.iter().enumerate() {
            h = layer.apply(p, h)?.silu();
            if !h.value().is_finite() {
                return Err(Error::NonFinite(format!("mlp layer {l} output")));
            }
        }
        self.out.apply(p, h)
    }
}
