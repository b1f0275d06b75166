//! Networks predicting per-variable categorical distributions.
//!
//! Both heads map a batch of flat states `[B, dim]` and times to raw outputs
//! of the same shape. How those outputs are read depends on the objective:
//! block-wise logits for CatFlow, an endpoint mean for Gaussian VFM, and a
//! velocity for the flow-matching baseline.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::tape::softmax_in_place;
use crate::numerics::{ParamSet, Tape, Tensor, Var};
use crate::objectives::{Objective, PosteriorMarginals};
use crate::state::{DataSpec, StateLayout};

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use graph::GraphTransformer;
pub use layers::{film, film_plain, pna, pna_plain, time_embedding, Init, Linear};
pub use mlp::Mlp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_node: usize,
    pub hidden_edge: usize,
    pub hidden_global: usize,
    pub n_heads: usize,
    pub time_embedding_dim: usize,
    /// Width of the table head's hidden layers.
    pub mlp_hidden: usize,
    /// Divisor applied to node counts and degrees in the graph input features.
    pub size_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden_node: 64,
            hidden_edge: 32,
            hidden_global: 64,
            n_heads: 4,
            time_embedding_dim: 32,
            mlp_hidden: 128,
            size_scale: 20.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("hidden_node", self.hidden_node),
            ("hidden_edge", self.hidden_edge),
            ("hidden_global", self.hidden_global),
            ("n_heads", self.n_heads),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("model.{name} must be >= 1")));
        }
        if !self.hidden_node.is_multiple_of(self.n_heads) {
            return Err(invalid(format!(
                "model.hidden_node ({}) must be divisible by model.n_heads ({})",
                self.hidden_node, self.n_heads
            )));
        }
        if self.time_embedding_dim < 2 || !self.time_embedding_dim.is_multiple_of(2) {
            return Err(invalid("model.time_embedding_dim must be even and >= 2"));
        }
        if !(self.size_scale > 0.0 && self.size_scale.is_finite()) {
            return Err(invalid("model.size_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Mlp(Mlp),
    Graph(GraphTransformer),
}

impl Model {
    /// Table data gets the MLP head, graph data the graph transformer.
    pub fn new(spec: &DataSpec, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(match spec {
            DataSpec::Table { classes } => Model::Mlp(Mlp::new(classes.total_dim(), cfg, rng)),
            DataSpec::Graphs {
                node_classes,
                edge_classes,
            } => {
                if *node_classes == 0 || *edge_classes < 2 {
                    return Err(invalid("graphs need >= 1 node class and >= 2 edge classes"));
                }
                Model::Graph(GraphTransformer::new(cfg, *node_classes, *edge_classes, rng))
            }
        })
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Mlp(m) => &m.params,
            Model::Graph(g) => &g.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::Mlp(m) => &mut m.params,
            Model::Graph(g) => &mut g.params,
        }
    }

    /// Raw outputs `[B, dim]` on `tape`; `p` holds the parameters in
    /// [`ParamSet`] order (leaves for training, constants for inference).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        layout: &StateLayout,
        x: &Tensor,
        t: &[f64],
    ) -> Result<Var<'t>> {
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(invalid(format!("time {bad} outside [0, 1]")));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("model input".into()));
        }
        match (self, layout) {
            (Model::Mlp(m), StateLayout::Table(space)) if space.total_dim() == m.dim() => m.forward(tape, p, x, t),
            (Model::Graph(g), StateLayout::Graph(l)) => g.forward(tape, p, l, x, t),
            _ => Err(invalid("model head does not match the state layout")),
        }
    }

    /// Gradient-free [`forward`](Self::forward).
    pub fn evaluate(&self, layout: &StateLayout, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let tape = Tape::new();
        let p: Vec<Var<'_>> = self
            .params()
            .values()
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect();
        let out = self.forward(&tape, &p, layout, x, t)?;
        let value = out.value().clone();
        if !value.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(value)
    }

    /// Endpoint predictions `[B, dim]` as read by `objective`: block softmax
    /// for CatFlow, raw means for Gaussian VFM. Errors for the baseline,
    /// whose outputs are velocities.
    pub fn predict_endpoints(
        &self,
        objective: Objective,
        layout: &StateLayout,
        x: &Tensor,
        t: &[f64],
    ) -> Result<Tensor> {
        let mut out = self.evaluate(layout, x, t)?;
        match objective {
            Objective::Catflow => {
                let segments = layout.segments();
                for row in out.data_mut().chunks_mut(layout.dim()) {
                    let mut start = 0;
                    for &len in &segments {
                        softmax_in_place(&mut row[start..start + len]);
                        start += len;
                    }
                }
                Ok(out)
            }
            Objective::GaussianVfm => Ok(out),
            Objective::FmBaseline => Err(invalid("the flow-matching baseline predicts velocities, not endpoints")),
        }
    }

    /// Categorical marginals for one state (every block, graph diagonal included).
    pub fn predict_marginals(&self, layout: &StateLayout, x: &[f64], t: f64) -> Result<PosteriorMarginals> {
        let x = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let mu = self.predict_endpoints(Objective::Catflow, layout, &x, &[t])?;
        PosteriorMarginals::new(layout.block_space(), mu.into_data())
    }
}
