//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use catflow::graphs::{CommunityParams, GridParams};
use catflow::metrics::ValidityRule;
use catflow::model::ModelConfig;
use catflow::numerics::AdamWConfig;
use catflow::objectives::Objective;
use catflow::sampling::IntegratorConfig;
use catflow::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_at, Result};

pub const TOY_TOTAL_STEPS: u64 = 20_000;
pub const GRAPH_TOTAL_STEPS: u64 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    CommunitySmall,
    Grid,
    Table,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub generator: Generator,
    pub n_graphs: usize,
    pub held_out: usize,
    pub node_classes: usize,
    pub edge_classes: usize,
    /// Table generator: classes per variable.
    pub classes: Vec<usize>,
    /// Table generator: joint probabilities in outcome order.
    pub probs: Vec<f64>,
    /// File generator: training records.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out_path: Option<PathBuf>,
    pub community: CommunityParams,
    pub grid: GridParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            generator: Generator::CommunitySmall,
            n_graphs: 100,
            held_out: 64,
            node_classes: 1,
            edge_classes: 2,
            classes: Vec::new(),
            probs: Vec::new(),
            path: None,
            held_out_path: None,
            community: CommunityParams::default(),
            grid: GridParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Bandwidth of the Gaussian EMD kernel.
    pub sigma: f64,
    pub rule: ValidityRule,
    pub n_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            rule: ValidityRule::TwoCommunities,
            n_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub fractions: Vec<f64>,
    pub layers: Vec<usize>,
    pub objectives: Vec<Objective>,
    /// Training steps per cell.
    pub steps: u64,
    pub n_samples: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            fractions: vec![1.0, 0.2, 0.05],
            layers: vec![2, 4],
            objectives: vec![Objective::Catflow, Objective::FmBaseline],
            steps: 5_000,
            n_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub objective: Objective,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub train: TrainConfig,
    pub integrator: IntegratorConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            objective: Objective::Catflow,
            output_dir: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            train: TrainConfig::default(),
            integrator: IntegratorConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        };
        cfg.train.total_steps = default_total_steps(cfg.dataset.generator);
        cfg
    }
}

/// Graph datasets get the longer budget unless the config names one.
pub fn default_total_steps(generator: Generator) -> u64 {
    match generator {
        Generator::Table => TOY_TOTAL_STEPS,
        _ => GRAPH_TOTAL_STEPS,
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        let raw: toml::Table = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        let steps_given = raw
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("total_steps"));
        if !steps_given {
            cfg.train.total_steps = default_total_steps(cfg.dataset.generator);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        Self::from_toml(&text)
    }

    /// Resolved configuration as TOML; parsing it back gives `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    /// As [`to_toml`](Self::to_toml) without the output directory, so that
    /// checkpoints do not depend on where a run was written.
    pub fn portable_toml(&self) -> String {
        RunConfig {
            output_dir: None,
            ..self.clone()
        }
        .to_toml()
    }

    // Negated comparisons so that NaN fails them.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit.
        if i64::try_from(self.seed).is_err() {
            return Err(invalid(format!("seed must be at most {}", i64::MAX)));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.integrator.validate()?;
        let opt = &self.optimizer;
        if !(opt.lr > 0.0 && opt.lr.is_finite()) || !(opt.weight_decay >= 0.0) {
            return Err(invalid(
                "optimizer.lr must be positive and optimizer.weight_decay nonnegative",
            ));
        }
        if !(0.0..1.0).contains(&opt.beta1) || !(0.0..1.0).contains(&opt.beta2) || !(opt.eps > 0.0) {
            return Err(invalid("optimizer betas must lie in [0, 1) and eps must be positive"));
        }
        self.validate_dataset()?;
        if !(self.eval.sigma > 0.0 && self.eval.sigma.is_finite()) {
            return Err(invalid("eval.sigma must be positive"));
        }
        if self.eval.n_samples == 0 {
            return Err(invalid("eval.n_samples must be >= 1"));
        }
        let ab = &self.ablate;
        if ab.fractions.is_empty() || ab.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(invalid("ablate.fractions must be nonempty and lie in (0, 1]"));
        }
        if ab.layers.is_empty() || ab.layers.contains(&0) {
            return Err(invalid("ablate.layers must be nonempty and >= 1"));
        }
        if ab.objectives.is_empty() || ab.steps == 0 || ab.n_samples == 0 {
            return Err(invalid(
                "ablate.objectives, ablate.steps and ablate.n_samples must be nonempty / >= 1",
            ));
        }
        Ok(())
    }

    fn validate_dataset(&self) -> Result<()> {
        let d = &self.dataset;
        match d.generator {
            Generator::CommunitySmall | Generator::Grid => {
                if d.n_graphs == 0 {
                    return Err(invalid("dataset.n_graphs must be >= 1"));
                }
                d.community.validate()?;
                if d.grid.min_side < 1 || d.grid.min_side > d.grid.max_side {
                    return Err(invalid("dataset.grid sides must satisfy 1 <= min_side <= max_side"));
                }
            }
            Generator::Table => {
                if d.classes.is_empty() || d.n_graphs == 0 {
                    return Err(invalid(
                        "table datasets need nonempty dataset.classes and n_graphs >= 1",
                    ));
                }
            }
            Generator::File => {
                if d.path.is_none() {
                    return Err(invalid("generator 'file' needs dataset.path"));
                }
            }
        }
        if d.generator != Generator::Table && (d.node_classes == 0 || d.edge_classes < 2) {
            return Err(invalid("graphs need node_classes >= 1 and edge_classes >= 2"));
        }
        Ok(())
    }
}
