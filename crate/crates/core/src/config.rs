//! JSON experiment configuration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::GridBox;
use crate::diffusion::{BoxPrior, DiffusionSchedule, LikelihoodWeighting};
use crate::error::{Error, Result};
use crate::io;
use crate::problems::{GridSpec, ProblemConfig};
use crate::refinement::{BandwidthRule, ProposalCorrection};
use crate::surrogate::{Activation, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![20],
            activation: Activation::Tanh,
        }
    }
}

impl NetworkConfig {
    /// Layer widths from `input` through the hidden layers to `output`.
    pub fn layer_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(output);
        dims
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementConfig {
    /// Number of `G_low` draws behind the KDE proposal (K).
    #[serde(default = "default_kde_samples")]
    pub kde_samples: usize,
    #[serde(default)]
    pub bandwidth: BandwidthRule,
    /// High-fidelity design over the range of the `G_low` draws.
    pub grid: GridSpec,
    /// Widens the draw range on each side by this fraction of its width.
    #[serde(default)]
    pub padding: f64,
    /// Lower bound on the padding, in prior-grid spacings.
    #[serde(default)]
    pub min_pad_cells: f64,
    #[serde(default)]
    pub correction: ProposalCorrection,
    /// Refined reverse-ODE labels; defaults to the design size.
    #[serde(default)]
    pub label_count: Option<usize>,
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

fn default_kde_samples() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub centers: Vec<Vec<f64>>,
    pub radius: f64,
}

/// An observation of interest, given directly or generated noise-free from a parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSpec {
    pub tag: String,
    #[serde(default)]
    pub y: Option<Vec<f64>>,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    /// Evaluation mesh for KL divergences and the density CSV.
    #[serde(default)]
    pub kl_grid: Option<GridBox>,
    #[serde(default)]
    pub modes: Option<ModeSpec>,
}

/// Source of the reference posterior used for KL divergences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    #[default]
    None,
    /// Closed-form posterior (quadratic problem only).
    Analytic,
    /// Ensemble MCMC on the reference likelihood.
    Mcmc,
}

/// Likelihood wrapped by the MCMC baseline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LikelihoodSpec {
    /// The problem's most accurate observation operator.
    #[default]
    Reference,
    /// An MLP `theta -> y` fitted to high-fidelity runs on a grid.
    Surrogate {
        grid: GridSpec,
        #[serde(default)]
        network: NetworkConfig,
        #[serde(default)]
        train: TrainConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSection {
    pub walkers: usize,
    pub burn_in: usize,
    pub n_samples: usize,
    pub stretch: f64,
    /// Walker initialization box; defaults to the prior.
    pub init: Option<BoxPrior>,
    pub likelihood: LikelihoodSpec,
}

impl Default for McmcSection {
    fn default() -> Self {
        Self {
            walkers: 10,
            burn_in: 20_000,
            n_samples: 10_000,
            stretch: 2.0,
            init: None,
            likelihood: LikelihoodSpec::Reference,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub prior_grid: GridSpec,
    /// Add observation noise to the simulated training outputs.
    #[serde(default)]
    pub noisy_training_obs: bool,
    #[serde(default)]
    pub schedule: DiffusionSchedule,
    #[serde(default)]
    pub weighting: LikelihoodWeighting,
    /// Conditional labels for `G_low` (M).
    #[serde(default = "default_label_count")]
    pub label_count: usize,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// `None` stops after the low-fidelity draw.
    #[serde(default)]
    pub refinement: Option<RefinementConfig>,
    #[serde(default)]
    pub observations: Vec<ObservationSpec>,
    #[serde(default)]
    pub reference: ReferenceKind,
    #[serde(default)]
    pub mcmc: McmcSection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_label_count() -> usize {
    2000
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn wrap(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every structural check, reported as a configuration error.
    pub fn validate(&self) -> Result<()> {
        self.problem.validate().map_err(wrap)?;
        let prior = self.problem.forward().prior().clone();
        let d = prior.dim();
        let counts = self.prior_grid.counts(&prior).map_err(wrap)?;
        if counts.iter().any(|c| *c == 0) {
            return Err(cfg_err("prior grid counts must be positive"));
        }
        self.schedule.validate().map_err(wrap)?;
        if self.label_count == 0 {
            return Err(cfg_err("label_count must be positive"));
        }
        check_network(&self.network)?;
        self.train.validate().map_err(wrap)?;
        if let Some(r) = &self.refinement {
            if r.kde_samples < 2 {
                return Err(cfg_err("refinement needs at least 2 KDE samples"));
            }
            match &r.grid {
                GridSpec::Counts(c) if c.len() != d || c.iter().any(|n| *n == 0) => {
                    return Err(cfg_err(
                        "refinement grid counts must be positive, one per parameter",
                    ))
                }
                GridSpec::Spacing(s) if s.len() != d || s.iter().any(|h| !(*h > 0.0)) => {
                    return Err(cfg_err(
                        "refinement spacing must be positive, one per parameter",
                    ))
                }
                _ => {}
            }
            if !(r.padding >= 0.0) || !r.padding.is_finite() {
                return Err(cfg_err("refinement padding must be nonnegative"));
            }
            if !(r.min_pad_cells >= 0.0) || !r.min_pad_cells.is_finite() {
                return Err(cfg_err("refinement min_pad_cells must be nonnegative"));
            }
            if r.label_count == Some(0) {
                return Err(cfg_err("refinement label_count must be positive"));
            }
            if let Some(n) = &r.network {
                check_network(n)?;
            }
            if let Some(t) = &r.train {
                t.validate().map_err(wrap)?;
            }
            if let BandwidthRule::Silverman { multiplier } = r.bandwidth {
                if !(multiplier > 0.0) {
                    return Err(cfg_err("bandwidth multiplier must be positive"));
                }
            }
        }
        let mut tags = HashSet::new();
        let q = self.problem.forward().dim_y();
        for o in &self.observations {
            if o.tag.is_empty()
                || !o
                    .tag
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(cfg_err(format!(
                    "observation tag {:?} must be [A-Za-z0-9_-]+",
                    o.tag
                )));
            }
            if !tags.insert(o.tag.as_str()) {
                return Err(cfg_err(format!("duplicate observation tag {}", o.tag)));
            }
            match (&o.y, &o.theta) {
                (Some(y), None) if y.len() == q => {}
                (None, Some(t)) if t.len() == d => {}
                _ => {
                    return Err(cfg_err(format!(
                        "observation {} needs exactly one of y (length {q}) or theta (length {d})",
                        o.tag
                    )))
                }
            }
            if let Some(g) = &o.kl_grid {
                g.validate().map_err(wrap)?;
                if g.dim() != d {
                    return Err(cfg_err(format!("kl_grid of {} has wrong dimension", o.tag)));
                }
            }
            if let Some(m) = &o.modes {
                if !(m.radius > 0.0) || m.centers.iter().any(|c| c.len() != d) {
                    return Err(cfg_err(format!("mode spec of {} is malformed", o.tag)));
                }
            }
        }
        match self.reference {
            ReferenceKind::Analytic if !matches!(self.problem, ProblemConfig::Quadratic(_)) => {
                return Err(cfg_err(
                    "an analytic reference exists only for the quadratic problem",
                ))
            }
            ReferenceKind::None => {}
            _ => {
                if self.observations.iter().any(|o| o.kl_grid.is_none()) {
                    return Err(cfg_err(
                        "KL evaluation needs a kl_grid for every observation",
                    ));
                }
            }
        }
        let m = &self.mcmc;
        if m.walkers < 2 || m.n_samples == 0 || !(m.stretch > 1.0) {
            return Err(cfg_err(
                "MCMC needs >= 2 walkers, positive samples and stretch > 1",
            ));
        }
        if let Some(b) = &m.init {
            b.validate().map_err(wrap)?;
            if b.dim() != d {
                return Err(cfg_err("MCMC init box has wrong dimension"));
            }
        }
        if let LikelihoodSpec::Surrogate {
            grid,
            network,
            train,
        } = &m.likelihood
        {
            grid.counts(&prior).map_err(wrap)?;
            check_network(network)?;
            train.validate().map_err(wrap)?;
        }
        Ok(())
    }
}

fn check_network(n: &NetworkConfig) -> Result<()> {
    if n.hidden.iter().any(|w| *w == 0) {
        return Err(cfg_err("hidden layer widths must be positive"));
    }
    Ok(())
}
