use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use dmft_core::activation::Activation;
use dmft_core::grid::TimeGrid;
use dmft_core::report::Thresholds;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Lazy,
    TwoLayer,
    Whitened,
    Online,
    DeepLinear,
    Eos,
}

impl Regime {
    /// Only the edge-of-stability regime runs on a discrete-step grid.
    pub fn discrete(self) -> bool {
        self == Regime::Eos
    }

    pub fn default_activation(self) -> Activation {
        match self {
            Regime::Lazy => Activation::Relu,
            Regime::TwoLayer => Activation::Tanh,
            _ => Activation::Linear,
        }
    }

    /// Regimes whose theory is exact only for linear networks.
    pub fn linear_only(self) -> bool {
        matches!(self, Regime::Whitened | Regime::Online | Regime::DeepLinear | Regime::Eos)
    }
}

/// One run, read from a TOML file. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub regime: Regime,
    /// Master seed for saddle sampling, datasets and ensembles.
    #[serde(default)]
    pub seed: u64,
    /// Bundle directory under the output root.
    pub output_dir: String,
    pub grid: GridSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// `dt` for gradient flow, the learning rate `η` for the discrete regime.
    pub step: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub gammas: Vec<f64>,
    /// Defaults to relu for lazy, tanh for two_layer, linear otherwise.
    #[serde(default)]
    pub activation: Option<Activation>,
    #[serde(default = "default_target")]
    pub target: f64,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    /// Held-out point overlap `x·x⋆/D` (two_layer).
    #[serde(default)]
    pub test_overlap: Option<f64>,
    /// Training points `P` (lazy: one value; whitened: a sweep) or input dims `D_in` (online).
    #[serde(default)]
    pub points: Vec<usize>,
    /// Network depth, hidden layers plus readout (deep_linear).
    #[serde(default)]
    pub depth: Option<usize>,
    /// Online batch size as a multiple of `D_in`; absent means population gradients.
    #[serde(default)]
    pub batch_factor: Option<usize>,
}

fn default_target() -> f64 {
    1.0
}
fn default_input_dim() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    /// Monte Carlo samples `S` for the single-site process or the lazy `κ`.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Damping `β` of the fixed-point update.
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

fn default_mc_samples() -> usize {
    20_000
}
fn default_damping() -> f64 {
    0.4
}
fn default_tol() -> f64 {
    1e-4
}
fn default_max_iters() -> usize {
    10
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            mc_samples: default_mc_samples(),
            damping: default_damping(),
            tol: default_tol(),
            max_iters: default_max_iters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    /// Members `E` per case.
    pub size: usize,
    pub widths: Vec<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).context("parsing run config")?;
        cfg.model.activation.get_or_insert(cfg.regime.default_activation());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// The config with every default filled in, as written into the bundle.
    pub fn resolved_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn activation(&self) -> Activation {
        self.model.activation.unwrap_or(self.regime.default_activation())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        let grid = if self.regime.discrete() {
            TimeGrid::discrete(self.grid.step, self.grid.steps)?
        } else {
            TimeGrid::gradient_flow(self.grid.step, self.grid.steps)?
        };
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        self.time_grid()?;
        let m = &self.model;
        ensure!(!m.gammas.is_empty(), "model.gammas is empty");
        ensure!(m.gammas.iter().all(|g| *g > 0.0 && g.is_finite()), "model.gammas must be positive");
        ensure!(m.input_dim > 0, "model.input_dim must be positive");
        ensure!(self.ensemble.size >= 2, "ensemble.size must be at least 2");
        ensure!(!self.ensemble.widths.is_empty(), "ensemble.widths is empty");
        ensure!(self.ensemble.widths.iter().all(|&n| n > 0), "ensemble.widths must be positive");
        ensure!(self.solver.mc_samples > 0, "solver.mc_samples must be positive");
        ensure!(!self.output_dir.is_empty(), "output_dir is empty");
        let needs_points = matches!(self.regime, Regime::Lazy | Regime::Whitened | Regime::Online);
        if needs_points {
            ensure!(!m.points.is_empty() && m.points.iter().all(|&p| p > 0), "model.points is required for {:?}", self.regime);
        } else {
            ensure!(m.points.is_empty(), "model.points is not used by {:?}", self.regime);
        }
        match self.regime {
            Regime::Lazy => ensure!(m.points.len() == 1, "lazy takes a single model.points value"),
            Regime::DeepLinear => match m.depth {
                Some(d) if d >= 2 => {}
                _ => bail!("deep_linear needs model.depth >= 2"),
            },
            Regime::TwoLayer => {
                if let Some(c) = m.test_overlap {
                    ensure!((-1.0..=1.0).contains(&c), "model.test_overlap must lie in [-1, 1]");
                    ensure!(m.input_dim >= 2, "a held-out point needs input_dim >= 2");
                }
            }
            _ => {}
        }
        if self.regime.linear_only() && self.activation() != Activation::Linear {
            bail!("{:?} is solved for linear networks only", self.regime);
        }
        if self.regime == Regime::Lazy && self.activation() == Activation::Linear {
            bail!("lazy needs a nonlinear activation for a nontrivial kernel spectrum");
        }
        if m.depth.is_some() && self.regime != Regime::DeepLinear {
            bail!("model.depth is only used by deep_linear");
        }
        if m.batch_factor.is_some() && self.regime != Regime::Online {
            bail!("model.batch_factor is only used by online");
        }
        if m.test_overlap.is_some() && self.regime != Regime::TwoLayer {
            bail!("model.test_overlap is only used by two_layer");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
regime = "eos"
output_dir = "eos"
[grid]
step = 0.2
steps = 30
[model]
gammas = [1.0, 6.0]
activation = "linear"
[ensemble]
size = 20
widths = [100]
"#;

    #[test]
    fn defaults_are_filled_and_round_trip() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.solver, SolverSpec::default());
        assert_eq!(cfg.model.activation, Some(Activation::Linear));
        assert_eq!(cfg.thresholds.max_abs_z, 3.0);
        let again = RunConfig::from_toml(&cfg.resolved_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("steps = 30", "steps = 30\nstpe = 1");
        let err = format!("{:#}", RunConfig::from_toml(&bad).unwrap_err());
        assert!(err.contains("stpe"), "{err}");
        let top = format!("colour = 1\n{MINIMAL}");
        assert!(RunConfig::from_toml(&top).is_err());
    }

    #[test]
    fn regime_specific_fields_are_checked() {
        let deep = MINIMAL.replace("\"eos\"\noutput", "\"deep_linear\"\noutput");
        assert!(RunConfig::from_toml(&deep).is_err());
        assert!(RunConfig::from_toml(&deep.replace("activation", "depth = 4\nactivation")).is_ok());
        let lazy = MINIMAL.replace("\"eos\"\noutput", "\"lazy\"\noutput");
        assert!(RunConfig::from_toml(&lazy).is_err());
    }

    #[test]
    fn nonlinear_eos_is_rejected() {
        assert!(RunConfig::from_toml(&MINIMAL.replace("\"linear\"", "\"tanh\"")).is_err());
    }

    #[test]
    fn bad_grid_is_rejected() {
        assert!(RunConfig::from_toml(&MINIMAL.replace("steps = 30", "steps = 0")).is_err());
    }
}
