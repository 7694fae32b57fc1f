use serde::{Deserialize, Serialize};

use crate::error::{DmftError, Result};

/// Magnitude beyond which the recursion is declared divergent.
pub const DIVERGENCE_BOUND: f64 = 1e12;

/// Large-step two-layer linear training on one point with `|x|² = D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EosConfig {
    pub eta: f64,
    pub gamma: f64,
    pub target: f64,
    pub steps: usize,
    /// `K₀`; two unit-variance fields give 2.
    #[serde(default = "default_initial_kernel")]
    pub initial_kernel: f64,
}

fn default_initial_kernel() -> f64 {
    2.0
}

impl EosConfig {
    pub fn new(eta: f64, gamma: f64, target: f64, steps: usize) -> Self {
        Self {
            eta,
            gamma,
            target,
            steps,
            initial_kernel: default_initial_kernel(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DmftError::Config("steps must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(DmftError::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(DmftError::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !self.target.is_finite() || !(self.initial_kernel > 0.0) {
            return Err(DmftError::Config("target and initial kernel must be finite, kernel positive".into()));
        }
        Ok(())
    }

    /// Stability threshold `2/η` of the kernel.
    pub fn threshold(&self) -> f64 {
        2.0 / self.eta
    }
}

/// Where the kernel first reaches the stability threshold and how it settles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityDiagnostics {
    /// First step with `K_t ≥ (1 - ONSET_MARGIN)·2/η`.
    pub onset_step: Option<usize>,
    /// Mean of `K_t` over the last quarter of the run.
    pub band_mean: f64,
    /// Half the peak-to-peak range of `K_t` over the last quarter.
    pub band_amplitude: f64,
    pub threshold: f64,
}

/// Relative margin below `2/η` that counts as reaching the threshold.
pub const ONSET_MARGIN: f64 = 0.02;

impl StabilityDiagnostics {
    /// Largest relative departure of the last-quarter kernel from `2/η`.
    pub fn max_relative_offset(&self) -> f64 {
        ((self.band_mean - self.threshold).abs() + self.band_amplitude) / self.threshold
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EosTrajectory {
    pub config: EosConfig,
    pub outputs: Vec<f64>,
    pub errors: Vec<f64>,
    pub kernels: Vec<f64>,
}

impl EosTrajectory {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn diagnostics(&self) -> StabilityDiagnostics {
        let threshold = self.config.threshold();
        let onset_step = self.kernels.iter().position(|&k| k >= (1.0 - ONSET_MARGIN) * threshold);
        let tail = &self.kernels[self.len() - self.len().div_ceil(4)..];
        let band_mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let (lo, hi) = tail
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &k| (lo.min(k), hi.max(k)));
        StabilityDiagnostics {
            onset_step,
            band_mean,
            band_amplitude: 0.5 * (hi - lo),
            threshold,
        }
    }
}

/// One exact step of `(f, K)`:
/// `f' = f + ηKΔ + η²γ²Δ²f` and `K' = K + 4ηγ²Δf + η²γ²Δ²K`.
pub fn mean_field_step(f: f64, k: f64, y: f64, eta: f64, gamma: f64) -> (f64, f64) {
    let d = y - f;
    let e2 = (eta * gamma * d).powi(2);
    (f + eta * k * d + e2 * f, k + 4.0 * eta * gamma * gamma * d * f + e2 * k)
}

/// Iterates the infinite-width recursion from `f₀ = 0`, `K₀`.
pub fn iterate_mean_field(config: &EosConfig) -> Result<EosTrajectory> {
    config.validate()?;
    let (mut f, mut k) = (0.0_f64, config.initial_kernel);
    let n = config.steps;
    let (mut outputs, mut errors, mut kernels) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for step in 0..n {
        if !(f.abs() <= DIVERGENCE_BOUND && k.abs() <= DIVERGENCE_BOUND) {
            return Err(DmftError::Divergence {
                step,
                context: format!("mean field at eta {} gamma {}", config.eta, config.gamma),
            });
        }
        outputs.push(f);
        errors.push(config.target - f);
        kernels.push(k);
        (f, k) = mean_field_step(f, k, config.target, config.eta, config.gamma);
    }
    Ok(EosTrajectory {
        config: *config,
        outputs,
        errors,
        kernels,
    })
}
