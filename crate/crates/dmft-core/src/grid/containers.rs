use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::time::TimeGrid;
use crate::error::{DmftError, Result};

/// The infinite-width state: kernels, responses, errors and predictions.
///
/// Two-time kernels are stored as `PT x PT` matrices indexed by
/// [`flatten_index`](super::flatten_index) on both axes. Per-time quantities
/// (`errors`, `predictions`) are `P x T`. The NTK holds one `P x P` matrix per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderParameterSet {
    pub grid: TimeGrid,
    pub depth: usize,
    pub gamma: f64,
    pub num_samples: usize,
    pub feature_kernels: Vec<DMatrix<f64>>,
    pub gradient_kernels: Vec<DMatrix<f64>>,
    pub response_a: Vec<DMatrix<f64>>,
    pub response_b: Vec<DMatrix<f64>>,
    pub errors: DMatrix<f64>,
    pub predictions: DMatrix<f64>,
    pub ntk: Vec<DMatrix<f64>>,
    pub targets: Vec<f64>,
}

impl OrderParameterSet {
    /// Checks PSD kernels, causal responses and `Δ(0) = y - f(0)`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let pt = self.num_samples * self.grid.num_steps();
        for (l, k) in self
            .feature_kernels
            .iter()
            .chain(self.gradient_kernels.iter())
            .enumerate()
        {
            if k.nrows() != pt || k.ncols() != pt {
                return Err(DmftError::Dimension(format!("kernel {l} is not {pt}x{pt}")));
            }
            if !is_symmetric(k, tol) {
                return Err(DmftError::Config(format!("kernel {l} not symmetric")));
            }
            let scale = k.trace().abs().max(1.0);
            if min_eigenvalue(k) < -tol * scale {
                return Err(DmftError::Config(format!("kernel {l} not PSD")));
            }
        }
        let t = self.grid.num_steps();
        // A is strictly causal; B may carry an equal-time part
        let responses = self
            .response_a
            .iter()
            .map(|r| (r, 0))
            .chain(self.response_b.iter().map(|r| (r, 1)));
        for (r, offset) in responses {
            for mu in 0..self.num_samples {
                for nu in 0..self.num_samples {
                    for i in 0..t {
                        for j in (i + offset)..t {
                            if r[(mu * t + i, nu * t + j)].abs() > tol {
                                return Err(DmftError::Config("response not causal".into()));
                            }
                        }
                    }
                }
            }
        }
        for mu in 0..self.num_samples {
            let d0 = self.targets[mu] - self.predictions[(mu, 0)];
            if (d0 - self.errors[(mu, 0)]).abs() > tol {
                return Err(DmftError::Config("Δ(0) != y - f(0)".into()));
            }
        }
        Ok(())
    }
}

/// Uncoupled-variance blocks, sensitivity blocks and the assembled `U` matrix.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HessianBlocks {
    pub kappa_blocks: BTreeMap<String, DMatrix<f64>>,
    pub d_blocks: BTreeMap<String, DMatrix<f64>>,
    pub u_matrix: Option<DMatrix<f64>>,
}

impl HessianBlocks {
    /// Every κ block is symmetric under swapping its two (sample, time) index pairs.
    pub fn kappa_symmetric(&self, tol: f64) -> bool {
        self.kappa_blocks.values().all(|k| is_symmetric(k, tol))
    }

    /// Every D block is strictly lower triangular.
    pub fn d_causal(&self, tol: f64) -> bool {
        self.d_blocks.values().all(|d| is_strictly_lower(d, tol))
    }
}

/// Leading-order covariance of the order parameters; `Var ≈ Σ / N`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Propagator {
    blocks: BTreeMap<(String, String), DMatrix<f64>>,
}

impl Propagator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: &str, b: &str, block: DMatrix<f64>) {
        self.blocks.insert((a.to_string(), b.to_string()), block);
    }

    /// Block `(a, b)`, falling back to the transpose of `(b, a)`.
    pub fn block(&self, a: &str, b: &str) -> Option<DMatrix<f64>> {
        if let Some(m) = self.blocks.get(&(a.to_string(), b.to_string())) {
            return Some(m.clone());
        }
        self.blocks
            .get(&(b.to_string(), a.to_string()))
            .map(|m| m.transpose())
    }

    pub fn labels(&self) -> Vec<(String, String)> {
        self.blocks.keys().cloned().collect()
    }

    /// Diagonal of block `(a, a)`, i.e. `Σ_a(t, t)`.
    pub fn diagonal(&self, a: &str) -> Option<Vec<f64>> {
        self.block(a, a)
            .map(|m| (0..m.nrows()).map(|i| m[(i, i)]).collect())
    }

    /// `Var ≈ Σ / N` along the diagonal of block `(a, a)`.
    pub fn variance(&self, a: &str, width: usize) -> Option<Vec<f64>> {
        self.diagonal(a)
            .map(|d| d.into_iter().map(|v| v / width as f64).collect())
    }

    /// Symmetry of every stored pair and PSD of the diagonal blocks.
    pub fn check(&self, sym_tol: f64, psd_rel_tol: f64) -> Result<()> {
        for ((a, b), m) in &self.blocks {
            if let Some(other) = self.blocks.get(&(b.clone(), a.clone())) {
                if (m - other.transpose()).amax() > sym_tol * m.amax().max(1.0) {
                    return Err(DmftError::Config(format!("blocks ({a},{b}) not transposes")));
                }
            }
            if a == b {
                if !is_symmetric(m, sym_tol * m.amax().max(1.0)) {
                    return Err(DmftError::Config(format!("block {a} not symmetric")));
                }
                let trace = m.trace().abs().max(f64::MIN_POSITIVE);
                if min_eigenvalue(m) < -psd_rel_tol * trace {
                    return Err(DmftError::Config(format!("block {a} not PSD")));
                }
            }
        }
        Ok(())
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol
}

pub fn is_strictly_lower(m: &DMatrix<f64>, tol: f64) -> bool {
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            if m[(i, j)].abs() > tol {
                return false;
            }
        }
    }
    true
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
