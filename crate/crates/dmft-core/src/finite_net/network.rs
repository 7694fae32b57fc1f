use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{DmftError, Result};
use crate::rng;

/// A μP multilayer perceptron: `h¹ = W⁰x/√D`, `h^{ℓ+1} = W^ℓ φ(h^ℓ)/√N`, `f = w·φ(h^L)/(γN)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of hidden layers `L` (a two-layer network has `L = 1`).
    pub hidden_layers: usize,
    pub width: usize,
    pub input_dim: usize,
    pub gamma: f64,
    pub activation: Activation,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(DmftError::Config("width N must be at least 1".into()));
        }
        if self.input_dim == 0 {
            return Err(DmftError::Config("input_dim D must be at least 1".into()));
        }
        if self.hidden_layers == 0 {
            return Err(DmftError::Config("need at least one hidden layer".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(DmftError::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Training inputs (columns of `inputs`, shape `D x P`), targets and optional held-out inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub targets: Vec<f64>,
    pub test_inputs: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, targets: Vec<f64>) -> Result<Self> {
        if inputs.ncols() != targets.len() || targets.is_empty() {
            return Err(DmftError::Dimension(format!(
                "{} inputs but {} targets",
                inputs.ncols(),
                targets.len()
            )));
        }
        Ok(Self {
            inputs,
            targets,
            test_inputs: None,
        })
    }

    pub fn with_test(mut self, test_inputs: DMatrix<f64>) -> Result<Self> {
        if test_inputs.nrows() != self.inputs.nrows() {
            return Err(DmftError::Dimension("test inputs have wrong dimension".into()));
        }
        self.test_inputs = Some(test_inputs);
        Ok(self)
    }

    pub fn num_samples(&self) -> usize {
        self.targets.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.nrows()
    }

    /// Input Gram matrix `xᵀx'/D` over the training set.
    pub fn gram(&self) -> DMatrix<f64> {
        self.inputs.transpose() * &self.inputs / self.input_dim() as f64
    }

    /// Single training point with `|x|² = D` and, optionally, a test point with `x·x⋆/D = overlap`.
    pub fn single_point(input_dim: usize, target: f64, test_overlap: Option<f64>) -> Result<Self> {
        if input_dim == 0 || (test_overlap.is_some() && input_dim < 2) {
            return Err(DmftError::Config("input_dim too small".into()));
        }
        let mut x = DMatrix::zeros(input_dim, 1);
        x[(0, 0)] = (input_dim as f64).sqrt();
        let ds = Self::new(x, vec![target])?;
        match test_overlap {
            None => Ok(ds),
            Some(c) => {
                let s = (input_dim as f64).sqrt();
                let mut xs = DMatrix::zeros(input_dim, 1);
                xs[(0, 0)] = c * s;
                xs[(1, 0)] = (1.0 - c * c).max(0.0).sqrt() * s;
                ds.with_test(xs)
            }
        }
    }

    /// Exactly whitened inputs `x_μ·x_ν/D = δ_μν` built as scaled basis vectors (`D = P`).
    pub fn whitened(targets: Vec<f64>) -> Result<Self> {
        let p = targets.len();
        let x = DMatrix::identity(p, p) * (p as f64).sqrt();
        Self::new(x, targets)
    }

    /// Random points on the sphere `|x|² = D` with the given targets.
    pub fn random_sphere(input_dim: usize, targets: Vec<f64>, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, u64::MAX - 1);
        let p = targets.len();
        let mut x = DMatrix::from_fn(input_dim, p, |_, _| r.sample::<f64, _>(StandardNormal));
        for mut c in x.column_iter_mut() {
            let n = c.norm();
            c *= (input_dim as f64).sqrt() / n;
        }
        Self::new(x, targets)
    }
}

/// Trainable weights `θ = {W⁰, W¹, ..., w^L}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub input_weights: DMatrix<f64>,
    pub hidden_weights: Vec<DMatrix<f64>>,
    pub readout: DVector<f64>,
}

impl Parameters {
    pub fn all_finite(&self) -> bool {
        self.input_weights.iter().all(|v| v.is_finite())
            && self.hidden_weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.readout.iter().all(|v| v.is_finite())
    }

    pub fn num_params(&self) -> usize {
        self.input_weights.len()
            + self.hidden_weights.iter().map(|w| w.len()).sum::<usize>()
            + self.readout.len()
    }
}

/// Draws every weight i.i.d. standard normal from the stream `(config.seed, member)`.
pub fn init_network(config: &NetworkConfig, member: u64) -> Result<Parameters> {
    config.validate()?;
    let mut r = rng::stream(config.seed, member);
    let n = config.width;
    let mut draw = |rows: usize, cols: usize| {
        DMatrix::from_fn(rows, cols, |_, _| r.sample::<f64, _>(StandardNormal))
    };
    let input_weights = draw(n, config.input_dim);
    let hidden_weights = (1..config.hidden_layers).map(|_| draw(n, n)).collect();
    let readout = draw(n, 1).column(0).into_owned();
    Ok(Parameters {
        input_weights,
        hidden_weights,
        readout,
    })
}

/// Preactivations per layer (`N x P` each), outputs, and back-propagated signals.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub preacts: Vec<DMatrix<f64>>,
    pub activations: Vec<DMatrix<f64>>,
    pub outputs: DVector<f64>,
}

impl ForwardPass {
    /// `g^ℓ = γN ∂f/∂h^ℓ`, one `N x P` matrix per hidden layer.
    pub fn gradients(&self, params: &Parameters, act: Activation) -> Vec<DMatrix<f64>> {
        let l = self.preacts.len();
        let n = params.readout.len() as f64;
        let mut g = vec![DMatrix::zeros(0, 0); l];
        let mut top = self.preacts[l - 1].map(|h| act.dphi(h));
        for mut col in top.column_iter_mut() {
            col.component_mul_assign(&params.readout);
        }
        g[l - 1] = top;
        for k in (0..l - 1).rev() {
            let back = params.hidden_weights[k].transpose() * &g[k + 1] / n.sqrt();
            g[k] = back.zip_map(&self.preacts[k], |b, h| b * act.dphi(h));
        }
        g
    }
}

pub fn forward(
    params: &Parameters,
    config: &NetworkConfig,
    inputs: &DMatrix<f64>,
) -> ForwardPass {
    let n = config.width as f64;
    let act = config.activation;
    let mut preacts = Vec::with_capacity(config.hidden_layers);
    let mut activations = Vec::with_capacity(config.hidden_layers);
    let h1 = &params.input_weights * inputs / (config.input_dim as f64).sqrt();
    activations.push(h1.map(|h| act.phi(h)));
    preacts.push(h1);
    for w in &params.hidden_weights {
        let h = w * activations.last().unwrap() / n.sqrt();
        activations.push(h.map(|v| act.phi(v)));
        preacts.push(h);
    }
    let outputs = activations.last().unwrap().transpose() * &params.readout / (config.gamma * n);
    ForwardPass {
        preacts,
        activations,
        outputs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> NetworkConfig {
        NetworkConfig {
            hidden_layers: 2,
            width: 16,
            input_dim: 3,
            gamma: 1.0,
            activation: Activation::Tanh,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_network(&cfg(5), 0).unwrap();
        let b = init_network(&cfg(5), 0).unwrap();
        assert_eq!(a, b);
        let c = init_network(&cfg(5), 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_width_rejected() {
        let mut c = cfg(1);
        c.width = 0;
        assert!(init_network(&c, 0).is_err());
        let mut c = cfg(1);
        c.input_dim = 0;
        assert!(init_network(&c, 0).is_err());
    }

    #[test]
    fn single_point_geometry() {
        let ds = Dataset::single_point(4, 1.0, Some(0.5)).unwrap();
        assert!((ds.gram()[(0, 0)] - 1.0).abs() < 1e-12);
        let xs = ds.test_inputs.as_ref().unwrap();
        let overlap = ds.inputs.column(0).dot(&xs.column(0)) / 4.0;
        assert!((overlap - 0.5).abs() < 1e-12);
        assert!((xs.column(0).norm_squared() / 4.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn whitened_gram_is_identity() {
        let ds = Dataset::whitened(vec![1.0, 0.0, 0.0]).unwrap();
        assert!((ds.gram() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);
    }
}
