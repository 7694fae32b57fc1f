use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DmftError, Result};
use crate::grid::TimeGrid;
use crate::rng::stream;

/// Two-layer linear network trained on fresh isotropic Gaussian inputs every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    pub width: usize,
    pub input_dim: usize,
    pub gamma: f64,
    /// Fresh samples per step; `None` uses the population covariance.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.input_dim == 0 {
            return Err(DmftError::Config("width and input_dim must be positive".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(DmftError::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.batch_size == Some(0) {
            return Err(DmftError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnlineTrajectory {
    /// `D x T` effective weights `β = Wᵀa / (γN)`.
    pub beta: DMatrix<f64>,
    /// `|β(t) - β⋆|²`.
    pub loss: Vec<f64>,
}

/// Applies `Ĉ = A Aᵀ / B` to `e`, with `A` the Bartlett factor of a `Wishart(B, I)` draw.
fn bartlett_apply(rng: &mut ChaCha8Rng, batch: usize, e: &DVector<f64>) -> DVector<f64> {
    let d = e.len();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new((batch - i) as f64).expect("positive dof");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let at_e = a.tr_mul(e);
    a * at_e / batch as f64
}

/// Applies an empirical covariance of `batch` fresh samples directly (`batch < D`).
fn direct_apply(rng: &mut ChaCha8Rng, batch: usize, e: &DVector<f64>) -> DVector<f64> {
    let d = e.len();
    let x = DMatrix::from_fn(d, batch, |_, _| rng.sample::<f64, _>(StandardNormal));
    &x * x.tr_mul(e) / batch as f64
}

pub fn train_online(
    config: &OnlineConfig,
    beta_star: &DVector<f64>,
    grid: &TimeGrid,
    member: u64,
) -> Result<OnlineTrajectory> {
    config.validate()?;
    if beta_star.len() != config.input_dim {
        return Err(DmftError::Dimension(format!(
            "target has {} entries, input_dim is {}",
            beta_star.len(),
            config.input_dim
        )));
    }
    let (n, d) = (config.width, config.input_dim);
    let mut rng = stream(config.seed, member);
    let mut w = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut a = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let scale = config.gamma * n as f64;
    let step = grid.step_size() * config.gamma;
    let t_len = grid.num_steps();
    let mut beta = DMatrix::zeros(d, t_len);
    let mut loss = vec![0.0; t_len];
    for j in 0..t_len {
        let b = w.tr_mul(&a) / scale;
        let e = beta_star - &b;
        loss[j] = e.norm_squared();
        if !loss[j].is_finite() {
            return Err(DmftError::Divergence {
                step: j,
                context: "online weights".into(),
            });
        }
        beta.set_column(j, &b);
        if j + 1 == t_len {
            break;
        }
        let v = match config.batch_size {
            None => e,
            Some(bs) if bs >= d => bartlett_apply(&mut rng, bs, &e),
            Some(bs) => direct_apply(&mut rng, bs, &e),
        };
        let da = &w * &v * step;
        w.ger(step, &a, &v, 1.0);
        a += da;
    }
    Ok(OnlineTrajectory { beta, loss })
}

pub fn run_online_ensemble(
    config: &OnlineConfig,
    beta_star: &DVector<f64>,
    grid: &TimeGrid,
    size: usize,
) -> Result<Vec<OnlineTrajectory>> {
    if size < 2 {
        return Err(DmftError::InsufficientSamples {
            got: size,
            needed: 2,
            context: "online ensemble size",
        });
    }
    (0..size as u64)
        .into_par_iter()
        .map(|k| {
            train_online(config, beta_star, grid, k).map_err(|e| DmftError::MemberDiverged {
                member: k,
                source: Box::new(e),
            })
        })
        .collect()
}
