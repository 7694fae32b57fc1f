use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DmftError, Result};
use crate::finite_net::cross_covariance;
use crate::grid::TimeGrid;
use crate::saddle::FieldSampleBatch;

/// Minimum Monte Carlo batch accepted for fourth-cumulant estimates.
pub const MIN_KAPPA_SAMPLES: usize = 100;

/// Whether the random initial output `f(θ₀)` is part of the fluctuation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialOutput {
    /// Networks are trained and measured as `f - f(θ₀)`.
    Subtracted,
    /// Raw networks: `f(θ₀)` enters `Δ(0)` and `f⋆(0)` and correlates with later kernels.
    #[default]
    Included,
}

/// Index bookkeeping for train points, held-out points and their kernel pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointLayout {
    pub num_train: usize,
    pub num_test: usize,
    /// Train-train pairs `(μ, ν)` with `μ ≤ ν`, row-major over the upper triangle.
    pub pairs: Vec<(usize, usize)>,
    /// Train-test pairs `(μ, q)` with `q` counted from the first held-out point.
    pub test_pairs: Vec<(usize, usize)>,
}

impl PointLayout {
    pub fn new(num_train: usize, num_test: usize) -> Self {
        let pairs = (0..num_train)
            .flat_map(|m| (m..num_train).map(move |n| (m, n)))
            .collect();
        let test_pairs = (0..num_train)
            .flat_map(|m| (0..num_test).map(move |q| (m, q)))
            .collect();
        Self {
            num_train,
            num_test,
            pairs,
            test_pairs,
        }
    }

    pub fn pair_index(&self, mu: usize, nu: usize) -> usize {
        let (a, b) = if mu <= nu { (mu, nu) } else { (nu, mu) };
        a * self.num_train - a * a.saturating_sub(1) / 2 + (b - a)
    }

    pub fn test_pair_index(&self, mu: usize, q: usize) -> usize {
        mu * self.num_test + q
    }

    /// Length of the per-neuron noise vector `[a, a⋆, k(t), k⋆(t)]`.
    pub fn noise_dim(&self, num_steps: usize) -> usize {
        self.num_train + self.num_test + (self.pairs.len() + self.test_pairs.len()) * num_steps
    }
}

/// Monte Carlo `κ` and `D` blocks of the two-layer action Hessian.
///
/// `kappa` is the per-neuron covariance of `[r φ(u_μ)/γ, r φ(u⋆_q)/γ, k_{μν}(t), k⋆_{μq}(t)]`
/// with `k_{μν} = φ(h_μ)φ(h_ν) + g_μ g_ν Φ⁰_{μν}`. `d` and `d_star` hold
/// `∂⟨k(t)⟩/∂Δ_α(s)` per unit time, rows `pair * T + t`, columns `α * T + s`.
#[derive(Debug, Clone)]
pub struct TwoLayerBlocks {
    pub layout: PointLayout,
    pub grid: TimeGrid,
    pub gamma: f64,
    pub kappa: DMatrix<f64>,
    pub kappa_std_error: Option<DMatrix<f64>>,
    pub d: DMatrix<f64>,
    pub d_star: DMatrix<f64>,
    pub d_std_error: DMatrix<f64>,
    pub d_star_std_error: DMatrix<f64>,
}

impl TwoLayerBlocks {
    fn k_offset(&self) -> usize {
        self.layout.num_train + self.layout.num_test
    }

    fn ks_offset(&self) -> usize {
        self.k_offset() + self.layout.pairs.len() * self.grid.num_steps()
    }

    /// `Cov(k, k)`, the uncoupled NTK variance.
    pub fn kappa_kernel(&self) -> DMatrix<f64> {
        let o = self.k_offset();
        let m = self.layout.pairs.len() * self.grid.num_steps();
        self.kappa.view((o, o), (m, m)).into_owned()
    }

    /// `Cov(k, k⋆)`.
    pub fn kappa_star(&self) -> DMatrix<f64> {
        let (o, os) = (self.k_offset(), self.ks_offset());
        let m = self.layout.pairs.len() * self.grid.num_steps();
        let ms = self.layout.test_pairs.len() * self.grid.num_steps();
        self.kappa.view((o, os), (m, ms)).into_owned()
    }

    /// `Cov(k⋆, k⋆)`.
    pub fn kappa_star_star(&self) -> DMatrix<f64> {
        let os = self.ks_offset();
        let ms = self.layout.test_pairs.len() * self.grid.num_steps();
        self.kappa.view((os, os), (ms, ms)).into_owned()
    }
}

/// Per-sample noise vector, layout as in [`TwoLayerBlocks`].
fn noise_vector(batch: &FieldSampleBatch, layout: &PointLayout, gram: &DMatrix<f64>, s: usize) -> Vec<f64> {
    let t_len = batch.grid.num_steps();
    let (p, q) = (layout.num_train, layout.num_test);
    let lf = &batch.layers[0];
    let act = batch.activation;
    let mut v = Vec::with_capacity(layout.noise_dim(t_len));
    let r0 = batch.sources.r[0][(s, 0)];
    let inv_gamma = if batch.gamma > 0.0 { 1.0 / batch.gamma } else { 0.0 };
    for mu in 0..p + q {
        v.push(r0 * act.phi(batch.sources.u[0][(s, mu)]) * inv_gamma);
    }
    let k = |a: usize, b: usize, t: usize| {
        let (ia, ib) = (batch.index(s, a, t), batch.index(s, b, t));
        lf.phi[ia] * lf.phi[ib] + lf.g[ia] * lf.g[ib] * gram[(a, b)]
    };
    for &(a, b) in &layout.pairs {
        for t in 0..t_len {
            v.push(k(a, b, t));
        }
    }
    for &(a, qq) in &layout.test_pairs {
        for t in 0..t_len {
            v.push(k(a, p + qq, t));
        }
    }
    v
}

struct SensitivityAccumulator {
    d: DMatrix<f64>,
    d_sq: DMatrix<f64>,
    ds: DMatrix<f64>,
    ds_sq: DMatrix<f64>,
}

impl SensitivityAccumulator {
    fn zeros(rows: usize, rows_star: usize, cols: usize) -> Self {
        Self {
            d: DMatrix::zeros(rows, cols),
            d_sq: DMatrix::zeros(rows, cols),
            ds: DMatrix::zeros(rows_star, cols),
            ds_sq: DMatrix::zeros(rows_star, cols),
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.d += other.d;
        self.d_sq += other.d_sq;
        self.ds += other.ds;
        self.ds_sq += other.ds_sq;
        self
    }
}

/// Forward sensitivities `∂h_μ(t)/∂Δ_α(s)`, `∂z(t)/∂Δ_α(s)` of one sample, folded into `D` sums.
fn accumulate_sample(
    acc: &mut SensitivityAccumulator,
    batch: &FieldSampleBatch,
    layout: &PointLayout,
    gram: &DMatrix<f64>,
    s: usize,
) {
    let t_len = batch.grid.num_steps();
    let p = layout.num_train;
    let n = batch.num_points;
    let pt = p * t_len;
    let scale = batch.gamma * batch.grid.step_size();
    let act = batch.activation;
    let lf = &batch.layers[0];
    let delta = &batch.drive;
    let mut sh = vec![0.0; n * pt];
    let mut sz = vec![0.0; pt];
    let mut sg = vec![0.0; n * pt];
    let mut dk = vec![0.0; pt];
    let mut sh_next = vec![0.0; n * pt];
    for t in 0..t_len {
        let idx: Vec<usize> = (0..n).map(|mu| batch.index(s, mu, t)).collect();
        let h: Vec<f64> = idx.iter().map(|&i| lf.h[i]).collect();
        let z = lf.z[idx[0]];
        let phi: Vec<f64> = idx.iter().map(|&i| lf.phi[i]).collect();
        let g: Vec<f64> = idx.iter().map(|&i| lf.g[i]).collect();
        let d1: Vec<f64> = h.iter().map(|&x| act.dphi(x)).collect();
        let d2: Vec<f64> = h.iter().map(|&x| act.ddphi(x)).collect();
        // only columns (α, s') with s' < t are live
        let live = |alpha: usize| alpha * t_len..alpha * t_len + t;
        for nu in 0..n {
            for alpha in 0..p {
                for c in live(alpha) {
                    sg[nu * pt + c] = d2[nu] * z * sh[nu * pt + c] + d1[nu] * sz[c];
                }
            }
        }
        if t > 0 {
            let mut emit = |row: usize, a: usize, b: usize, target: &mut DMatrix<f64>, target_sq: &mut DMatrix<f64>| {
                for alpha in 0..p {
                    for c in live(alpha) {
                        dk[c] = d1[a] * phi[b] * sh[a * pt + c]
                            + phi[a] * d1[b] * sh[b * pt + c]
                            + gram[(a, b)] * (sg[a * pt + c] * g[b] + g[a] * sg[b * pt + c]);
                        target[(row, c)] += dk[c];
                        target_sq[(row, c)] += dk[c] * dk[c];
                    }
                }
            };
            for (pi, &(a, b)) in layout.pairs.iter().enumerate() {
                emit(pi * t_len + t, a, b, &mut acc.d, &mut acc.d_sq);
            }
            for (pi, &(a, q)) in layout.test_pairs.iter().enumerate() {
                emit(pi * t_len + t, a, p + q, &mut acc.ds, &mut acc.ds_sq);
            }
        }
        if t + 1 == t_len {
            break;
        }
        // advance to t+1
        for mu in 0..n {
            for alpha in 0..p {
                for c in live(alpha) {
                    let mut v = sh[mu * pt + c];
                    for nu in 0..p {
                        v += scale * gram[(mu, nu)] * delta[(nu, t)] * sg[nu * pt + c];
                    }
                    sh_next[mu * pt + c] = v;
                }
                sh_next[mu * pt + alpha * t_len + t] = scale * gram[(mu, alpha)] * g[alpha];
            }
        }
        for alpha in 0..p {
            for c in live(alpha) {
                let mut v = sz[c];
                for nu in 0..p {
                    v += scale * delta[(nu, t)] * d1[nu] * sh[nu * pt + c];
                }
                sz[c] = v;
            }
            sz[alpha * t_len + t] = scale * phi[alpha];
        }
        std::mem::swap(&mut sh, &mut sh_next);
    }
}

/// `κ` and `D` from a one-hidden-layer batch.
///
/// `D` uses forward sensitivity recursions streamed per sample; `want_kappa_error`
/// adds per-entry standard errors of `κ` (quadratic in the noise dimension).
pub fn compute_blocks(batch: &FieldSampleBatch, gram: &DMatrix<f64>, want_kappa_error: bool) -> Result<TwoLayerBlocks> {
    if batch.layers.len() != 1 {
        return Err(DmftError::Config("two-layer blocks need exactly one hidden layer".into()));
    }
    if batch.num_mc < MIN_KAPPA_SAMPLES {
        return Err(DmftError::InsufficientSamples {
            got: batch.num_mc,
            needed: MIN_KAPPA_SAMPLES,
            context: "kappa estimate",
        });
    }
    let layout = PointLayout::new(batch.num_train, batch.num_points - batch.num_train);
    let t_len = batch.grid.num_steps();
    let m = layout.noise_dim(t_len);
    let sf = batch.num_mc as f64;

    let samples: Vec<Vec<f64>> = (0..batch.num_mc)
        .into_par_iter()
        .map(|s| noise_vector(batch, &layout, gram, s))
        .collect();
    let mut centred = DMatrix::zeros(batch.num_mc, m);
    let mut mean = vec![0.0; m];
    for v in &samples {
        for (j, x) in v.iter().enumerate() {
            mean[j] += x / sf;
        }
    }
    for (i, v) in samples.iter().enumerate() {
        for j in 0..m {
            centred[(i, j)] = v[j] - mean[j];
        }
    }
    let kappa = centred.tr_mul(&centred) / (sf - 1.0);
    let kappa_std_error = if want_kappa_error {
        Some(cross_covariance(&samples, &samples)?.std_error)
    } else {
        None
    };

    let rows = layout.pairs.len() * t_len;
    let rows_star = layout.test_pairs.len() * t_len;
    let cols = layout.num_train * t_len;
    let acc = (0..batch.num_mc)
        .into_par_iter()
        .fold(
            || SensitivityAccumulator::zeros(rows, rows_star, cols),
            |mut acc, s| {
                accumulate_sample(&mut acc, batch, &layout, gram, s);
                acc
            },
        )
        .reduce(|| SensitivityAccumulator::zeros(rows, rows_star, cols), SensitivityAccumulator::merge);
    let eta = batch.grid.step_size();
    let finish = |sum: &DMatrix<f64>, sq: &DMatrix<f64>| {
        let mean = sum / (sf * eta);
        let se = DMatrix::from_fn(sum.nrows(), sum.ncols(), |i, j| {
            let mu = sum[(i, j)] / sf;
            let var = (sq[(i, j)] / sf - mu * mu).max(0.0) * sf / (sf - 1.0);
            (var / sf).sqrt() / eta
        });
        (mean, se)
    };
    let (d, d_std_error) = finish(&acc.d, &acc.d_sq);
    let (d_star, d_star_std_error) = finish(&acc.ds, &acc.ds_sq);
    Ok(TwoLayerBlocks {
        layout,
        grid: batch.grid,
        gamma: batch.gamma,
        kappa,
        kappa_std_error,
        d,
        d_star,
        d_std_error,
        d_star_std_error,
    })
}
