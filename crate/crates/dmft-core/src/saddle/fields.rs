use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::activation::Activation;
use crate::error::{DmftError, Result};
use crate::finite_net::LossReduction;
use crate::grid::TimeGrid;

use super::sources::colour;

/// Order parameters that drive the single-site process.
///
/// Points are the training inputs followed by any held-out inputs. Two-time
/// kernels are `nT x nT` in sample-major layout; `gram` is the static input kernel `Φ⁰`.
#[derive(Debug, Clone)]
pub struct KernelState {
    pub gram: DMatrix<f64>,
    /// `Φ¹ .. Φ^L`.
    pub feature: Vec<DMatrix<f64>>,
    /// `G¹ .. G^L`.
    pub gradient: Vec<DMatrix<f64>>,
    /// Response densities `A¹ .. A^{L-1}`.
    pub response_a: Vec<DMatrix<f64>>,
    /// Response densities `B¹ .. B^{L-1}`.
    pub response_b: Vec<DMatrix<f64>>,
}

impl KernelState {
    pub fn depth(&self) -> usize {
        self.feature.len()
    }

    pub fn num_points(&self) -> usize {
        self.gram.nrows()
    }

    /// Largest absolute entrywise change across all two-time kernels and responses.
    pub fn max_abs_change(&self, other: &KernelState) -> f64 {
        let pairs = self
            .feature
            .iter()
            .zip(&other.feature)
            .chain(self.gradient.iter().zip(&other.gradient))
            .chain(self.response_a.iter().zip(&other.response_a))
            .chain(self.response_b.iter().zip(&other.response_b));
        pairs.map(|(a, b)| (a - b).amax()).fold(0.0, f64::max)
    }

    /// `(1 - β) self + β other`.
    pub fn damp_towards(&mut self, other: &KernelState, beta: f64) {
        let all = self
            .feature
            .iter_mut()
            .zip(&other.feature)
            .chain(self.gradient.iter_mut().zip(&other.gradient))
            .chain(self.response_a.iter_mut().zip(&other.response_a))
            .chain(self.response_b.iter_mut().zip(&other.response_b));
        for (a, b) in all {
            *a *= 1.0 - beta;
            *a += b * beta;
        }
    }
}

/// Standard-normal draws reused across fixed-point iterations.
#[derive(Debug, Clone)]
pub struct SourceDraws {
    pub u: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
}

impl SourceDraws {
    /// Layer `k` (0-based): `u` is static (`n` columns) for the first layer, `r`
    /// is a single shared scalar for the last; everything else spans `nT`.
    pub fn draw(
        num_mc: usize,
        depth: usize,
        num_points: usize,
        num_steps: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let nt = num_points * num_steps;
        let u = (0..depth)
            .map(|k| super::sources::standard_normals(num_mc, if k == 0 { num_points } else { nt }, rng))
            .collect();
        let r = (0..depth)
            .map(|k| super::sources::standard_normals(num_mc, if k + 1 == depth { 1 } else { nt }, rng))
            .collect();
        Self { u, r }
    }

    pub fn colour(&self, kernels: &KernelState) -> Result<SourceBatch> {
        let depth = kernels.depth();
        let u = (0..depth)
            .map(|k| {
                let cov = if k == 0 { &kernels.gram } else { &kernels.feature[k - 1] };
                colour(&self.u[k], cov)
            })
            .collect::<Result<Vec<_>>>()?;
        let r = (0..depth)
            .map(|k| {
                if k + 1 == depth {
                    Ok(self.r[k].clone())
                } else {
                    colour(&self.r[k], &kernels.gradient[k + 1])
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SourceBatch { u, r })
    }
}

/// Gaussian sources `u^ℓ`, `r^ℓ` with their prescribed covariances, one row per sample.
#[derive(Debug, Clone)]
pub struct SourceBatch {
    pub u: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
}

/// Resolved fields of one layer, sample-major: entry `s * nT + μ * T + t`.
#[derive(Debug, Clone)]
pub struct LayerFields {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub g: Vec<f64>,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FieldSampleBatch {
    pub num_mc: usize,
    pub num_points: usize,
    pub num_train: usize,
    pub grid: TimeGrid,
    pub activation: Activation,
    pub gamma: f64,
    pub sources: SourceBatch,
    pub layers: Vec<LayerFields>,
    /// Padded error signal (`n x T`, zero rows for held-out points) that drove the fields.
    pub drive: DMatrix<f64>,
}

impl FieldSampleBatch {
    #[inline]
    pub fn index(&self, sample: usize, point: usize, t: usize) -> usize {
        let nt = self.num_points * self.grid.num_steps();
        sample * nt + point * self.grid.num_steps() + t
    }

    /// `S x nT` matrix of `φ(h)` for one layer.
    pub fn phi_matrix(&self, layer: usize) -> DMatrix<f64> {
        let nt = self.num_points * self.grid.num_steps();
        DMatrix::from_row_slice(self.num_mc, nt, &self.layers[layer].phi)
    }

    pub fn g_matrix(&self, layer: usize) -> DMatrix<f64> {
        let nt = self.num_points * self.grid.num_steps();
        DMatrix::from_row_slice(self.num_mc, nt, &self.layers[layer].g)
    }
}

/// How the error signal entering the field equations is obtained.
#[derive(Debug, Clone, Copy)]
pub enum ErrorDrive<'a> {
    /// A given `P x T` error trajectory; predictions are integrated with the sum reduction.
    Fixed(&'a DMatrix<f64>),
    /// Integrate `f(t+1) = f(t) + step · c · K(t) Δ(t)` alongside the fields.
    SelfConsistent {
        targets: &'a [f64],
        reduction: LossReduction,
    },
}

/// Fields plus the predictions and NTK measured on them.
#[derive(Debug, Clone)]
pub struct ResolvedPass {
    pub batch: FieldSampleBatch,
    /// `P x T`.
    pub errors: DMatrix<f64>,
    /// `n x T`, held-out rows included.
    pub predictions: DMatrix<f64>,
    /// `n x n` per step.
    pub ntk: Vec<DMatrix<f64>>,
}

/// Coupling rows for one time step: `coef[μ][ν T + t']` for `t' < t`, plus the
/// response alone at `t' = t` when `equal_time` is set.
fn coupling_rows(
    response: Option<&DMatrix<f64>>,
    equal_time: bool,
    kernel: &DMatrix<f64>,
    drive: &DMatrix<f64>,
    t: usize,
    num_steps: usize,
    scale: f64,
) -> Vec<f64> {
    let n = drive.nrows();
    let nt = n * num_steps;
    let mut rows = vec![0.0; n * nt];
    for mu in 0..n {
        let i = mu * num_steps + t;
        for nu in 0..n {
            for tp in 0..t {
                let j = nu * num_steps + tp;
                let a = response.map_or(0.0, |r| r[(i, j)]);
                rows[mu * nt + j] = scale * (a + kernel[(i, j)] * drive[(nu, tp)]);
            }
            if equal_time {
                if let Some(r) = response {
                    let j = nu * num_steps + t;
                    rows[mu * nt + j] = scale * r[(i, j)];
                }
            }
        }
    }
    rows
}

/// Forward-in-time solve of the single-site process for every Monte Carlo sample.
///
/// `Θ(0) = 0` makes each step explicit: fields at `t` only see `g`, `φ(h)` and `Δ` before `t`.
pub fn solve_single_site(
    sources: SourceBatch,
    kernels: &KernelState,
    activation: Activation,
    gamma: f64,
    grid: &TimeGrid,
    num_train: usize,
    drive: ErrorDrive<'_>,
) -> Result<ResolvedPass> {
    let depth = kernels.depth();
    let n = kernels.num_points();
    let t_len = grid.num_steps();
    let nt = n * t_len;
    let num_mc = sources.u[0].nrows();
    let eta = grid.step_size();
    let scale = gamma * eta;
    if num_mc == 0 {
        return Err(DmftError::InsufficientSamples {
            got: 0,
            needed: 1,
            context: "single-site samples",
        });
    }
    if num_train == 0 || num_train > n {
        return Err(DmftError::Dimension(format!("{num_train} training points out of {n}")));
    }

    let mut delta = DMatrix::zeros(n, t_len);
    let c = match drive {
        ErrorDrive::Fixed(d) => {
            if d.nrows() != num_train || d.ncols() != t_len {
                return Err(DmftError::Dimension(format!(
                    "error drive is {}x{}, expected {num_train}x{t_len}",
                    d.nrows(),
                    d.ncols()
                )));
            }
            delta.view_mut((0, 0), (num_train, t_len)).copy_from(d);
            1.0
        }
        ErrorDrive::SelfConsistent { targets, reduction } => {
            if targets.len() != num_train {
                return Err(DmftError::Dimension("targets length".into()));
            }
            for mu in 0..num_train {
                delta[(mu, 0)] = targets[mu];
            }
            reduction.factor(num_train)
        }
    };
    let self_consistent = matches!(drive, ErrorDrive::SelfConsistent { .. });

    let mut layers: Vec<LayerFields> = (0..depth)
        .map(|_| LayerFields {
            h: vec![0.0; num_mc * nt],
            z: vec![0.0; num_mc * nt],
            g: vec![0.0; num_mc * nt],
            phi: vec![0.0; num_mc * nt],
        })
        .collect();
    let mut predictions = DMatrix::zeros(n, t_len);
    let mut ntk = Vec::with_capacity(t_len);

    for t in 0..t_len {
        let mut phi_tt = Vec::with_capacity(depth);
        let mut g_tt = Vec::with_capacity(depth);
        for k in 0..depth {
            let h_rows = (k > 0).then(|| {
                coupling_rows(Some(&kernels.response_a[k - 1]), false, &kernels.feature[k - 1], &delta, t, t_len, scale)
            });
            let z_rows = (k + 1 < depth).then(|| {
                coupling_rows(Some(&kernels.response_b[k]), true, &kernels.gradient[k + 1], &delta, t, t_len, scale)
            });
            let u = &sources.u[k];
            let r = &sources.r[k];
            let gram = &kernels.gram;
            let delta_ref = &delta;
            let lf = &mut layers[k];
            lf.h.par_chunks_mut(nt)
                .zip(lf.z.par_chunks_mut(nt))
                .zip(lf.g.par_chunks_mut(nt))
                .zip(lf.phi.par_chunks_mut(nt))
                .enumerate()
                .for_each(|(s, (((h, z), g), phi))| {
                    for mu in 0..n {
                        let i = mu * t_len + t;
                        h[i] = match &h_rows {
                            None => {
                                if t == 0 {
                                    u[(s, mu)]
                                } else {
                                    let mut acc = h[i - 1];
                                    for nu in 0..n {
                                        acc += scale * gram[(mu, nu)] * delta_ref[(nu, t - 1)] * g[nu * t_len + t - 1];
                                    }
                                    acc
                                }
                            }
                            Some(rows) => {
                                let row = &rows[mu * nt..(mu + 1) * nt];
                                let mut acc = u[(s, i)];
                                for nu in 0..n {
                                    let base = nu * t_len;
                                    for tp in 0..t {
                                        acc += row[base + tp] * g[base + tp];
                                    }
                                }
                                acc
                            }
                        };
                        phi[i] = activation.phi(h[i]);
                    }
                    for mu in 0..n {
                        let i = mu * t_len + t;
                        z[i] = match &z_rows {
                            None => {
                                if t == 0 {
                                    r[(s, 0)]
                                } else {
                                    let mut acc = z[i - 1];
                                    for nu in 0..n {
                                        acc += scale * delta_ref[(nu, t - 1)] * phi[nu * t_len + t - 1];
                                    }
                                    acc
                                }
                            }
                            Some(rows) => {
                                let row = &rows[mu * nt..(mu + 1) * nt];
                                let mut acc = r[(s, i)];
                                for nu in 0..n {
                                    let base = nu * t_len;
                                    for tp in 0..=t {
                                        acc += row[base + tp] * phi[base + tp];
                                    }
                                }
                                acc
                            }
                        };
                        g[i] = activation.dphi(h[i]) * z[i];
                    }
                });

            let mut pk = DMatrix::zeros(n, n);
            let mut gk = DMatrix::zeros(n, n);
            for s in 0..num_mc {
                let base = s * nt;
                for mu in 0..n {
                    let (pm, gm) = (lf.phi[base + mu * t_len + t], lf.g[base + mu * t_len + t]);
                    for nu in mu..n {
                        pk[(mu, nu)] += pm * lf.phi[base + nu * t_len + t];
                        gk[(mu, nu)] += gm * lf.g[base + nu * t_len + t];
                    }
                }
            }
            for mu in 0..n {
                for nu in mu..n {
                    pk[(mu, nu)] /= num_mc as f64;
                    gk[(mu, nu)] /= num_mc as f64;
                    pk[(nu, mu)] = pk[(mu, nu)];
                    gk[(nu, mu)] = gk[(mu, nu)];
                }
            }
            phi_tt.push(pk);
            g_tt.push(gk);
        }

        let mut k_t = g_tt[0].component_mul(&kernels.gram);
        for k in 1..depth {
            k_t += g_tt[k].component_mul(&phi_tt[k - 1]);
        }
        k_t += &phi_tt[depth - 1];
        if !k_t.iter().all(|v| v.is_finite()) {
            return Err(DmftError::Divergence {
                step: t,
                context: "single-site fields".into(),
            });
        }
        if t + 1 < t_len {
            for mu in 0..n {
                let mut rate = 0.0;
                for nu in 0..num_train {
                    rate += k_t[(mu, nu)] * delta[(nu, t)];
                }
                predictions[(mu, t + 1)] = predictions[(mu, t)] + eta * c * rate;
            }
            if self_consistent {
                if let ErrorDrive::SelfConsistent { targets, .. } = drive {
                    for mu in 0..num_train {
                        delta[(mu, t + 1)] = targets[mu] - predictions[(mu, t + 1)];
                    }
                }
            }
        }
        ntk.push(k_t);
    }

    let errors = delta.view((0, 0), (num_train, t_len)).into_owned();
    Ok(ResolvedPass {
        batch: FieldSampleBatch {
            num_mc,
            num_points: n,
            num_train,
            grid: *grid,
            activation,
            gamma,
            sources,
            layers,
            drive: delta,
        },
        errors,
        predictions,
        ntk,
    })
}
