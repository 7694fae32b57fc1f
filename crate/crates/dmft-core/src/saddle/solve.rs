use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fields::{solve_single_site, ErrorDrive, FieldSampleBatch, KernelState, ResolvedPass, SourceDraws};
use super::sources::{broadcast_static, sample_gp};
use crate::activation::Activation;
use crate::error::{DmftError, Result};
use crate::finite_net::{Dataset, LossReduction};
use crate::grid::{OrderParameterSet, TimeGrid};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaddleConfig {
    pub hidden_layers: usize,
    pub gamma: f64,
    pub activation: Activation,
    #[serde(default)]
    pub reduction: LossReduction,
    /// Monte Carlo samples `S` per pass.
    pub mc_samples: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    pub seed: u64,
}

fn default_damping() -> f64 {
    0.4
}
fn default_tol() -> f64 {
    1e-4
}
fn default_max_iters() -> usize {
    200
}

impl SaddleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 {
            return Err(DmftError::Config("hidden_layers must be at least 1".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(DmftError::Config("gamma must be non-negative".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(DmftError::Config(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if self.mc_samples == 0 {
            return Err(DmftError::Config("mc_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub residuals: Vec<f64>,
}

/// Held-out predictions `f⋆(t)` and train-test NTK `K⋆(t)`.
#[derive(Debug, Clone)]
pub struct TestPointSolution {
    /// `Q x T`.
    pub predictions: DMatrix<f64>,
    /// `P x Q` per step.
    pub ntk: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct SaddleSolution {
    pub order: OrderParameterSet,
    pub test: Option<TestPointSolution>,
    /// Kernels over train and held-out points.
    pub kernels: KernelState,
    /// Fresh-sample verification pass at the converged kernels.
    pub batch: FieldSampleBatch,
    pub convergence: ConvergenceReport,
}

/// Two-time kernels `Φ^ℓ(t,s) = ⟨φ(h(t)) φ(h(s))⟩`, `G^ℓ = ⟨g(t) g(s)⟩` from a batch.
pub fn update_order_params(batch: &FieldSampleBatch) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let s = batch.num_mc as f64;
    let gram = |m: DMatrix<f64>| m.tr_mul(&m) / s;
    let feature = (0..batch.layers.len()).map(|k| gram(batch.phi_matrix(k))).collect();
    let gradient = (0..batch.layers.len()).map(|k| gram(batch.g_matrix(k))).collect();
    (feature, gradient)
}

/// Causal coupling matrix `γ·step·[R(t,s) + K(t,s) Δ(s)]Θ(t-s)` on the flat `nT` index;
/// `equal_time` keeps the response on the diagonal `s = t`.
fn coupling_matrix(
    response: Option<&DMatrix<f64>>,
    equal_time: bool,
    kernel: &DMatrix<f64>,
    drive: &DMatrix<f64>,
    num_steps: usize,
    scale: f64,
) -> DMatrix<f64> {
    let n = drive.nrows();
    let nt = n * num_steps;
    DMatrix::from_fn(nt, nt, |i, j| {
        let (t, nu, tp) = (i % num_steps, j / num_steps, j % num_steps);
        let a = response.map_or(0.0, |r| r[(i, j)]);
        if tp == t && equal_time {
            return scale * a;
        }
        if tp >= t {
            return 0.0;
        }
        scale * (a + kernel[(i, j)] * drive[(nu, tp)])
    })
}

/// Response densities `A^ℓ = ⟨∂φ(h^ℓ)/∂r^ℓ⟩/(γ·step)` and `B^ℓ = ⟨∂g^{ℓ+1}/∂u^{ℓ+1}⟩/(γ·step)`.
///
/// `A` is strictly causal; `B` keeps an equal-time part because `g^{ℓ+1}(t)` reacts
/// to `u^{ℓ+1}(t)` within the same step. Per sample, the linearized layer `δh = δu + M_A δg`, `δz = δr + M_B (φ'δh)`,
/// `δg = φ''z δh + φ' δz` is solved densely. Only meaningful for two or more hidden layers.
pub fn response_functions(
    batch: &FieldSampleBatch,
    kernels: &KernelState,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let depth = batch.layers.len();
    let n = batch.num_points;
    let t_len = batch.grid.num_steps();
    let nt = n * t_len;
    let scale = batch.gamma * batch.grid.step_size();
    let mut resp_a = vec![DMatrix::zeros(nt, nt); depth.saturating_sub(1)];
    let mut resp_b = vec![DMatrix::zeros(nt, nt); depth.saturating_sub(1)];
    if depth < 2 || scale == 0.0 {
        return Ok((resp_a, resp_b));
    }
    let ones = DMatrix::from_element(nt, nt, 1.0);
    let gram_b = broadcast_static(&kernels.gram, t_len);
    for k in 0..depth {
        let m_a = if k == 0 {
            coupling_matrix(None, false, &gram_b, &batch.drive, t_len, scale)
        } else {
            coupling_matrix(Some(&kernels.response_a[k - 1]), false, &kernels.feature[k - 1], &batch.drive, t_len, scale)
        };
        let m_b = if k + 1 == depth {
            coupling_matrix(None, true, &ones, &batch.drive, t_len, scale)
        } else {
            coupling_matrix(Some(&kernels.response_b[k]), true, &kernels.gradient[k + 1], &batch.drive, t_len, scale)
        };
        let want_a = k + 1 < depth;
        let want_b = k > 0;
        let act = batch.activation;
        let lf = &batch.layers[k];
        let (sum_a, sum_b) = (0..batch.num_mc)
            .into_par_iter()
            .fold(
                || (DMatrix::zeros(nt, nt), DMatrix::zeros(nt, nt)),
                |(mut sa, mut sb), s| {
                    let base = s * nt;
                    let d1 = DVector::from_fn(nt, |i, _| act.ddphi(lf.h[base + i]) * lf.z[base + i]);
                    let d2 = DVector::from_fn(nt, |i, _| act.dphi(lf.h[base + i]));
                    // inner = diag(d1) + diag(d2) M_B diag(d2)
                    let mut inner = m_b.clone();
                    for i in 0..nt {
                        for j in 0..nt {
                            inner[(i, j)] *= d2[i] * d2[j];
                        }
                        inner[(i, i)] += d1[i];
                    }
                    let q = DMatrix::identity(nt, nt) - &m_a * &inner;
                    let lu = q.lu();
                    if want_a {
                        // ∂φ(h)/∂r = diag(d2) Q⁻¹ M_A diag(d2)
                        let mut rhs = m_a.clone();
                        for j in 0..nt {
                            rhs.column_mut(j).scale_mut(d2[j]);
                        }
                        if let Some(mut x) = lu.solve(&rhs) {
                            for i in 0..nt {
                                x.row_mut(i).scale_mut(d2[i]);
                            }
                            sa += x;
                        }
                    }
                    if want_b {
                        // ∂g/∂u = inner Q⁻¹
                        if let Some(qi) = lu.try_inverse() {
                            sb += &inner * qi;
                        }
                    }
                    (sa, sb)
                },
            )
            .reduce(
                || (DMatrix::zeros(nt, nt), DMatrix::zeros(nt, nt)),
                |(a1, b1), (a2, b2)| (a1 + a2, b1 + b2),
            );
        let norm = batch.num_mc as f64 * scale;
        if want_a {
            resp_a[k] = sum_a / norm;
        }
        if want_b {
            resp_b[k - 1] = sum_b / norm;
        }
    }
    Ok((resp_a, resp_b))
}

/// Explicit Euler `f(t+1) = f(t) + step · c · K(t) Δ(t)`, `Δ = y - f`, `f(0) = 0`.
pub fn integrate_predictions(
    ntk: &[DMatrix<f64>],
    targets: &[f64],
    grid: &TimeGrid,
    reduction: LossReduction,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = targets.len();
    let t_len = grid.num_steps();
    if ntk.len() != t_len || ntk.iter().any(|k| k.nrows() != p || k.ncols() != p) {
        return Err(DmftError::Dimension(format!(
            "need {t_len} NTK matrices of size {p}x{p}"
        )));
    }
    let c = reduction.factor(p) * grid.step_size();
    let mut errors = DMatrix::zeros(p, t_len);
    let mut predictions = DMatrix::zeros(p, t_len);
    for mu in 0..p {
        errors[(mu, 0)] = targets[mu];
    }
    for t in 0..t_len - 1 {
        let step = &ntk[t] * errors.column(t) * c;
        for mu in 0..p {
            predictions[(mu, t + 1)] = predictions[(mu, t)] + step[mu];
            errors[(mu, t + 1)] = targets[mu] - predictions[(mu, t + 1)];
        }
    }
    Ok((errors, predictions))
}

/// Input kernel over training then held-out points.
pub fn point_gram(dataset: &Dataset) -> DMatrix<f64> {
    let d = dataset.input_dim() as f64;
    match &dataset.test_inputs {
        None => dataset.gram(),
        Some(t) => {
            let mut x = DMatrix::zeros(dataset.input_dim(), dataset.num_samples() + t.ncols());
            x.columns_mut(0, dataset.num_samples()).copy_from(&dataset.inputs);
            x.columns_mut(dataset.num_samples(), t.ncols()).copy_from(t);
            x.tr_mul(&x) / d
        }
    }
}

/// Static (`γ = 0`) kernels by a layer-by-layer Monte Carlo recursion, broadcast over time.
pub fn lazy_initial_guess(config: &SaddleConfig, gram: &DMatrix<f64>, grid: &TimeGrid) -> Result<KernelState> {
    let depth = config.hidden_layers;
    let n = gram.nrows();
    let t_len = grid.num_steps();
    let mut rng = stream(config.seed, u64::MAX);
    let act = config.activation;
    let mut feature_static = Vec::with_capacity(depth);
    let mut dphi_static = Vec::with_capacity(depth);
    let mut cov = gram.clone();
    for _ in 0..depth {
        let h = sample_gp(&cov, config.mc_samples, &mut rng)?;
        let f = h.map(|v| act.phi(v));
        let d = h.map(|v| act.dphi(v));
        let s = config.mc_samples as f64;
        let phi = f.tr_mul(&f) / s;
        dphi_static.push(d.tr_mul(&d) / s);
        cov = phi.clone();
        feature_static.push(phi);
    }
    let mut gradient_static = vec![DMatrix::zeros(n, n); depth];
    let mut above = DMatrix::from_element(n, n, 1.0);
    for k in (0..depth).rev() {
        gradient_static[k] = dphi_static[k].component_mul(&above);
        above = gradient_static[k].clone();
    }
    Ok(KernelState {
        gram: gram.clone(),
        feature: feature_static.iter().map(|m| broadcast_static(m, t_len)).collect(),
        gradient: gradient_static.iter().map(|m| broadcast_static(m, t_len)).collect(),
        response_a: vec![DMatrix::zeros(n * t_len, n * t_len); depth - 1],
        response_b: vec![DMatrix::zeros(n * t_len, n * t_len); depth - 1],
    })
}

fn estimate_kernels(pass: &ResolvedPass, current: &KernelState) -> Result<KernelState> {
    let (feature, gradient) = update_order_params(&pass.batch);
    let (response_a, response_b) = response_functions(&pass.batch, current)?;
    Ok(KernelState {
        gram: current.gram.clone(),
        feature,
        gradient,
        response_a,
        response_b,
    })
}

fn resolve(
    config: &SaddleConfig,
    draws: &SourceDraws,
    kernels: &KernelState,
    grid: &TimeGrid,
    dataset: &Dataset,
) -> Result<ResolvedPass> {
    let sources = draws.colour(kernels)?;
    solve_single_site(
        sources,
        kernels,
        config.activation,
        config.gamma,
        grid,
        dataset.num_samples(),
        ErrorDrive::SelfConsistent {
            targets: &dataset.targets,
            reduction: config.reduction,
        },
    )
}

/// Damped alternating Monte Carlo iteration for the infinite-width saddle.
///
/// One hidden layer needs no iteration: its sources and couplings only involve
/// the static input kernel and the error, which is integrated inside the pass.
pub fn solve_saddle(config: &SaddleConfig, dataset: &Dataset, grid: &TimeGrid) -> Result<SaddleSolution> {
    config.validate()?;
    let gram = point_gram(dataset);
    let n = gram.nrows();
    let p = dataset.num_samples();
    let t_len = grid.num_steps();
    let depth = config.hidden_layers;
    let mut kernels = lazy_initial_guess(config, &gram, grid)?;
    let mut residuals = Vec::new();
    let mut iterations = 1;

    if depth > 1 {
        let draws = SourceDraws::draw(config.mc_samples, depth, n, t_len, &mut stream(config.seed, 0));
        let mut converged = false;
        for it in 1..=config.max_iters {
            iterations = it;
            let pass = resolve(config, &draws, &kernels, grid, dataset)?;
            let estimate = estimate_kernels(&pass, &kernels)?;
            let residual = kernels.max_abs_change(&estimate);
            residuals.push(residual);
            kernels.damp_towards(&estimate, config.damping);
            if residual < config.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(DmftError::NoConvergence {
                iterations,
                residuals,
            });
        }
    } else {
        residuals.push(0.0);
    }

    let fresh = SourceDraws::draw(config.mc_samples, depth, n, t_len, &mut stream(config.seed, 1));
    let pass = resolve(config, &fresh, &kernels, grid, dataset)?;
    let (feature, gradient) = update_order_params(&pass.batch);
    if depth == 1 {
        kernels.feature = feature.clone();
        kernels.gradient = gradient.clone();
    }
    let pt = p * t_len;
    let train_block = |m: &DMatrix<f64>| m.view((0, 0), (pt, pt)).into_owned();
    let order = OrderParameterSet {
        grid: *grid,
        depth,
        gamma: config.gamma,
        num_samples: p,
        feature_kernels: feature.iter().map(train_block).collect(),
        gradient_kernels: gradient.iter().map(train_block).collect(),
        response_a: kernels.response_a.iter().map(train_block).collect(),
        response_b: kernels.response_b.iter().map(train_block).collect(),
        errors: pass.errors.clone(),
        predictions: pass.predictions.rows(0, p).into_owned(),
        ntk: pass.ntk.iter().map(|k| k.view((0, 0), (p, p)).into_owned()).collect(),
        targets: dataset.targets.clone(),
    };
    let test = (n > p).then(|| TestPointSolution {
        predictions: pass.predictions.rows(p, n - p).into_owned(),
        ntk: pass.ntk.iter().map(|k| k.view((0, p), (p, n - p)).into_owned()).collect(),
    });
    Ok(SaddleSolution {
        order,
        test,
        kernels,
        batch: pass.batch,
        convergence: ConvergenceReport {
            iterations,
            residuals,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(layers: usize, gamma: f64, act: Activation, s: usize) -> SaddleConfig {
        SaddleConfig {
            hidden_layers: layers,
            gamma,
            activation: act,
            reduction: LossReduction::Sum,
            mc_samples: s,
            damping: 0.4,
            tol: 1e-4,
            max_iters: 100,
            seed: 17,
        }
    }

    #[test]
    fn constant_ntk_gives_geometric_decay() {
        let grid = TimeGrid::gradient_flow(0.1, 20).unwrap();
        let k = vec![DMatrix::from_element(1, 1, 2.0); 20];
        let (e, f) = integrate_predictions(&k, &[1.5], &grid, LossReduction::Sum).unwrap();
        for t in 0..20 {
            assert!((e[(0, t)] - 1.5 * 0.8f64.powi(t as i32)).abs() < 1e-12);
            assert!((e[(0, t)] + f[(0, t)] - 1.5).abs() < 1e-12);
        }
        let zero = vec![DMatrix::zeros(1, 1); 20];
        let (e, _) = integrate_predictions(&zero, &[1.5], &grid, LossReduction::Sum).unwrap();
        assert!(e.iter().all(|&v| v == 1.5));
    }

    #[test]
    fn zero_gamma_fields_equal_sources() {
        let ds = Dataset::single_point(4, 1.0, Some(0.5)).unwrap();
        let grid = TimeGrid::gradient_flow(0.1, 6).unwrap();
        let sol = solve_saddle(&config(1, 0.0, Activation::Tanh, 500), &ds, &grid).unwrap();
        let b = &sol.batch;
        for s in 0..10 {
            for mu in 0..2 {
                for t in 0..6 {
                    assert_eq!(b.layers[0].h[b.index(s, mu, t)], b.sources.u[0][(s, mu)]);
                    assert_eq!(b.layers[0].z[b.index(s, mu, t)], b.sources.r[0][(s, 0)]);
                }
            }
        }
        // static kernel: constant NTK
        let k0 = sol.order.ntk[0][(0, 0)];
        assert!(sol.order.ntk.iter().all(|k| (k[(0, 0)] - k0).abs() < 1e-12));
        assert_eq!(sol.convergence.iterations, 1);
    }

    #[test]
    fn linear_single_point_matches_product_form() {
        // h(t+1) = h + γηΔ z, z(t+1) = z + γηΔ h  =>  v± = h ± z scale by (1 ± γηΔ)
        let ds = Dataset::single_point(3, 1.0, None).unwrap();
        let grid = TimeGrid::gradient_flow(0.05, 30).unwrap();
        let gamma = 1.3;
        let sol = solve_saddle(&config(1, gamma, Activation::Linear, 200), &ds, &grid).unwrap();
        let b = &sol.batch;
        let delta = sol.order.errors.row(0);
        for s in 0..b.num_mc {
            let (u, r) = (b.sources.u[0][(s, 0)], b.sources.r[0][(s, 0)]);
            let (mut vp, mut vm) = (u + r, u - r);
            for t in 0..30 {
                let h = b.layers[0].h[b.index(s, 0, t)];
                let z = b.layers[0].z[b.index(s, 0, t)];
                assert!((h - 0.5 * (vp + vm)).abs() < 1e-10 * (1.0 + h.abs()));
                assert!((z - 0.5 * (vp - vm)).abs() < 1e-10 * (1.0 + z.abs()));
                vp *= 1.0 + gamma * 0.05 * delta[t];
                vm *= 1.0 - gamma * 0.05 * delta[t];
            }
        }
    }

    #[test]
    fn causality_of_fields() {
        let ds = Dataset::single_point(3, 1.0, None).unwrap();
        let grid = TimeGrid::gradient_flow(0.1, 10).unwrap();
        let cfg = config(1, 1.0, Activation::Tanh, 50);
        let kernels = lazy_initial_guess(&cfg, &ds.gram(), &grid).unwrap();
        let draws = SourceDraws::draw(50, 1, 1, 10, &mut stream(1, 0));
        let d1 = DMatrix::from_fn(1, 10, |_, t| 1.0 / (1.0 + t as f64));
        let mut d2 = d1.clone();
        for t in 6..10 {
            d2[(0, t)] += 3.0;
        }
        let run = |d: &DMatrix<f64>| {
            solve_single_site(draws.colour(&kernels).unwrap(), &kernels, cfg.activation, 1.0, &grid, 1, ErrorDrive::Fixed(d))
                .unwrap()
        };
        let (a, b) = (run(&d1), run(&d2));
        for s in 0..50 {
            for t in 0..=6 {
                let i = a.batch.index(s, 0, t);
                assert_eq!(a.batch.layers[0].h[i], b.batch.layers[0].h[i]);
            }
        }
    }

    #[test]
    fn one_hidden_layer_has_no_responses() {
        let ds = Dataset::single_point(3, 1.0, None).unwrap();
        let grid = TimeGrid::gradient_flow(0.1, 5).unwrap();
        let sol = solve_saddle(&config(1, 1.0, Activation::Tanh, 100), &ds, &grid).unwrap();
        assert!(sol.order.response_a.is_empty() && sol.order.response_b.is_empty());
        sol.order.validate(1e-8).unwrap();
    }

    #[test]
    fn deep_saddle_converges_and_is_causal() {
        let ds = Dataset::single_point(3, 1.0, None).unwrap();
        let grid = TimeGrid::gradient_flow(0.2, 6).unwrap();
        let sol = solve_saddle(&config(2, 1.0, Activation::Tanh, 2000), &ds, &grid).unwrap();
        assert!(*sol.convergence.residuals.last().unwrap() < 1e-4);
        sol.order.validate(1e-8).unwrap();
        assert!(sol.order.errors[(0, 5)].abs() < sol.order.errors[(0, 0)].abs());
    }

    #[test]
    fn bad_damping_rejected() {
        let mut cfg = config(1, 1.0, Activation::Tanh, 10);
        cfg.damping = 0.0;
        assert!(cfg.validate().is_err());
    }
}
