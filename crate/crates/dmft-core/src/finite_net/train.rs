use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::network::{forward, Dataset, ForwardPass, NetworkConfig, Parameters};
use crate::error::{DmftError, Result};
use crate::grid::TimeGrid;

/// How per-sample squared errors are combined into the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// `L = ½ Σ_μ (f_μ - y_μ)²`, giving `df_μ/dt = Σ_ν K_μν Δ_ν`.
    #[default]
    Sum,
    /// `L = (1/2P) Σ_μ (f_μ - y_μ)²`, giving `df_μ/dt = (1/P) Σ_ν K_μν Δ_ν`.
    Mean,
}

impl LossReduction {
    pub fn factor(self, num_samples: usize) -> f64 {
        match self {
            LossReduction::Sum => 1.0,
            LossReduction::Mean => 1.0 / num_samples as f64,
        }
    }
}

/// What to record along a trajectory besides predictions and errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordOptions {
    pub ntk: bool,
    pub layer_kernels: bool,
}

impl Default for RecordOptions {
    fn default() -> Self {
        Self {
            ntk: true,
            layer_kernels: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainOptions {
    pub reduction: LossReduction,
    /// Train and report `f̃ = f - f(θ₀)` instead of `f`.
    pub background_subtract: bool,
    pub record: RecordOptions,
}

/// Observables recorded at every grid time, before that step's update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingTrajectory {
    pub grid: TimeGrid,
    /// `P x T`.
    pub predictions: DMatrix<f64>,
    /// `P x T`, `Δ = y - f`.
    pub errors: DMatrix<f64>,
    /// `K_μν(t)`, one `P x P` per step.
    pub ntk: Option<Vec<DMatrix<f64>>>,
    /// `Φ^ℓ(t,t)` per hidden layer, then per step (`P x P`).
    pub feature_kernels: Option<Vec<Vec<DMatrix<f64>>>>,
    /// `G^ℓ(t,t)` per hidden layer, then per step (`P x P`).
    pub gradient_kernels: Option<Vec<Vec<DMatrix<f64>>>>,
    /// `Q x T` held-out predictions.
    pub test_predictions: Option<DMatrix<f64>>,
    /// Train-test NTK `K⋆_{μq}(t)`, one `P x Q` per step.
    pub test_ntk: Option<Vec<DMatrix<f64>>>,
    pub warnings: Vec<String>,
}

impl TrainingTrajectory {
    /// `Σ_μ Δ_μ(t)²` at every step.
    pub fn squared_error(&self) -> Vec<f64> {
        self.errors
            .column_iter()
            .map(|c| c.norm_squared())
            .collect()
    }

    /// Time series of one NTK entry.
    pub fn ntk_entry(&self, mu: usize, nu: usize) -> Option<Vec<f64>> {
        self.ntk
            .as_ref()
            .map(|k| k.iter().map(|m| m[(mu, nu)]).collect())
    }
}

/// Loss and its gradient with respect to every parameter block.
pub struct LossGradient {
    pub loss: f64,
    pub grad: Parameters,
}

fn combined_inputs(dataset: &Dataset) -> DMatrix<f64> {
    match &dataset.test_inputs {
        None => dataset.inputs.clone(),
        Some(t) => {
            let p = dataset.num_samples();
            let q = t.ncols();
            let mut x = DMatrix::zeros(dataset.input_dim(), p + q);
            x.columns_mut(0, p).copy_from(&dataset.inputs);
            x.columns_mut(p, q).copy_from(t);
            x
        }
    }
}

fn gradient_from_pass(
    config: &NetworkConfig,
    dataset: &Dataset,
    pass: &ForwardPass,
    grads: &[DMatrix<f64>],
    residual: &DVector<f64>,
) -> Parameters {
    // residual e_μ = ∂L/∂f_μ over training columns only
    let p = dataset.num_samples();
    let n = config.width as f64;
    let scale = config.gamma * n;
    let l = config.hidden_layers;
    let act_top = pass.activations[l - 1].columns(0, p);
    let readout = act_top * residual / scale;
    let weighted = |g: &DMatrix<f64>| {
        let mut m = g.columns(0, p).into_owned();
        for (j, mut c) in m.column_iter_mut().enumerate() {
            c *= residual[j];
        }
        m
    };
    let input_weights =
        weighted(&grads[0]) * dataset.inputs.transpose() / (scale * (config.input_dim as f64).sqrt());
    let hidden_weights = (0..l - 1)
        .map(|k| {
            weighted(&grads[k + 1]) * pass.activations[k].columns(0, p).transpose() / (scale * n.sqrt())
        })
        .collect();
    Parameters {
        input_weights,
        hidden_weights,
        readout,
    }
}

/// Loss `L` and `∇θ L` at `params`; `offset` is subtracted from outputs (background subtraction).
pub fn loss_gradient(
    params: &Parameters,
    config: &NetworkConfig,
    dataset: &Dataset,
    reduction: LossReduction,
    offset: Option<&DVector<f64>>,
) -> LossGradient {
    let pass = forward(params, config, &dataset.inputs);
    let grads = pass.gradients(params, config.activation);
    let p = dataset.num_samples();
    let c = reduction.factor(p);
    let mut residual = DVector::zeros(p);
    let mut loss = 0.0;
    for mu in 0..p {
        let f = pass.outputs[mu] - offset.map_or(0.0, |o| o[mu]);
        let e = f - dataset.targets[mu];
        loss += 0.5 * c * e * e;
        residual[mu] = c * e;
    }
    let grad = gradient_from_pass(config, dataset, &pass, &grads, &residual);
    LossGradient { loss, grad }
}

fn kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, n: f64) -> DMatrix<f64> {
    a.transpose() * b / n
}

/// Trains by explicit Euler gradient flow (or discrete GD) `θ ← θ - step · Nγ² ∇θL`.
pub fn train(
    params: &Parameters,
    config: &NetworkConfig,
    dataset: &Dataset,
    grid: &TimeGrid,
    options: &TrainOptions,
) -> Result<TrainingTrajectory> {
    config.validate()?;
    if dataset.input_dim() != config.input_dim {
        return Err(DmftError::Dimension(format!(
            "dataset dimension {} but network input_dim {}",
            dataset.input_dim(),
            config.input_dim
        )));
    }
    let p = dataset.num_samples();
    let q = dataset.test_inputs.as_ref().map_or(0, |t| t.ncols());
    let t_len = grid.num_steps();
    let l = config.hidden_layers;
    let n = config.width as f64;
    let c = options.reduction.factor(p);
    let lr = grid.step_size() * n * config.gamma * config.gamma;
    let x_all = combined_inputs(dataset);
    let d = config.input_dim as f64;
    let gram_all = x_all.transpose() * &x_all / d;

    let mut theta = params.clone();
    let mut predictions = DMatrix::zeros(p, t_len);
    let mut errors = DMatrix::zeros(p, t_len);
    let mut test_predictions = (q > 0).then(|| DMatrix::zeros(q, t_len));
    let mut ntk = options.record.ntk.then(|| Vec::with_capacity(t_len));
    let mut test_ntk = (options.record.ntk && q > 0).then(|| Vec::with_capacity(t_len));
    let mut feature_kernels = options.record.layer_kernels.then(|| vec![Vec::with_capacity(t_len); l]);
    let mut gradient_kernels = options.record.layer_kernels.then(|| vec![Vec::with_capacity(t_len); l]);
    let mut offset: Option<DVector<f64>> = None;
    let mut warnings = Vec::new();
    let mut prev_loss = f64::INFINITY;

    for j in 0..t_len {
        let pass = forward(&theta, config, &x_all);
        if !pass.outputs.iter().all(|v| v.is_finite()) {
            return Err(DmftError::Divergence {
                step: j,
                context: "non-finite network output".into(),
            });
        }
        if j == 0 && options.background_subtract {
            offset = Some(pass.outputs.clone());
        }
        let shifted = |k: usize| pass.outputs[k] - offset.as_ref().map_or(0.0, |o| o[k]);
        let mut residual = DVector::zeros(p);
        let mut loss = 0.0;
        for mu in 0..p {
            let f = shifted(mu);
            predictions[(mu, j)] = f;
            errors[(mu, j)] = dataset.targets[mu] - f;
            residual[mu] = c * (f - dataset.targets[mu]);
            loss += 0.5 * c * (f - dataset.targets[mu]).powi(2);
        }
        if let Some(tp) = test_predictions.as_mut() {
            for k in 0..q {
                tp[(k, j)] = shifted(p + k);
            }
        }
        if j > 0 && j <= 5 && loss > prev_loss * (1.0 + 1e-12) {
            warnings.push(format!("loss increased at step {j}; step size may be too large"));
        }
        prev_loss = loss;

        let grads = pass.gradients(&theta, config.activation);
        if options.record.ntk || options.record.layer_kernels {
            let phis: Vec<DMatrix<f64>> = pass.activations.iter().map(|a| kernel(a, a, n)).collect();
            let gs: Vec<DMatrix<f64>> = grads.iter().map(|g| kernel(g, g, n)).collect();
            if let (Some(fk), Some(gk)) = (feature_kernels.as_mut(), gradient_kernels.as_mut()) {
                for k in 0..l {
                    fk[k].push(phis[k].view((0, 0), (p, p)).into_owned());
                    gk[k].push(gs[k].view((0, 0), (p, p)).into_owned());
                }
            }
            if options.record.ntk {
                let mut k_all = gs[0].component_mul(&gram_all);
                for k in 1..l {
                    k_all += gs[k].component_mul(&phis[k - 1]);
                }
                k_all += &phis[l - 1];
                ntk.as_mut().unwrap().push(k_all.view((0, 0), (p, p)).into_owned());
                if let Some(tk) = test_ntk.as_mut() {
                    tk.push(k_all.view((0, p), (p, q)).into_owned());
                }
            }
        }

        if j + 1 == t_len {
            break;
        }
        let g = gradient_from_pass(config, dataset, &pass, &grads, &residual);
        theta.input_weights -= g.input_weights * lr;
        for (w, gw) in theta.hidden_weights.iter_mut().zip(g.hidden_weights) {
            *w -= gw * lr;
        }
        theta.readout -= g.readout * lr;
        if !theta.all_finite() {
            return Err(DmftError::Divergence {
                step: j + 1,
                context: "non-finite parameters".into(),
            });
        }
    }

    Ok(TrainingTrajectory {
        grid: *grid,
        predictions,
        errors,
        ntk,
        feature_kernels,
        gradient_kernels,
        test_predictions,
        test_ntk,
        warnings,
    })
}

/// Relative error between the analytic gradient and central finite differences on chosen coordinates.
///
/// Coordinates index the flattened parameter vector `[W⁰, W¹, ..., w]` (column-major blocks).
pub fn gradient_check(
    params: &Parameters,
    config: &NetworkConfig,
    dataset: &Dataset,
    reduction: LossReduction,
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let analytic = loss_gradient(params, config, dataset, reduction, None).grad;
    let flat_grad = flatten(&analytic);
    coords
        .iter()
        .map(|&k| {
            let mut plus = params.clone();
            let mut minus = params.clone();
            *coord_mut(&mut plus, k) += h;
            *coord_mut(&mut minus, k) -= h;
            let lp = loss_gradient(&plus, config, dataset, reduction, None).loss;
            let lm = loss_gradient(&minus, config, dataset, reduction, None).loss;
            let fd = (lp - lm) / (2.0 * h);
            let a = flat_grad[k];
            (fd - a).abs() / a.abs().max(fd.abs()).max(1e-12)
        })
        .collect()
}

fn flatten(p: &Parameters) -> Vec<f64> {
    let mut v: Vec<f64> = p.input_weights.iter().cloned().collect();
    for w in &p.hidden_weights {
        v.extend(w.iter().cloned());
    }
    v.extend(p.readout.iter().cloned());
    v
}

fn coord_mut(p: &mut Parameters, mut k: usize) -> &mut f64 {
    if k < p.input_weights.len() {
        return &mut p.input_weights.as_mut_slice()[k];
    }
    k -= p.input_weights.len();
    for w in p.hidden_weights.iter_mut() {
        if k < w.len() {
            return &mut w.as_mut_slice()[k];
        }
        k -= w.len();
    }
    &mut p.readout.as_mut_slice()[k]
}
