use nalgebra::DMatrix;

use crate::error::{DmftError, Result};
use crate::grid::TimeGrid;

/// Exact infinite-width trajectory of a linear two-layer net on one point with `|x|² = D`.
///
/// With `v± = h ± z`, one step multiplies `v±` by `1 ± γ·step·Δ`, so the field
/// second moments are `2 c±(t)²` with `c±(t) = Π_{s<t} (1 ± γ·step·Δ(s))`.
#[derive(Debug, Clone)]
pub struct LinearSaddle {
    pub errors: Vec<f64>,
    pub ntk: Vec<f64>,
    pub c_plus: Vec<f64>,
    pub c_minus: Vec<f64>,
}

pub fn linear_saddle(target: f64, gamma: f64, grid: &TimeGrid) -> LinearSaddle {
    let t_len = grid.num_steps();
    let eta = grid.step_size();
    let (mut errors, mut ntk, mut c_plus, mut c_minus) =
        (Vec::with_capacity(t_len), Vec::with_capacity(t_len), Vec::with_capacity(t_len), Vec::with_capacity(t_len));
    let (mut delta, mut cp, mut cm) = (target, 1.0, 1.0);
    for _ in 0..t_len {
        let k = cp * cp + cm * cm;
        errors.push(delta);
        ntk.push(k);
        c_plus.push(cp);
        c_minus.push(cm);
        cp *= 1.0 + gamma * eta * delta;
        cm *= 1.0 - gamma * eta * delta;
        delta -= eta * k * delta;
    }
    LinearSaddle {
        errors,
        ntk,
        c_plus,
        c_minus,
    }
}

/// Sampling-free `κ`, `D` and initial-output moments for the linear single-point process.
#[derive(Debug, Clone)]
pub struct LinearClosedForm {
    pub c_plus: Vec<f64>,
    pub c_minus: Vec<f64>,
    /// `Cov(K(t), K(s))` per neuron.
    pub kappa: DMatrix<f64>,
    /// `∂⟨K(t)⟩/∂Δ(s)` per unit time.
    pub d: DMatrix<f64>,
    /// `Var(r u / γ)`, the per-neuron initial output variance.
    pub var_f0: f64,
    /// `Cov(r u / γ, K(t))`.
    pub cov_f0_kernel: Vec<f64>,
}

/// Closed form driven by an arbitrary error trajectory (product form of the Euler fields).
pub fn closed_form_linear(errors: &[f64], gamma: f64, grid: &TimeGrid) -> Result<LinearClosedForm> {
    let t_len = grid.num_steps();
    if errors.len() != t_len {
        return Err(DmftError::Dimension(format!("{} errors for {t_len} steps", errors.len())));
    }
    let eta = grid.step_size();
    let mut c_plus = vec![1.0; t_len];
    let mut c_minus = vec![1.0; t_len];
    for t in 1..t_len {
        c_plus[t] = c_plus[t - 1] * (1.0 + gamma * eta * errors[t - 1]);
        c_minus[t] = c_minus[t - 1] * (1.0 - gamma * eta * errors[t - 1]);
    }
    let kappa = DMatrix::from_fn(t_len, t_len, |t, s| {
        let a = c_plus[t] * c_plus[s];
        let b = c_minus[t] * c_minus[s];
        (a + b).powi(2) + (a - b).powi(2)
    });
    // ∂c±(t)/∂Δ(s) = ±γη c±(s) Π_{s<r<t} (1 ± γηΔ_r), kept division-free
    let mut d = DMatrix::zeros(t_len, t_len);
    for s in 0..t_len {
        let (mut tail_plus, mut tail_minus) = (c_plus[s], c_minus[s]);
        for t in s + 1..t_len {
            d[(t, s)] = 2.0 * gamma * (c_plus[t] * tail_plus - c_minus[t] * tail_minus);
            tail_plus *= 1.0 + gamma * eta * errors[t];
            tail_minus *= 1.0 - gamma * eta * errors[t];
        }
    }
    let (var_f0, cov_f0_kernel) = if gamma > 0.0 {
        (
            1.0 / (gamma * gamma),
            (0..t_len)
                .map(|t| (c_plus[t].powi(2) - c_minus[t].powi(2)) / gamma)
                .collect(),
        )
    } else {
        (f64::INFINITY, vec![0.0; t_len])
    };
    Ok(LinearClosedForm {
        c_plus,
        c_minus,
        kappa,
        d,
        var_f0,
        cov_f0_kernel,
    })
}

/// Continuous-time version with `c±(t) = exp(±γ ∫₀ᵗ Δ)`; differs from the product form at `O(step)`.
pub fn closed_form_linear_continuous(errors: &[f64], gamma: f64, grid: &TimeGrid) -> Result<LinearClosedForm> {
    let t_len = grid.num_steps();
    if errors.len() != t_len {
        return Err(DmftError::Dimension(format!("{} errors for {t_len} steps", errors.len())));
    }
    let eta = grid.step_size();
    let mut integral = vec![0.0; t_len];
    for t in 1..t_len {
        integral[t] = integral[t - 1] + eta * errors[t - 1];
    }
    let c_plus: Vec<f64> = integral.iter().map(|i| (gamma * i).exp()).collect();
    let c_minus: Vec<f64> = integral.iter().map(|i| (-gamma * i).exp()).collect();
    let kappa = DMatrix::from_fn(t_len, t_len, |t, s| {
        let a = c_plus[t] * c_plus[s];
        let b = c_minus[t] * c_minus[s];
        (a + b).powi(2) + (a - b).powi(2)
    });
    let d = DMatrix::from_fn(t_len, t_len, |t, s| {
        if s >= t {
            0.0
        } else {
            2.0 * gamma * (c_plus[t].powi(2) - c_minus[t].powi(2))
        }
    });
    let cov_f0_kernel = (0..t_len)
        .map(|t| if gamma > 0.0 { (c_plus[t].powi(2) - c_minus[t].powi(2)) / gamma } else { 0.0 })
        .collect();
    Ok(LinearClosedForm {
        c_plus,
        c_minus,
        kappa,
        d,
        var_f0: if gamma > 0.0 { 1.0 / (gamma * gamma) } else { f64::INFINITY },
        cov_f0_kernel,
    })
}
