use serde::{Deserialize, Serialize};

use crate::error::{DmftError, Result};
use crate::grid::TimeGrid;

/// How the infinite-width signal dynamics are stepped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignalScheme {
    /// The exact moment map of one gradient step of size `η`; identical to the Euler-trained network.
    #[default]
    Discrete,
    /// RK4 on the gradient-flow moment equations, four substeps per grid step.
    Continuous,
}

/// Signal-direction moments `A = ⟨h_y²⟩`, `B = ⟨z²⟩` and the prediction `f = ⟨h_y z⟩/γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalMoments {
    pub a: f64,
    pub b: f64,
    pub f: f64,
}

impl SignalMoments {
    pub const INIT: Self = Self { a: 1.0, b: 1.0, f: 0.0 };

    pub fn kernel(&self) -> f64 {
        self.a + self.b
    }

    fn to_array(self) -> [f64; 3] {
        [self.a, self.b, self.f]
    }

    fn from_array(v: [f64; 3]) -> Self {
        Self { a: v[0], b: v[1], f: v[2] }
    }
}

/// One exact gradient step of the signal moments with `Δ = y - f`:
/// `f' = f + ηKΔ + η²γ²Δ²f`, `A' = A + 2ηγ²Δf + η²γ²Δ²B`, `B' = B + 2ηγ²Δf + η²γ²Δ²A`.
pub fn signal_step(m: [f64; 3], y: f64, gamma: f64, eta: f64) -> [f64; 3] {
    let [a, b, f] = m;
    let d = y - f;
    let g2 = gamma * gamma;
    let e2 = eta * eta * g2 * d * d;
    [
        a + 2.0 * eta * g2 * d * f + e2 * b,
        b + 2.0 * eta * g2 * d * f + e2 * a,
        f + eta * (a + b) * d + e2 * f,
    ]
}

fn flow_rhs(m: [f64; 3], y: f64, gamma: f64) -> [f64; 3] {
    let [a, b, f] = m;
    let d = y - f;
    let g2 = gamma * gamma;
    [2.0 * g2 * d * f, 2.0 * g2 * d * f, (a + b) * d]
}

fn rk4_step(m: [f64; 3], y: f64, gamma: f64, h: f64) -> [f64; 3] {
    let add = |x: [f64; 3], k: [f64; 3], s: f64| [x[0] + s * k[0], x[1] + s * k[1], x[2] + s * k[2]];
    let k1 = flow_rhs(m, y, gamma);
    let k2 = flow_rhs(add(m, k1, h / 2.0), y, gamma);
    let k3 = flow_rhs(add(m, k2, h / 2.0), y, gamma);
    let k4 = flow_rhs(add(m, k3, h), y, gamma);
    let mut out = m;
    for i in 0..3 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Infinite-width error and kernel along the target direction of whitened data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalSolution {
    pub grid: TimeGrid,
    pub gamma: f64,
    /// `|y|`.
    pub target: f64,
    pub scheme: SignalScheme,
    pub moments: Vec<SignalMoments>,
}

impl SignalSolution {
    /// `Δ_y(t)`.
    pub fn errors(&self) -> Vec<f64> {
        self.moments.iter().map(|m| self.target - m.f).collect()
    }

    /// `K_y(t) = A + B`.
    pub fn kernels(&self) -> Vec<f64> {
        self.moments.iter().map(SignalMoments::kernel).collect()
    }

    /// `max_t |K_y² - 4γ²(y - Δ_y)² - 4|`; zero under gradient flow, `O(η²)` per step otherwise.
    pub fn conservation_residual(&self) -> f64 {
        self.moments
            .iter()
            .map(|m| (m.kernel().powi(2) - 4.0 * self.gamma.powi(2) * m.f.powi(2) - 4.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Solves the signal dynamics from `A = B = 1`, `f = 0`.
pub fn solve_signal(gamma: f64, target: f64, grid: &TimeGrid, scheme: SignalScheme) -> Result<SignalSolution> {
    if target == 0.0 || !target.is_finite() {
        return Err(DmftError::Config(format!("target magnitude must be nonzero, got {target}")));
    }
    if !(gamma >= 0.0) {
        return Err(DmftError::Config(format!("gamma must be non-negative, got {gamma}")));
    }
    let eta = grid.step_size();
    let mut m = SignalMoments::INIT.to_array();
    let mut moments = Vec::with_capacity(grid.num_steps());
    for j in 0..grid.num_steps() {
        if !m.iter().all(|v| v.is_finite() && v.abs() < 1e12) {
            return Err(DmftError::Divergence {
                step: j,
                context: "signal moments".into(),
            });
        }
        moments.push(SignalMoments::from_array(m));
        m = match scheme {
            SignalScheme::Discrete => signal_step(m, target, gamma, eta),
            SignalScheme::Continuous => (0..4).fold(m, |x, _| rk4_step(x, target, gamma, eta / 4.0)),
        };
    }
    Ok(SignalSolution {
        grid: *grid,
        gamma,
        target,
        scheme,
        moments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lazy_limit_is_exponential() {
        let grid = TimeGrid::gradient_flow(0.01, 300).unwrap();
        let s = solve_signal(0.0, 1.5, &grid, SignalScheme::Continuous).unwrap();
        for (j, d) in s.errors().iter().enumerate() {
            assert!((d - 1.5 * (-2.0 * grid.time(j)).exp()).abs() < 1e-10);
        }
        assert!(s.kernels().iter().all(|k| (k - 2.0).abs() < 1e-14));
    }

    #[test]
    fn conservation_under_flow() {
        let grid = TimeGrid::gradient_flow(1e-3, 5000).unwrap();
        for gamma in [0.5, 1.0, 3.0] {
            let s = solve_signal(gamma, 1.0, &grid, SignalScheme::Continuous).unwrap();
            assert!(s.conservation_residual() < 1e-8, "gamma {gamma}: {}", s.conservation_residual());
            let k = s.kernels();
            let d = s.errors();
            // rate form: K_y = 2√(1 + γ²(y - Δ_y)²)
            for j in (0..5000).step_by(500) {
                let pred = 2.0 * (1.0 + (gamma * (1.0 - d[j])).powi(2)).sqrt();
                assert!((k[j] - pred).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn discrete_tracks_flow_at_first_order() {
        let errs: Vec<f64> = [0.02, 0.01]
            .iter()
            .map(|&dt| {
                let grid = TimeGrid::gradient_flow(dt, (2.0 / dt) as usize + 1).unwrap();
                let d = solve_signal(1.0, 1.0, &grid, SignalScheme::Discrete).unwrap().errors();
                let c = solve_signal(1.0, 1.0, &grid, SignalScheme::Continuous).unwrap().errors();
                d.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .collect();
        let ratio = errs[0] / errs[1];
        assert!(ratio > 1.8 && ratio < 2.2, "{errs:?}");
    }

    #[test]
    fn richer_training_is_faster() {
        let grid = TimeGrid::gradient_flow(0.005, 1000).unwrap();
        let half_time = |gamma: f64| {
            let d = solve_signal(gamma, 2.0, &grid, SignalScheme::Continuous).unwrap().errors();
            d.iter().position(|x| *x < 1.0).unwrap()
        };
        assert!(half_time(0.5) > half_time(1.0) && half_time(1.0) > half_time(2.0));
    }

    #[test]
    fn zero_target_rejected() {
        let grid = TimeGrid::gradient_flow(0.1, 3).unwrap();
        assert!(solve_signal(1.0, 0.0, &grid, SignalScheme::Discrete).is_err());
    }
}
