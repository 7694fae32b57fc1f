use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Pointwise nonlinearity `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn phi(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative `φ'`; relu uses the step with `φ'(0) = 0`.
    #[inline]
    pub fn dphi(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    /// Second derivative `φ''` (zero almost everywhere for relu).
    #[inline]
    pub fn ddphi(self, x: f64) -> f64 {
        match self {
            Activation::Linear | Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

/// Arc-cosine moments of a centered Gaussian pair with variances `a`, `b` and covariance `c`:
/// returns `(⟨relu(u) relu(v)⟩, ⟨step(u) step(v)⟩)`.
pub fn relu_gaussian_moments(a: f64, b: f64, c: f64) -> (f64, f64) {
    let norm = (a * b).sqrt();
    if norm == 0.0 {
        return (0.0, 0.25);
    }
    let rho = (c / norm).clamp(-1.0, 1.0);
    let theta = rho.acos();
    let k1 = norm / (2.0 * PI) * (theta.sin() + (PI - theta) * rho);
    let k0 = (PI - theta) / (2.0 * PI);
    (k1, k0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_finite_differences() {
        for act in [Activation::Linear, Activation::Tanh, Activation::Relu] {
            for &x in &[-1.3, -0.2, 0.4, 2.0] {
                let h = 1e-6;
                let fd = (act.phi(x + h) - act.phi(x - h)) / (2.0 * h);
                assert!((fd - act.dphi(x)).abs() < 1e-6, "{act:?} at {x}");
                let fd2 = (act.dphi(x + h) - act.dphi(x - h)) / (2.0 * h);
                assert!((fd2 - act.ddphi(x)).abs() < 1e-5, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn relu_moments_on_diagonal() {
        let (k1, k0) = relu_gaussian_moments(2.0, 2.0, 2.0);
        assert!((k1 - 1.0).abs() < 1e-12);
        assert!((k0 - 0.5).abs() < 1e-12);
        let (k1, k0) = relu_gaussian_moments(1.0, 1.0, 0.0);
        assert!((k1 - 1.0 / (2.0 * PI)).abs() < 1e-12);
        assert!((k0 - 0.25).abs() < 1e-12);
    }
}
