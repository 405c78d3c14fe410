//! Regression losses: squared error, relative squared error and the shifted
//! Gaussian (aleatoric) likelihood loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{NnError, Result};

/// Default shift of the aleatoric loss.
pub const DEFAULT_SHIFT: f64 = 0.25;
/// Lower bound added to the softplus-transformed standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Targets with magnitude below this use it as the relative-error denominator.
pub const REL_FLOOR: f64 = 0.2;
/// Denominator floor for the diagonal columns.
pub const DIAG_FLOOR: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    /// Squared error over `max(|target|, floor)^2`. The last column (the
    /// shear entry of a Mandel triple) uses `last_floor` instead.
    RelMse { floor: f64, last_floor: f64 },
    /// Expects `2*m` prediction columns: `m` means then `m` raw scale outputs.
    Bayesian { shift: f64 },
}

impl LossKind {
    pub fn rel_mse() -> Self {
        LossKind::RelMse {
            floor: DIAG_FLOOR,
            last_floor: REL_FLOOR,
        }
    }

    pub fn bayesian() -> Self {
        LossKind::Bayesian {
            shift: DEFAULT_SHIFT,
        }
    }

    /// Number of network outputs needed to predict `targets` columns.
    pub fn output_width(&self, targets: usize) -> usize {
        match self {
            LossKind::Bayesian { .. } => 2 * targets,
            _ => targets,
        }
    }

    /// Batch loss and its gradient with respect to `pred`.
    pub fn evaluate(&self, pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
        let (n, m) = target.dim();
        assert_eq!(pred.nrows(), n, "prediction/target batch mismatch");
        assert_eq!(pred.ncols(), self.output_width(m), "prediction width");
        match *self {
            LossKind::Mse => {
                let scale = 1.0 / (n * m) as f64;
                let diff = pred - target;
                let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale;
                (loss, diff * (2.0 * scale))
            }
            LossKind::RelMse { floor, last_floor } => {
                let scale = 1.0 / (n * m) as f64;
                let mut grad = Array2::zeros((n, m));
                let mut loss = 0.0;
                for (((_, j), g), (&p, &y)) in grad.indexed_iter_mut().zip(pred.iter().zip(target.iter())) {
                    let f = if j + 1 == m { last_floor } else { floor };
                    let w = 1.0 / y.abs().max(f).powi(2);
                    let d = p - y;
                    loss += w * d * d;
                    *g = 2.0 * w * d * scale;
                }
                (loss * scale, grad)
            }
            LossKind::Bayesian { shift } => {
                let scale = 1.0 / n as f64;
                let mut grad = Array2::zeros((n, 2 * m));
                let mut loss = 0.0;
                for i in 0..n {
                    for j in 0..m {
                        let mu = pred[[i, j]];
                        let raw = pred[[i, m + j]];
                        let sigma = sigma_from_raw(raw);
                        let (phi, dmu, dsigma) = shifted_gaussian_terms(target[[i, j]], mu, sigma, shift);
                        loss += phi;
                        grad[[i, j]] = dmu * scale;
                        grad[[i, m + j]] = dsigma * sigmoid(raw) * scale;
                    }
                }
                (loss * scale, grad)
            }
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Positive standard deviation from an unconstrained network output.
#[inline]
pub fn sigma_from_raw(raw: f64) -> f64 {
    softplus(raw) + SIGMA_FLOOR
}

#[inline]
pub fn gaussian_density(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

/// `Φ = -ln(½·N(y; μ, σ²) + s)` for one output component.
pub fn bayesian_loss(y: f64, mu: f64, sigma: f64, shift: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(NnError::Config(format!("standard deviation must be positive, got {sigma}")));
    }
    Ok(shifted_gaussian_terms(y, mu, sigma, shift).0)
}

/// Loss value and partial derivatives `(Φ, ∂Φ/∂μ, ∂Φ/∂σ)`.
pub fn shifted_gaussian_terms(y: f64, mu: f64, sigma: f64, shift: f64) -> (f64, f64, f64) {
    let p = gaussian_density(y, mu, sigma);
    let inner = 0.5 * p + shift;
    let phi = -inner.ln();
    let dphi_dp = -0.5 / inner;
    let r = y - mu;
    let dp_dmu = p * r / (sigma * sigma);
    let dp_dsigma = p * (r * r / (sigma * sigma * sigma) - 1.0 / sigma);
    (phi, dphi_dp * dp_dmu, dphi_dp * dp_dsigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bayesian_loss_at_mean_unit_sigma() {
        // -ln(0.5/sqrt(2π) + 0.25)
        let expected = -(0.5 / (2.0 * PI).sqrt() + 0.25_f64).ln();
        let phi = bayesian_loss(1.3, 1.3, 1.0, 0.25).unwrap();
        assert!((phi - expected).abs() < 1e-15);
        assert!((phi - 0.79967).abs() < 5e-5);
    }

    #[test]
    fn bayesian_loss_is_bounded_far_from_mean() {
        let phi = bayesian_loss(1e6, 0.0, 1.0, 0.25).unwrap();
        assert!((phi - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        assert!(bayesian_loss(0.0, 0.0, 0.0, 0.25).is_err());
        assert!(bayesian_loss(0.0, 0.0, -1.0, 0.25).is_err());
    }

    #[test]
    fn mean_derivative_vanishes_at_target() {
        let (_, dmu, _) = shifted_gaussian_terms(0.4, 0.4, 0.3, 0.25);
        assert_eq!(dmu, 0.0);
        let h = 1e-6;
        let fd = (bayesian_loss(0.4, 0.4 + h, 0.3, 0.25).unwrap()
            - bayesian_loss(0.4, 0.4 - h, 0.3, 0.25).unwrap())
            / (2.0 * h);
        assert!(fd.abs() < 1e-9);
    }

    #[test]
    fn mse_and_relmse_values() {
        let p = array![[1.0, 0.9]];
        let y = array![[1.0, 1.0]];
        let (l, g) = LossKind::Mse.evaluate(&p, &y);
        assert!((l - 0.005).abs() < 1e-15);
        assert!((g[[0, 1]] + 0.1).abs() < 1e-15);
        let (l, _) = LossKind::rel_mse().evaluate(&array![[0.55, 0.1]], &array![[0.5, 0.0]]);
        // (0.05/0.5)^2 and (0.1/0.2)^2 averaged
        assert!((l - (0.01 + 0.25) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let y = array![[0.3, -0.2, 0.8], [1.1, 0.05, -0.4]];
        for kind in [LossKind::Mse, LossKind::rel_mse(), LossKind::bayesian()] {
            let w = kind.output_width(3);
            let p = Array2::from_shape_fn((2, w), |(i, j)| 0.1 * (i as f64 + 1.0) - 0.07 * j as f64);
            let (_, g) = kind.evaluate(&p, &y);
            let h = 1e-6;
            for i in 0..2 {
                for j in 0..w {
                    let mut a = p.clone();
                    a[[i, j]] += h;
                    let mut b = p.clone();
                    b[[i, j]] -= h;
                    let fd = (kind.evaluate(&a, &y).0 - kind.evaluate(&b, &y).0) / (2.0 * h);
                    assert!((fd - g[[i, j]]).abs() < 1e-7 * (1.0 + fd.abs()), "{kind:?} {i} {j}");
                }
            }
        }
    }
}
