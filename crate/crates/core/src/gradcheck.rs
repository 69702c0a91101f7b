//! Central-difference gradients, the reference every analytic adjoint is
//! checked against.

use crate::error::{Error, Result};

/// `(f(θ + ε e_i) − f(θ − ε e_i)) / 2ε` for every coordinate.
pub fn finite_difference_gradient<F>(f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let all: Vec<usize> = (0..theta.len()).collect();
    finite_difference_at(f, theta, eps, &all)
}

/// Central differences restricted to `coords`, returned in the same order.
pub fn finite_difference_at<F>(mut f: F, theta: &[f64], eps: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe)?;
        probe[i] = orig - eps;
        let down = f(&probe)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("finite-difference probe at coordinate {i}")));
        }
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Relative error with a small absolute floor so that gradients that are
/// zero up to rounding are not judged on their noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / scale
}

/// Summary of an analytic-vs-numeric comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSummary {
    pub name: String,
    pub checked: usize,
    pub within_tolerance: usize,
    pub worst_relative_error: f64,
    pub tolerance: f64,
    pub required_fraction: f64,
}

impl GradCheckSummary {
    pub fn from_pairs(name: impl Into<String>, pairs: &[(f64, f64)], tolerance: f64, required_fraction: f64) -> Self {
        let errors: Vec<f64> = pairs.iter().map(|&(a, n)| relative_error(a, n)).collect();
        GradCheckSummary {
            name: name.into(),
            checked: pairs.len(),
            within_tolerance: errors.iter().filter(|&&e| e <= tolerance).count(),
            worst_relative_error: errors.iter().copied().fold(0.0, f64::max),
            tolerance,
            required_fraction,
        }
    }

    pub fn fraction_within(&self) -> f64 {
        if self.checked == 0 {
            return 0.0;
        }
        self.within_tolerance as f64 / self.checked as f64
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.fraction_within() >= self.required_fraction
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_constant() {
        let g = finite_difference_gradient(|p| Ok(p[0] * p[0]), &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-7);
        let g = finite_difference_gradient(|_| Ok(42.0), &[1.0, 2.0], 1e-4).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn least_squares_slope() {
        let xs = [0.5, -1.0, 2.0, 3.5];
        let ys = [1.0, -2.5, 3.0, 8.0];
        let mse = |p: &[f64]| -> Result<f64> {
            Ok(xs.iter().zip(&ys).map(|(x, y)| (p[0] * x - y).powi(2)).sum::<f64>() / xs.len() as f64)
        };
        let a = 1.3;
        let expected = 2.0 * xs.iter().zip(&ys).map(|(x, y)| (a * x - y) * x).sum::<f64>() / xs.len() as f64;
        let g = finite_difference_gradient(mse, &[a], 1e-4).unwrap();
        assert!((g[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        assert!(finite_difference_gradient(|p| Ok(p[0]), &[1.0], 0.0).is_err());
        assert!(finite_difference_gradient(|_| Ok(f64::NAN), &[1.0], 1e-3).is_err());
    }

    #[test]
    fn summary_counts() {
        let s = GradCheckSummary::from_pairs("x", &[(1.0, 1.0), (1.0, 1.1), (0.0, 1e-12)], 1e-4, 0.6);
        assert_eq!(s.within_tolerance, 2);
        assert!(s.passed());
    }
}
