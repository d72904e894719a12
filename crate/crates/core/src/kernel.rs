//! Smoothing kernels and bandwidth rules.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Gaussian,
    Epanechnikov,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Kernel {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => INV_SQRT_2PI * (-0.5 * u * u).exp(),
            Kernel::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }

    /// Product kernel over coordinates, each scaled by its own bandwidth.
    pub fn eval_product(self, x: &[f64], at: &[f64], h: &[f64]) -> f64 {
        let mut k = 1.0;
        for j in 0..x.len() {
            k *= self.eval((x[j] - at[j]) / h[j]);
            if k == 0.0 {
                break;
            }
        }
        k
    }

    /// `integral K(u)^2 du`.
    pub fn roughness(self) -> f64 {
        match self {
            Kernel::Gaussian => 0.5 / std::f64::consts::PI.sqrt(),
            Kernel::Epanechnikov => 0.6,
        }
    }
}

/// Silverman's rule `1.06 * sd * n^(-1/(p+4))`, times an extra `n^(-undersmooth)`.
pub fn rule_of_thumb(sd: f64, n: usize, p: usize, undersmooth: f64) -> f64 {
    let n = n as f64;
    1.06 * sd * n.powf(-1.0 / (p as f64 + 4.0)) * n.powf(-undersmooth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrate(f: impl Fn(f64) -> f64) -> f64 {
        // trapezoid on [-10, 10]
        let m = 200_000;
        let h = 20.0 / m as f64;
        (0..=m)
            .map(|i| {
                let w = if i == 0 || i == m { 0.5 } else { 1.0 };
                w * f(-10.0 + i as f64 * h)
            })
            .sum::<f64>()
            * h
    }

    #[test]
    fn kernels_integrate_to_one() {
        for k in [Kernel::Gaussian, Kernel::Epanechnikov] {
            assert!((integrate(|u| k.eval(u)) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn roughness_matches_quadrature() {
        for k in [Kernel::Gaussian, Kernel::Epanechnikov] {
            let q = integrate(|u| k.eval(u).powi(2));
            assert!((q - k.roughness()).abs() < 1e-6, "{k:?}: {q}");
        }
        assert!((Kernel::Gaussian.roughness() - 0.2821).abs() < 1e-4);
    }

    #[test]
    fn bandwidth_rule() {
        assert!((rule_of_thumb(1.0, 1, 1, 0.0) - 1.06).abs() < 1e-15);
        let h = rule_of_thumb(2.0, 1000, 1, 0.1);
        assert!((h - 1.06 * 2.0 * 1000f64.powf(-0.3)).abs() < 1e-12);
    }
}
