//! Calibration weights that decide how much of each prediction residual
//! enters the influence function.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nuisance::LocalMoments;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    /// No calibration: plain AIPW.
    Zero,
    /// `gamma(x) / nu(x)` from local moments.
    #[default]
    Smooth,
    /// Per-stratum residual regression, valid under misspecified nuisances.
    Robust,
}

impl WeightKind {
    pub fn name(self) -> &'static str {
        match self {
            WeightKind::Zero => "zero",
            WeightKind::Smooth => "smooth",
            WeightKind::Robust => "robust",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zero" => Some(WeightKind::Zero),
            "smooth" => Some(WeightKind::Smooth),
            "robust" => Some(WeightKind::Robust),
            _ => None,
        }
    }
}

/// Lower bound on the prediction variance below which the weight is zero:
/// `1e-8` times the sample variance of the predictions, plus a rounding
/// allowance on the scale of their second moment.
pub fn variance_floor(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let second = values.iter().map(|v| v * v).sum::<f64>() / n;
    1e-8 * var + 64.0 * f64::EPSILON * second
}

/// `omega = gamma / nu` for moments of `(Y, Y-dagger)`; zero below the floor.
pub fn smooth_weight(m: &LocalMoments, floor: f64) -> f64 {
    let gamma = m.cov(0, 1);
    let nu = m.cov(1, 1);
    if nu > 0.0 && nu >= floor {
        gamma / nu
    } else {
        0.0
    }
}

/// Robust weights, one per stratum of the coarse covariate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustWeights {
    pub table: BTreeMap<u32, f64>,
}

impl RobustWeights {
    /// Weighted residual regression through the origin within each stratum:
    /// `sum lambda r r-dagger / sum lambda r-dagger^2`.
    ///
    /// Each entry is `(stratum, lambda, outcome residual, prediction residual)`
    /// for one arm-t subject. Strata with fewer than two subjects or a
    /// degenerate denominator get weight zero.
    pub fn fit(rows: &[(u32, f64, f64, f64)]) -> Self {
        let mut acc: BTreeMap<u32, (usize, f64, f64, Vec<f64>)> = BTreeMap::new();
        for &(s, lam, r, rd) in rows {
            let e = acc.entry(s).or_insert((0, 0.0, 0.0, Vec::new()));
            e.0 += 1;
            e.1 += lam * r * rd;
            e.2 += lam * rd * rd;
            e.3.push(rd * lam.sqrt());
        }
        let table = acc
            .into_iter()
            .map(|(s, (count, num, den, scaled))| {
                let floor = variance_floor(&scaled) * count as f64;
                let w = if count >= 2 && den > 0.0 && den >= floor { num / den } else { 0.0 };
                if count < 2 {
                    log::warn!("stratum {s} has {count} subject(s); robust weight set to zero");
                }
                (s, w)
            })
            .collect();
        RobustWeights { table }
    }

    pub fn get(&self, stratum: u32) -> f64 {
        match self.table.get(&stratum) {
            Some(w) => *w,
            None => {
                log::warn!("stratum {stratum} unseen when fitting robust weights; using zero");
                0.0
            }
        }
    }
}

/// `Sigma_V^{-1} Cov(V, Z)` from the local moments of `(V_t, V_t', Z)`.
///
/// A ridge of `1e-6 * trace / 2` is added when `Sigma_V` is singular or its
/// condition number exceeds `1e8`.
pub fn ate_weight(m: &LocalMoments) -> [f64; 2] {
    let (a, b, d) = (m.cov(0, 0), m.cov(0, 1), m.cov(1, 1));
    let c = [m.cov(0, 2), m.cov(1, 2)];
    let tr = a + d;
    if !(tr > 0.0) {
        return [0.0, 0.0];
    }
    let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let hi = 0.5 * tr + disc;
    let lo = 0.5 * tr - disc;
    let (a, d) = if lo <= 0.0 || hi / lo > 1e8 {
        let ridge = 1e-6 * tr / 2.0;
        (a + ridge, d + ridge)
    } else {
        (a, d)
    };
    let det = a * d - b * b;
    if !(det > 0.0) {
        return [0.0, 0.0];
    }
    [(d * c[0] - b * c[1]) / det, (a * c[1] - b * c[0]) / det]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments2(cov: [[f64; 2]; 2]) -> LocalMoments {
        LocalMoments { mean: vec![0.0, 0.0], cov: vec![cov[0][0], cov[0][1], cov[1][0], cov[1][1]] }
    }

    #[test]
    fn smooth_weight_is_ratio_or_zero() {
        assert!((smooth_weight(&moments2([[2.0, 0.6], [0.6, 1.5]]), 1e-10) - 0.4).abs() < 1e-15);
        assert_eq!(smooth_weight(&moments2([[2.0, 0.0], [0.0, 0.0]]), 0.0), 0.0);
        assert_eq!(smooth_weight(&moments2([[2.0, 1e-12], [1e-12, 1e-12]]), 1e-9), 0.0);
    }

    #[test]
    fn constant_predictions_have_positive_floor_and_zero_weight() {
        let v = vec![5.0; 50];
        let floor = variance_floor(&v);
        assert!(floor > 0.0);
        assert_eq!(smooth_weight(&moments2([[1.0, 0.0], [0.0, 0.0]]), floor), 0.0);
    }

    #[test]
    fn robust_weight_constant_lambda_is_ols_through_origin() {
        let rows: Vec<(u32, f64, f64, f64)> = (0..20)
            .map(|i| {
                let rd = (i as f64 * 0.37).sin();
                let r = 0.7 * rd + 0.1 * (i as f64).cos();
                (1 + (i % 2) as u32, 1.0, r, rd)
            })
            .collect();
        let w = RobustWeights::fit(&rows);
        for s in [1u32, 2] {
            let (num, den) = rows
                .iter()
                .filter(|r| r.0 == s)
                .fold((0.0, 0.0), |(n, d), r| (n + r.2 * r.3, d + r.3 * r.3));
            assert!((w.get(s) - num / den).abs() < 1e-12);
        }
        // scaling lambda uniformly changes nothing
        let scaled: Vec<_> = rows.iter().map(|&(s, _, r, rd)| (s, 3.0, r, rd)).collect();
        let w3 = RobustWeights::fit(&scaled);
        for s in [1u32, 2] {
            assert!((w.get(s) - w3.get(s)).abs() < 1e-12);
        }
    }

    #[test]
    fn robust_weight_degenerate_strata_are_zero() {
        let rows = vec![(1, 1.0, 0.5, 0.2), (2, 1.0, 1.0, 0.0), (2, 1.0, -1.0, 0.0)];
        let w = RobustWeights::fit(&rows);
        assert_eq!(w.get(1), 0.0);
        assert_eq!(w.get(2), 0.0);
        assert_eq!(w.get(9), 0.0);
    }

    fn moments3(s: [[f64; 3]; 3]) -> LocalMoments {
        LocalMoments { mean: vec![0.0; 3], cov: s.iter().flatten().copied().collect() }
    }

    #[test]
    fn ate_weight_solves_the_linear_system() {
        let s = [[2.0, 0.5, 1.0], [0.5, 1.0, -0.3], [1.0, -0.3, 4.0]];
        let w = ate_weight(&moments3(s));
        // Sigma w = c
        assert!((2.0 * w[0] + 0.5 * w[1] - 1.0).abs() < 1e-12);
        assert!((0.5 * w[0] + 1.0 * w[1] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn ate_weight_ridge_on_singular_sigma() {
        let s = [[1.0, 1.0, 0.5], [1.0, 1.0, 0.5], [0.5, 0.5, 2.0]];
        let w = ate_weight(&moments3(s));
        assert!(w.iter().all(|v| v.is_finite()));
        // the ridge solution splits the weight evenly
        assert!((w[0] - w[1]).abs() < 1e-9);
        assert!((w[0] + w[1] - 0.5).abs() < 1e-5);
        assert_eq!(ate_weight(&moments3([[0.0; 3]; 3])), [0.0, 0.0]);
    }
}
