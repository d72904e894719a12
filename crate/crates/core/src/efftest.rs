//! Sup-type test of whether predictions carry information beyond the
//! covariates: `H0: Cov(Y, Y-dagger | T = t, X = x) = 0` for all `x`.
//!
//! Multivariate covariates are reduced to one coordinate. The local
//! covariance is estimated on a quantile grid and studentized; the critical
//! value of the supremum comes from a Gaussian process with the estimated
//! correlation (or, alternatively, a multiplier bootstrap).

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::RctDataset;
use crate::error::{CalmError, Result};
use crate::kernel::{self, Kernel};
use crate::par::{self, Execution};
use crate::rng::{self, tag};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    #[default]
    Gaussian,
    Multiplier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffTestConfig {
    pub coordinate: usize,
    pub grid_size: usize,
    pub bandwidth: Option<f64>,
    pub kernel: Kernel,
    pub alpha: f64,
    pub n_sim: usize,
    pub seed: u64,
    pub engine: Engine,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for EffTestConfig {
    fn default() -> Self {
        EffTestConfig {
            coordinate: 0,
            grid_size: 20,
            bandwidth: None,
            kernel: Kernel::Gaussian,
            alpha: 0.05,
            n_sim: 5000,
            seed: 0,
            engine: Engine::Gaussian,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffTestReport {
    pub t_stat: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub grid: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma: Vec<f64>,
    pub bandwidth: f64,
    pub n_arm: usize,
    pub n_sim: usize,
    pub seed: u64,
    pub engine: Engine,
    pub coordinate: usize,
    /// Negative eigenvalues of the estimated correlation set to zero.
    pub clipped_eigenvalues: usize,
}

/// Kernel estimates of the local covariance for one arm on one coordinate.
#[derive(Debug, Clone)]
pub struct CovarianceTester {
    x: Vec<f64>,
    y: Vec<f64>,
    yd: Vec<f64>,
    h: f64,
    kernel: Kernel,
    mu: Vec<f64>,
    mud: Vec<f64>,
}

impl CovarianceTester {
    pub fn new(x: Vec<f64>, y: Vec<f64>, yd: Vec<f64>, h: f64, kernel: Kernel) -> Result<Self> {
        if x.len() != y.len() || x.len() != yd.len() || x.len() < 2 {
            return Err(CalmError::domain("covariance test needs aligned columns with at least two subjects"));
        }
        if !(h > 0.0) {
            return Err(CalmError::domain("bandwidth must be positive"));
        }
        let mut t = CovarianceTester { x, y, yd, h, kernel, mu: vec![], mud: vec![] };
        let fitted: Vec<(f64, f64)> = (0..t.x.len())
            .map(|i| {
                let w = t.weights(t.x[i]);
                let s: f64 = w.iter().sum();
                (
                    w.iter().zip(&t.y).map(|(a, b)| a * b).sum::<f64>() / s,
                    w.iter().zip(&t.yd).map(|(a, b)| a * b).sum::<f64>() / s,
                )
            })
            .collect();
        (t.mu, t.mud) = fitted.into_iter().unzip();
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    fn weights(&self, at: f64) -> Vec<f64> {
        self.x.iter().map(|&xi| self.kernel.eval((xi - at) / self.h)).collect()
    }

    /// `(1 / (n h)) sum K((X_i - x) / h)`.
    pub fn density(&self, at: f64) -> f64 {
        self.weights(at).iter().sum::<f64>() / (self.n() as f64 * self.h)
    }

    /// Kernel-weighted local covariance of `(Y, Y-dagger)` at `x`.
    pub fn gamma(&self, at: f64) -> f64 {
        let w = self.weights(at);
        let s: f64 = w.iter().sum();
        if !(s > 0.0) {
            return 0.0;
        }
        let my = w.iter().zip(&self.y).map(|(a, b)| a * b).sum::<f64>() / s;
        let md = w.iter().zip(&self.yd).map(|(a, b)| a * b).sum::<f64>() / s;
        (0..self.n()).map(|i| w[i] * (self.y[i] - my) * (self.yd[i] - md)).sum::<f64>() / s
    }

    /// Plug-in influence of `gamma(x)` for each subject, with the density
    /// at `x` replaced by `fhat`.
    pub fn psi(&self, at: f64, fhat: f64) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                let k = self.kernel.eval((self.x[i] - at) / self.h);
                k / fhat * (self.y[i] - self.mu[i]) * (self.yd[i] - self.mud[i])
            })
            .collect()
    }

    /// `(gamma(x), sigma(x))` where `sigma` is the standard deviation of
    /// `sqrt(n h) (gamma(x) - gamma_true(x))`.
    pub fn gamma_and_sigma(&self, at: f64, density_floor: f64) -> (f64, f64) {
        let f = self.density(at).max(density_floor);
        let psi = self.psi(at, f);
        let s2 = psi.iter().map(|v| v * v).sum::<f64>() / (self.n() as f64 * self.h);
        (self.gamma(at), s2.sqrt())
    }
}

/// Local covariance and its standard error at `x` for one arm.
pub fn kernel_gamma(x: &[f64], y: &[f64], yd: &[f64], at: f64, h: f64, kernel: Kernel) -> Result<(f64, f64)> {
    let t = CovarianceTester::new(x.to_vec(), y.to_vec(), yd.to_vec(), h, kernel)?;
    Ok(t.gamma_and_sigma(at, 0.0))
}

/// `1.06 sd n^(-1/5) n^(-0.1)`.
pub fn default_bandwidth(x: &[f64]) -> f64 {
    kernel::rule_of_thumb(stats::sd(x), x.len(), 1, 0.1)
}

/// Equally spaced quantiles from 0.05 to 0.95.
pub fn quantile_grid(x: &[f64], m: usize) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    if m == 1 {
        return vec![stats::quantile_sorted(&v, 0.5)];
    }
    (0..m)
        .map(|j| stats::quantile_sorted(&v, 0.05 + 0.9 * j as f64 / (m - 1) as f64))
        .collect()
}

/// Draws of `sup_j |G_j|` for `G ~ N(0, R)`; returns the draws and the
/// number of clipped eigenvalues.
pub fn simulate_sup_gaussian(corr: &[f64], m: usize, n_sim: usize, seed: u64, exec: Execution) -> (Vec<f64>, usize) {
    let r = DMatrix::from_row_slice(m, m, corr);
    let eig = SymmetricEigen::new(r);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let mut clipped = 0;
    let roots: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < 0.0 {
                if l < -1e-10 * top.max(1.0) {
                    clipped += 1;
                }
                0.0
            } else {
                l.sqrt()
            }
        })
        .collect();
    if clipped > 0 {
        log::warn!("clipped {clipped} negative eigenvalue(s) of the estimated correlation matrix");
    }
    let load = &eig.eigenvectors * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(roots));
    let draws = par::map_range(exec, n_sim, |s| {
        let mut g = rng::stream(seed, &[tag::SUP_SIM, s as u64]);
        let xi: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut g)).collect();
        (0..m)
            .map(|j| (0..m).map(|k| load[(j, k)] * xi[k]).sum::<f64>().abs())
            .fold(0.0, f64::max)
    });
    (draws, clipped)
}

/// Multiplier bootstrap draws of the studentized supremum.
pub fn simulate_sup_multiplier(psi: &[Vec<f64>], n_sim: usize, seed: u64, exec: Execution) -> Vec<f64> {
    let m = psi.len();
    let n = psi.first().map_or(0, Vec::len);
    let norms: Vec<f64> = psi.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    par::map_range(exec, n_sim, |s| {
        let mut g = rng::stream(seed, &[tag::SUP_SIM, s as u64]);
        let xi: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut g)).collect();
        (0..m)
            .filter(|&j| norms[j] > 0.0)
            .map(|j| (psi[j].iter().zip(&xi).map(|(a, b)| a * b).sum::<f64>() / norms[j]).abs())
            .fold(0.0, f64::max)
    })
}

/// The `floor((1 - alpha) N) + 1`-th order statistic, so that
/// `t > cv` exactly when the p-value `#{draws >= t} / N` is below alpha.
pub fn critical_value(draws: &mut [f64], alpha: f64) -> f64 {
    draws.sort_by(f64::total_cmp);
    let n = draws.len();
    let k = (((1.0 - alpha) * n as f64).floor() as usize + 1).min(n);
    draws[k - 1]
}

fn p_value(draws: &[f64], t: f64) -> f64 {
    draws.iter().filter(|&&s| s >= t).count() as f64 / draws.len() as f64
}

/// Run the test for `arm` using the zero-shot prediction column `ydag`.
pub fn test_efficiency(d: &RctDataset, ydag: &[f64], arm: usize, cfg: &EffTestConfig) -> Result<EffTestReport> {
    d.check_arm(arm)?;
    if cfg.coordinate >= d.dim() {
        return Err(CalmError::domain(format!("coordinate {} out of range", cfg.coordinate)));
    }
    let idx: Vec<usize> = (0..d.len()).filter(|&i| d.arm(i) == arm).collect();
    let x: Vec<f64> = idx.iter().map(|&i| d.x_row(i)[cfg.coordinate]).collect();
    let y: Vec<f64> = idx.iter().map(|&i| d.y()[i]).collect();
    let yd: Vec<f64> = idx.iter().map(|&i| ydag[i]).collect();
    test_efficiency_columns(x, y, yd, cfg)
}

pub fn test_efficiency_columns(x: Vec<f64>, y: Vec<f64>, yd: Vec<f64>, cfg: &EffTestConfig) -> Result<EffTestReport> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) || cfg.n_sim == 0 || cfg.grid_size == 0 {
        return Err(CalmError::domain("need alpha in (0, 1), n_sim > 0 and a non-empty grid"));
    }
    let h = cfg.bandwidth.unwrap_or_else(|| default_bandwidth(&x));
    let grid = quantile_grid(&x, cfg.grid_size);
    let t = CovarianceTester::new(x, y, yd, h, cfg.kernel)?;
    let m = grid.len();
    let n = t.n() as f64;
    let dens: Vec<f64> = grid.iter().map(|&g| t.density(g)).collect();
    let floor = 1e-3 * dens.iter().copied().fold(0.0, f64::max);
    let psi: Vec<Vec<f64>> = par::map_range(cfg.exec, m, |j| t.psi(grid[j], dens[j].max(floor)));
    let gamma: Vec<f64> = par::map_range(cfg.exec, m, |j| t.gamma(grid[j]));
    let cov = |a: usize, b: usize| psi[a].iter().zip(&psi[b]).map(|(u, v)| u * v).sum::<f64>() / (n * h);
    let sigma: Vec<f64> = (0..m).map(|j| cov(j, j).sqrt()).collect();
    let live: Vec<bool> = sigma.iter().map(|&s| s > 0.0).collect();
    let t_stat = (0..m)
        .filter(|&j| live[j])
        .map(|j| ((n * h).sqrt() * gamma[j] / sigma[j]).abs())
        .fold(0.0, f64::max);
    let (mut draws, clipped) = match cfg.engine {
        Engine::Gaussian => {
            let mut corr = vec![0.0; m * m];
            for a in 0..m {
                for b in 0..m {
                    corr[a * m + b] = if a == b {
                        1.0
                    } else if live[a] && live[b] {
                        cov(a, b) / (sigma[a] * sigma[b])
                    } else {
                        0.0
                    };
                }
            }
            simulate_sup_gaussian(&corr, m, cfg.n_sim, cfg.seed, cfg.exec)
        }
        Engine::Multiplier => (simulate_sup_multiplier(&psi, cfg.n_sim, cfg.seed, cfg.exec), 0),
    };
    let p = p_value(&draws, t_stat);
    let cv = critical_value(&mut draws, cfg.alpha);
    Ok(EffTestReport {
        t_stat,
        critical_value: cv,
        p_value: p,
        reject: t_stat > cv,
        alpha: cfg.alpha,
        grid,
        gamma,
        sigma,
        bandwidth: h,
        n_arm: t.n(),
        n_sim: cfg.n_sim,
        seed: cfg.seed,
        engine: cfg.engine,
        coordinate: cfg.coordinate,
        clipped_eigenvalues: clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn columns(n: usize, slope: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / n as f64).collect();
        let a: Vec<f64> = (0..n).map(|i| rng::keyed_normal(1, &[i as u64])).collect();
        let b: Vec<f64> = (0..n).map(|i| rng::keyed_normal(2, &[i as u64])).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i] + a[i]).collect();
        let yd: Vec<f64> = (0..n).map(|i| slope * a[i] + b[i]).collect();
        (x, y, yd)
    }

    #[test]
    fn flat_kernel_gives_sample_covariance() {
        let (x, y, yd) = columns(200, 0.5);
        let (g, _) = kernel_gamma(&x, &y, &yd, 0.0, 1e9, Kernel::Gaussian).unwrap();
        let (my, md) = (stats::mean(&y), stats::mean(&yd));
        let c: f64 = y.iter().zip(&yd).map(|(a, b)| (a - my) * (b - md)).sum::<f64>() / 200.0;
        assert!((g - c).abs() < 1e-9, "{g} vs {c}");
    }

    #[test]
    fn statistic_is_scale_invariant_in_predictions() {
        let (x, y, yd) = columns(400, 0.3);
        let cfg = EffTestConfig { n_sim: 200, exec: Execution::Sequential, ..Default::default() };
        let a = test_efficiency_columns(x.clone(), y.clone(), yd.clone(), &cfg).unwrap();
        let scaled: Vec<f64> = yd.iter().map(|v| 7.5 * v).collect();
        let b = test_efficiency_columns(x, y, scaled, &cfg).unwrap();
        assert!((a.t_stat - b.t_stat).abs() < 1e-9 * a.t_stat.max(1.0));
    }

    #[test]
    fn single_point_critical_value_is_normal_quantile() {
        let (mut draws, _) = simulate_sup_gaussian(&[1.0], 1, 200_000, 5, Execution::Parallel);
        let cv = critical_value(&mut draws, 0.05);
        assert!((cv - 1.96).abs() < 0.03, "{cv}");
    }

    #[test]
    fn perfectly_correlated_grid_behaves_like_one_point() {
        let m = 5;
        let (mut draws, clipped) = simulate_sup_gaussian(&vec![1.0; m * m], m, 100_000, 6, Execution::Parallel);
        assert_eq!(clipped, 0);
        let cv = critical_value(&mut draws, 0.05);
        assert!((cv - 1.96).abs() < 0.03, "{cv}");
    }

    #[test]
    fn decision_agrees_with_p_value() {
        let mut draws: Vec<f64> = (0..1000).map(|i| i as f64 / 100.0).collect();
        let cv = critical_value(&mut draws, 0.05);
        for t in [cv - 1e-9, cv, cv + 1e-9, 0.0, 20.0, 9.5, 9.51] {
            let p = p_value(&draws, t);
            assert_eq!(t > cv, p < 0.05, "t = {t}, cv = {cv}, p = {p}");
        }
    }

    #[test]
    fn detects_strong_dependence() {
        let (x, y, yd) = columns(1000, 1.0);
        let cfg = EffTestConfig { n_sim: 1000, ..Default::default() };
        let r = test_efficiency_columns(x, y, yd, &cfg).unwrap();
        assert!(r.reject, "T = {}, cv = {}", r.t_stat, r.critical_value);
        assert_eq!(r.reject, r.p_value < r.alpha);
    }

    #[test]
    fn multiplier_engine_agrees_roughly() {
        let (x, y, yd) = columns(600, 0.0);
        let g = EffTestConfig { n_sim: 2000, ..Default::default() };
        let m = EffTestConfig { engine: Engine::Multiplier, ..g.clone() };
        let a = test_efficiency_columns(x.clone(), y.clone(), yd.clone(), &g).unwrap();
        let b = test_efficiency_columns(x, y, yd, &m).unwrap();
        assert_eq!(a.t_stat, b.t_stat);
        assert!((a.critical_value - b.critical_value).abs() < 0.25, "{} vs {}", a.critical_value, b.critical_value);
    }
}
