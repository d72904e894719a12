//! Outcome regressions and local moment smoothers.
//!
//! Every learner sees covariates only. The payload column is reserved for
//! the predictor and never enters a nuisance fit.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{FoldAssignment, RctDataset};
use crate::error::{CalmError, Result};
use crate::kernel;
use crate::par::{self, Execution};
use crate::stats;

const CV_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum RegressorConfig {
    /// k nearest neighbours on standardized covariates; `k: None` selects k
    /// by 5-fold cross-validation over {5, 10, 25, 50, sqrt(n)}.
    Knn { k: Option<usize> },
    /// Gaussian Nadaraya-Watson smoother; the bandwidth is in standardized
    /// units, `None` cross-validates multiples of the rule of thumb.
    Kernel { bandwidth: Option<f64> },
    /// Boosted depth-one trees.
    Stumps { trees: usize, learning_rate: f64 },
    /// Ordinary least squares with intercept.
    Linear,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig::Knn { k: None }
    }
}

impl RegressorConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RegressorConfig::Knn { .. } => "knn",
            RegressorConfig::Kernel { .. } => "kernel",
            RegressorConfig::Stumps { .. } => "stumps",
            RegressorConfig::Linear => "linear",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "knn" => Ok(RegressorConfig::Knn { k: None }),
            "kernel" => Ok(RegressorConfig::Kernel { bandwidth: None }),
            "stumps" => Ok(RegressorConfig::Stumps { trees: 100, learning_rate: 0.1 }),
            "linear" => Ok(RegressorConfig::Linear),
            other => Err(CalmError::domain(format!("unknown regressor `{other}`"))),
        }
    }
}

/// A fitted conditional-mean function.
pub trait Regression: Send + Sync + Debug {
    fn predict(&self, x: &[f64]) -> f64;
}

pub type Fitted = Arc<dyn Regression>;

/// Training covariates, row-major.
#[derive(Debug, Clone, Copy)]
pub struct Design<'a> {
    pub x: &'a [f64],
    pub p: usize,
}

impl<'a> Design<'a> {
    pub fn new(x: &'a [f64], p: usize) -> Self {
        Design { x, p }
    }

    pub fn n(&self) -> usize {
        if self.p == 0 {
            0
        } else {
            self.x.len() / self.p
        }
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }
}

/// Gather covariate rows of `idx` into a contiguous buffer.
pub fn gather_rows(d: &RctDataset, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * d.dim());
    for &i in idx {
        out.extend_from_slice(d.x_row(i));
    }
    out
}

/// Centre and scale each coordinate; constant coordinates are dropped.
#[derive(Debug, Clone)]
struct Standardizer {
    keep: Vec<usize>,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[f64], p: usize, n: usize) -> Self {
        let mut s = Standardizer { keep: vec![], mean: vec![], sd: vec![] };
        for j in 0..p {
            let col: Vec<f64> = (0..n).map(|i| x[i * p + j]).collect();
            let m = stats::mean(&col);
            let sd = stats::variance_pop(&col).sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                s.keep.push(j);
                s.mean.push(m);
                s.sd.push(sd);
            }
        }
        s
    }

    fn q(&self) -> usize {
        self.keep.len()
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        for (c, &j) in self.keep.iter().enumerate() {
            out.push((x[j] - self.mean[c]) / self.sd[c]);
        }
    }

    fn apply_all(&self, x: &[f64], p: usize, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.q());
        for i in 0..n {
            self.apply(&x[i * p..(i + 1) * p], &mut out);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LocalKind {
    Knn(usize),
    Kernel(f64),
}

/// A linear smoother: the prediction at `x` is a weighted average of the
/// training responses, with weights that depend on `x` only.
#[derive(Debug)]
struct Local {
    std: Standardizer,
    z: Vec<f64>,
    n: usize,
    kind: LocalKind,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Indices of the `k` smallest distances, nearest first, ties broken by index.
fn nearest(dists: &mut [(f64, usize)], k: usize) -> &[(f64, usize)] {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(dists.len());
    if k < dists.len() && k > 0 {
        dists.select_nth_unstable_by(k - 1, cmp);
    }
    let head = &mut dists[..k];
    head.sort_unstable_by(cmp);
    head
}

impl Local {
    fn new(x: Design<'_>, kind: LocalKind) -> Self {
        let n = x.n();
        let std = Standardizer::fit(x.x, x.p, n);
        let z = std.apply_all(x.x, x.p, n);
        Local { std, z, n, kind }
    }

    fn row(&self, i: usize) -> &[f64] {
        let q = self.std.q();
        &self.z[i * q..(i + 1) * q]
    }

    /// Sparse weights `(index, weight)` summing to one.
    fn weights(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let mut zq = Vec::with_capacity(self.std.q());
        self.std.apply(x, &mut zq);
        match self.kind {
            LocalKind::Knn(k) if k >= self.n || self.std.q() == 0 => {
                let w = 1.0 / self.n as f64;
                (0..self.n).map(|i| (i, w)).collect()
            }
            LocalKind::Knn(k) => {
                let mut d: Vec<(f64, usize)> = (0..self.n).map(|i| (sq_dist(&zq, self.row(i)), i)).collect();
                let w = 1.0 / k as f64;
                nearest(&mut d, k).iter().map(|&(_, i)| (i, w)).collect()
            }
            LocalKind::Kernel(h) => {
                let d: Vec<f64> = (0..self.n).map(|i| sq_dist(&zq, self.row(i))).collect();
                let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
                // shift by the nearest distance so the largest weight is exactly one
                let raw: Vec<f64> = d.iter().map(|&s| (-(s - dmin) / (2.0 * h * h)).exp()).collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter()
                    .enumerate()
                    .filter(|&(_, w)| w > 0.0)
                    .map(|(i, w)| (i, w / total))
                    .collect()
            }
        }
    }
}

#[derive(Debug)]
struct LocalRegression {
    local: Arc<Local>,
    y: Vec<f64>,
}

impl Regression for LocalRegression {
    fn predict(&self, x: &[f64]) -> f64 {
        self.local.weights(x).iter().map(|&(i, w)| w * self.y[i]).sum()
    }
}

/// Wrap a closure as a fitted regression.
pub fn from_fn<F>(f: F) -> Fitted
where
    F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
{
    Arc::new(FnRegression(Box::new(f)))
}

struct FnRegression(Box<dyn Fn(&[f64]) -> f64 + Send + Sync>);

impl Debug for FnRegression {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FnRegression")
    }
}

impl Regression for FnRegression {
    fn predict(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

#[derive(Debug)]
struct Constant(f64);

impl Regression for Constant {
    fn predict(&self, _x: &[f64]) -> f64 {
        self.0
    }
}

#[derive(Debug)]
struct LinearRegression {
    intercept: f64,
    coef: Vec<f64>,
    std: Standardizer,
}

impl Regression for LinearRegression {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut z = Vec::with_capacity(self.coef.len());
        self.std.apply(x, &mut z);
        self.intercept + z.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>()
    }
}

fn fit_linear(x: Design<'_>, y: &[f64]) -> LinearRegression {
    let n = x.n();
    let std = Standardizer::fit(x.x, x.p, n);
    let q = std.q();
    let z = std.apply_all(x.x, x.p, n);
    let a = DMatrix::from_fn(n, q + 1, |i, j| if j == 0 { 1.0 } else { z[i * q + j - 1] });
    let b = DVector::from_column_slice(y);
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-10)
        .unwrap_or_else(|_| DVector::from_element(q + 1, 0.0));
    LinearRegression {
        intercept: sol[0],
        coef: sol.iter().skip(1).copied().collect(),
        std,
    }
}

#[derive(Debug, Clone)]
struct Stump {
    feature: usize,
    threshold: f64,
    left: f64,
    right: f64,
}

#[derive(Debug)]
struct StumpEnsemble {
    base: f64,
    stumps: Vec<Stump>,
}

impl Regression for StumpEnsemble {
    fn predict(&self, x: &[f64]) -> f64 {
        self.base
            + self
                .stumps
                .iter()
                .map(|s| if x[s.feature] <= s.threshold { s.left } else { s.right })
                .sum::<f64>()
    }
}

fn fit_stumps(x: Design<'_>, y: &[f64], trees: usize, lr: f64) -> StumpEnsemble {
    let n = x.n();
    let base = stats::mean(y);
    let mut resid: Vec<f64> = y.iter().map(|v| v - base).collect();
    let orders: Vec<Vec<usize>> = (0..x.p)
        .map(|j| {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|&a, &b| x.row(a)[j].total_cmp(&x.row(b)[j]).then(a.cmp(&b)));
            o
        })
        .collect();
    let mut stumps = Vec::with_capacity(trees);
    for _ in 0..trees {
        let total: f64 = resid.iter().sum();
        let mut best: Option<(f64, Stump)> = None;
        for (j, order) in orders.iter().enumerate() {
            let mut left_sum = 0.0;
            for pos in 0..n.saturating_sub(1) {
                let i = order[pos];
                left_sum += resid[i];
                let here = x.row(i)[j];
                let next = x.row(order[pos + 1])[j];
                if next <= here {
                    continue;
                }
                let nl = (pos + 1) as f64;
                let nr = (n - pos - 1) as f64;
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / nl + right_sum * right_sum / nr;
                if best.as_ref().is_none_or(|(g, _)| gain > *g) {
                    best = Some((
                        gain,
                        Stump {
                            feature: j,
                            threshold: 0.5 * (here + next),
                            left: lr * left_sum / nl,
                            right: lr * right_sum / nr,
                        },
                    ));
                }
            }
        }
        let Some((_, s)) = best else { break };
        for (i, r) in resid.iter_mut().enumerate() {
            *r -= if x.row(i)[s.feature] <= s.threshold { s.left } else { s.right };
        }
        stumps.push(s);
    }
    StumpEnsemble { base, stumps }
}

fn knn_candidates(n: usize) -> Vec<usize> {
    let mut c = vec![5, 10, 25, 50, (n as f64).sqrt().floor() as usize];
    c.retain(|&k| k >= 1);
    c.sort_unstable();
    c.dedup();
    c
}

/// Choose `k` by 5-fold cross-validation. Held-out subject `i` is in fold `i % 5`.
fn cv_knn(local: &Local, y: &[f64], exec: Execution) -> usize {
    let n = local.n;
    let cands = knn_candidates(n);
    if n < 2 * CV_FOLDS {
        return n.min(cands[0]);
    }
    let per_point: Vec<Vec<f64>> = par::map_range(exec, n, |i| {
        let f = i % CV_FOLDS;
        let train: Vec<usize> = (0..n).filter(|&j| j % CV_FOLDS != f).collect();
        let mut d: Vec<(f64, usize)> = train.iter().map(|&j| (sq_dist(local.row(i), local.row(j)), j)).collect();
        let kmax = cands.iter().copied().max().unwrap_or(1).min(train.len());
        let near = nearest(&mut d, kmax);
        let mut prefix = Vec::with_capacity(kmax + 1);
        prefix.push(0.0);
        for &(_, j) in near {
            prefix.push(prefix.last().unwrap() + y[j]);
        }
        let full_mean = train.iter().map(|&j| y[j]).sum::<f64>() / train.len() as f64;
        cands
            .iter()
            .map(|&k| {
                let pred = if k >= train.len() { full_mean } else { prefix[k] / k as f64 };
                (y[i] - pred).powi(2)
            })
            .collect()
    });
    let mut best = (f64::INFINITY, cands[0]);
    for (c, &k) in cands.iter().enumerate() {
        let mse: f64 = per_point.iter().map(|v| v[c]).sum();
        if mse < best.0 {
            best = (mse, k);
        }
    }
    best.1
}

fn kernel_candidates(n: usize, q: usize) -> Vec<f64> {
    let h0 = kernel::rule_of_thumb(1.0, n, q.max(1), 0.0);
    [0.5, 0.75, 1.0, 1.5, 2.0].iter().map(|m| m * h0).collect()
}

fn cv_kernel(local: &Local, y: &[f64], exec: Execution) -> f64 {
    let n = local.n;
    let cands = kernel_candidates(n, local.std.q());
    if n < 2 * CV_FOLDS {
        return cands[2];
    }
    let per_point: Vec<Vec<f64>> = par::map_range(exec, n, |i| {
        let f = i % CV_FOLDS;
        let d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j % CV_FOLDS != f)
            .map(|j| (sq_dist(local.row(i), local.row(j)), j))
            .collect();
        let dmin = d.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        cands
            .iter()
            .map(|&h| {
                let (mut num, mut den) = (0.0, 0.0);
                for &(s, j) in &d {
                    let w = (-(s - dmin) / (2.0 * h * h)).exp();
                    num += w * y[j];
                    den += w;
                }
                (y[i] - num / den).powi(2)
            })
            .collect()
    });
    let mut best = (f64::INFINITY, cands[2]);
    for (c, &h) in cands.iter().enumerate() {
        let mse: f64 = per_point.iter().map(|v| v[c]).sum();
        if mse < best.0 {
            best = (mse, h);
        }
    }
    best.1
}

fn build_local(x: Design<'_>, y: &[f64], config: &RegressorConfig, exec: Execution) -> Option<Local> {
    match *config {
        RegressorConfig::Knn { k } => {
            let mut local = Local::new(x, LocalKind::Knn(1));
            let k = match k {
                Some(k) => k.max(1),
                None => cv_knn(&local, y, exec),
            };
            local.kind = LocalKind::Knn(k);
            Some(local)
        }
        RegressorConfig::Kernel { bandwidth } => {
            let mut local = Local::new(x, LocalKind::Kernel(1.0));
            let h = match bandwidth {
                Some(h) => h,
                None => cv_kernel(&local, y, exec),
            };
            local.kind = LocalKind::Kernel(h);
            Some(local)
        }
        _ => None,
    }
}

/// Fit `E[y | x]`.
pub fn fit_regression(x: Design<'_>, y: &[f64], config: &RegressorConfig, exec: Execution) -> Result<Fitted> {
    let n = y.len();
    if n == 0 || x.n() != n {
        return Err(CalmError::domain("regression needs a non-empty training set"));
    }
    if n == 1 {
        return Ok(Arc::new(Constant(y[0])));
    }
    if let Some(local) = build_local(x, y, config, exec) {
        return Ok(Arc::new(LocalRegression { local: Arc::new(local), y: y.to_vec() }));
    }
    Ok(match *config {
        RegressorConfig::Stumps { trees, learning_rate } => Arc::new(fit_stumps(x, y, trees, learning_rate)),
        RegressorConfig::Linear => Arc::new(fit_linear(x, y)),
        _ => unreachable!(),
    })
}

/// Local means and covariances of several response columns.
///
/// Smoothers that are linear in the responses (kNN, kernel) use one shared
/// set of weights, so the covariance matrix is an exact weighted covariance
/// and therefore positive semi-definite. Other families fit each mean and
/// cross moment separately and floor the variances at zero.
#[derive(Debug, Clone)]
pub struct JointMoments {
    inner: MomentsInner,
    d: usize,
}

#[derive(Debug, Clone)]
enum MomentsInner {
    Local { local: Arc<Local>, cols: Vec<Vec<f64>> },
    Separate { means: Vec<Fitted>, products: Vec<Fitted> },
}

/// Local moments at a point: means and the row-major `d x d` covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMoments {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl LocalMoments {
    pub fn cov(&self, a: usize, b: usize) -> f64 {
        self.cov[a * self.mean.len() + b]
    }
}

impl JointMoments {
    /// `cols[c][i]` is response `c` for training row `i`. The smoothing
    /// parameter is tuned for the regression of column `tune_on`.
    pub fn fit(
        x: Design<'_>,
        cols: &[Vec<f64>],
        tune_on: usize,
        config: &RegressorConfig,
        exec: Execution,
    ) -> Result<Self> {
        let d = cols.len();
        let n = x.n();
        if n == 0 || cols.iter().any(|c| c.len() != n) {
            return Err(CalmError::domain("moment smoother needs aligned, non-empty columns"));
        }
        if let Some(local) = build_local(x, &cols[tune_on], config, exec) {
            return Ok(JointMoments {
                inner: MomentsInner::Local { local: Arc::new(local), cols: cols.to_vec() },
                d,
            });
        }
        let means = cols
            .iter()
            .map(|c| fit_regression(x, c, config, exec))
            .collect::<Result<Vec<_>>>()?;
        let mut products = Vec::with_capacity(d * (d + 1) / 2);
        for a in 0..d {
            for b in a..d {
                let prod: Vec<f64> = (0..n).map(|i| cols[a][i] * cols[b][i]).collect();
                products.push(fit_regression(x, &prod, config, exec)?);
            }
        }
        Ok(JointMoments { inner: MomentsInner::Separate { means, products }, d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn at(&self, x: &[f64]) -> LocalMoments {
        let d = self.d;
        let mut cov = vec![0.0; d * d];
        match &self.inner {
            MomentsInner::Local { local, cols } => {
                let w = local.weights(x);
                let mean: Vec<f64> = cols.iter().map(|c| w.iter().map(|&(i, wi)| wi * c[i]).sum()).collect();
                for a in 0..d {
                    for b in a..d {
                        let s: f64 = w
                            .iter()
                            .map(|&(i, wi)| wi * (cols[a][i] - mean[a]) * (cols[b][i] - mean[b]))
                            .sum();
                        cov[a * d + b] = s;
                        cov[b * d + a] = s;
                    }
                }
                LocalMoments { mean, cov }
            }
            MomentsInner::Separate { means, products } => {
                let mean: Vec<f64> = means.iter().map(|m| m.predict(x)).collect();
                let mut k = 0;
                for a in 0..d {
                    for b in a..d {
                        let mut s = products[k].predict(x) - mean[a] * mean[b];
                        if a == b {
                            s = s.max(0.0);
                        }
                        cov[a * d + b] = s;
                        cov[b * d + a] = s;
                        k += 1;
                    }
                }
                LocalMoments { mean, cov }
            }
        }
    }
}

/// Nuisances learned on one training fold for one arm.
#[derive(Debug, Clone)]
pub struct FoldNuisance {
    pub fold: usize,
    /// `E[Y | X, T = t]`, arm-t subjects of the fold.
    pub mu: Fitted,
    /// `E[Y-dagger | X]`, all subjects of the fold.
    pub mu_dagger: Option<Fitted>,
    /// Local moments of `(Y, Y-dagger)` on arm-t subjects of the fold.
    pub moments: Option<JointMoments>,
    /// Replaces the moment-based weight when set (oracle studies).
    pub omega: Option<Fitted>,
    /// Variance floor for the smooth weight.
    pub nu_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub dagger: bool,
    pub moments: bool,
}

impl Needs {
    pub const MU_ONLY: Needs = Needs { dagger: false, moments: false };
    pub const ALL: Needs = Needs { dagger: true, moments: true };
}

/// Fit the nuisances for `arm` on the subjects in `train`.
pub fn fit_fold(
    d: &RctDataset,
    fold: usize,
    train: &[usize],
    arm: usize,
    ydag: &[f64],
    config: &RegressorConfig,
    needs: Needs,
    exec: Execution,
) -> Result<FoldNuisance> {
    let arm_idx: Vec<usize> = train.iter().copied().filter(|&i| d.arm(i) == arm).collect();
    if arm_idx.len() < 2 {
        return Err(CalmError::domain(format!(
            "fold {fold} has {} subject(s) in arm {arm}; at least 2 are needed",
            arm_idx.len()
        )));
    }
    let xa = gather_rows(d, &arm_idx);
    let design_a = Design::new(&xa, d.dim());
    let y_a: Vec<f64> = arm_idx.iter().map(|&i| d.y()[i]).collect();
    let yd_a: Vec<f64> = arm_idx.iter().map(|&i| ydag[i]).collect();
    let mu = fit_regression(design_a, &y_a, config, exec)?;
    let mu_dagger = if needs.dagger {
        let xs = gather_rows(d, train);
        let yd: Vec<f64> = train.iter().map(|&i| ydag[i]).collect();
        Some(fit_regression(Design::new(&xs, d.dim()), &yd, config, exec)?)
    } else {
        None
    };
    let moments = if needs.moments {
        Some(JointMoments::fit(design_a, &[y_a, yd_a.clone()], 0, config, exec)?)
    } else {
        None
    };
    Ok(FoldNuisance {
        fold,
        mu,
        mu_dagger,
        moments,
        omega: None,
        nu_floor: crate::calibration::variance_floor(&yd_a),
    })
}

/// Fit nuisances on every fold; element `l - 1` was trained on fold `l`.
pub fn cross_fit(
    d: &RctDataset,
    folds: &FoldAssignment,
    arm: usize,
    ydag: &[f64],
    config: &RegressorConfig,
    needs: Needs,
    exec: Execution,
) -> Result<Vec<FoldNuisance>> {
    d.check_arm(arm)?;
    (1..=folds.k())
        .map(|l| fit_fold(d, l, &folds.members(l), arm, ydag, config, needs, exec))
        .collect()
}
