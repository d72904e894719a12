//! Cross-fitted AIPW and calibrated estimators of arm means, average
//! treatment effects and conditional average treatment effects.

use serde::{Deserialize, Serialize};

use crate::calibration::{self, RobustWeights, WeightKind};
use crate::data::{split_folds, FoldAssignment, RctDataset};
use crate::error::{CalmError, Result};
use crate::kernel::{self, Kernel};
use crate::nuisance::{self, gather_rows, Design, FoldNuisance, Fitted, JointMoments, Needs, RegressorConfig};
use crate::par::{self, Execution};
use crate::predictor::{self, FewShotConfig, PredictionSet, Predictor, ROTATIONS};
use crate::stats;

/// Influence value of one subject for the mean of arm `t`:
/// `1{T=t} Y / e + (1 - 1{T=t} / e) (mu + omega (Y-dagger - mu-dagger))`.
pub fn influence_zero_shot(y: f64, in_arm: bool, e: f64, mu: f64, mu_dagger: f64, omega: f64, ydag: f64) -> f64 {
    let a = if in_arm { 1.0 } else { 0.0 };
    let aug = if omega == 0.0 { mu } else { mu + omega * (ydag - mu_dagger) };
    a * y / e + (1.0 - a / e) * aug
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub folds: usize,
    pub seed: u64,
    pub alpha: f64,
    pub weight: WeightKind,
    pub regressor: RegressorConfig,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            folds: 2,
            seed: 0,
            alpha: 0.05,
            weight: WeightKind::Smooth,
            regressor: RegressorConfig::default(),
            exec: Execution::default(),
        }
    }
}

impl EstimatorConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CalmError::domain(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimand {
    Mean { arm: usize },
    Ate { arm: usize, control: usize },
    Cate { arm: usize, control: usize, x: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FewShotSettings {
    pub m: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub estimand: Estimand,
    pub point: f64,
    /// Plug-in asymptotic variance; for CATE the variance of the estimate itself.
    pub variance: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub alpha: f64,
    pub n: usize,
    pub folds: usize,
    pub seed: u64,
    pub weight: WeightKind,
    pub regressor: RegressorConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fewshot: Option<FewShotSettings>,
    pub influence: Vec<f64>,
}

impl EstimateReport {
    pub fn covers(&self, truth: f64) -> bool {
        self.ci[0] <= truth && truth <= self.ci[1]
    }

    pub fn ci_width(&self) -> f64 {
        self.ci[1] - self.ci[0]
    }
}

fn estimator_name(weight: WeightKind, fewshot: bool) -> String {
    match (weight, fewshot) {
        (WeightKind::Zero, false) => "aipw".into(),
        (WeightKind::Zero, true) => "aipw-fs".into(),
        (_, false) => "calm".into(),
        (_, true) => "calm-fs".into(),
    }
}

/// Fold-size weighted mean of fold means, plug-in variance and Wald interval.
fn summarize(phi: &[f64], labels: &[usize], k: usize, alpha: f64) -> (f64, f64, f64, [f64; 2]) {
    let n = phi.len();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, &v) in phi.iter().enumerate() {
        sums[labels[i] - 1] += v;
        counts[labels[i] - 1] += 1;
    }
    let point: f64 = (0..k)
        .filter(|&l| counts[l] > 0)
        .map(|l| counts[l] as f64 / n as f64 * (sums[l] / counts[l] as f64))
        .sum();
    let var = phi.iter().map(|v| (v - point).powi(2)).sum::<f64>() / n as f64;
    let se = (var / n as f64).sqrt();
    let z = stats::z_two_sided(alpha);
    (point, var, se, [point - z * se, point + z * se])
}

fn build_report(
    estimator: String,
    estimand: Estimand,
    phi: Vec<f64>,
    labels: &[usize],
    k: usize,
    cfg: &EstimatorConfig,
    fewshot: Option<FewShotSettings>,
) -> EstimateReport {
    let (point, variance, se, ci) = summarize(&phi, labels, k, cfg.alpha);
    EstimateReport {
        estimator,
        estimand,
        point,
        variance,
        se,
        ci,
        alpha: cfg.alpha,
        n: phi.len(),
        folds: k,
        seed: cfg.seed,
        weight: cfg.weight,
        regressor: cfg.regressor.clone(),
        fewshot,
        influence: phi,
    }
}

fn needs_for(weight: WeightKind) -> Needs {
    match weight {
        WeightKind::Zero => Needs::MU_ONLY,
        WeightKind::Smooth => Needs::ALL,
        WeightKind::Robust => Needs { dagger: true, moments: false },
    }
}

/// Influence values for `members` of an evaluation fold, using nuisances
/// trained elsewhere. Robust weights are fitted on the evaluation fold's
/// arm-t subjects from the out-of-fold nuisance residuals.
fn eval_mean_fold(
    d: &RctDataset,
    members: &[usize],
    arm: usize,
    nu: &FoldNuisance,
    ydag: &[f64],
    weight: WeightKind,
    strata: Option<&[u32]>,
    exec: Execution,
) -> Vec<f64> {
    let fitted: Vec<(f64, f64, f64)> = par::map_slice(exec, members, |&i| {
        let x = d.x_row(i);
        let mu = nu.mu.predict(x);
        if weight == WeightKind::Zero {
            return (mu, 0.0, 0.0);
        }
        let mud = nu.mu_dagger.as_ref().map_or(0.0, |f| f.predict(x));
        let omega = match (weight, &nu.omega, &nu.moments) {
            (WeightKind::Smooth, Some(f), _) => f.predict(x),
            (WeightKind::Smooth, None, Some(m)) => calibration::smooth_weight(&m.at(x), nu.nu_floor),
            _ => 0.0,
        };
        (mu, mud, omega)
    });
    let robust = (weight == WeightKind::Robust).then(|| {
        let strata = strata.expect("robust weights need strata");
        let rows: Vec<(u32, f64, f64, f64)> = members
            .iter()
            .zip(&fitted)
            .filter(|(&i, _)| d.arm(i) == arm)
            .map(|(&i, &(mu, mud, _))| (strata[i], d.lambda(i, arm), d.y()[i] - mu, ydag[i] - mud))
            .collect();
        RobustWeights::fit(&rows)
    });
    members
        .iter()
        .zip(&fitted)
        .map(|(&i, &(mu, mud, omega))| {
            let omega = match &robust {
                Some(r) => r.get(strata.expect("strata")[i]),
                None => omega,
            };
            influence_zero_shot(d.y()[i], d.arm(i) == arm, d.e(i, arm), mu, mud, omega, ydag[i])
        })
        .collect()
}

/// Cross-fitted estimate of `E[Y(arm)]` from zero-shot predictions.
///
/// Fold `l` is evaluated with nuisances trained on its cyclic predecessor.
pub fn estimate_mean(d: &RctDataset, ydag: &[f64], arm: usize, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    let folds = split_folds(d.len(), cfg.folds, cfg.seed)?;
    estimate_mean_with_folds(d, &folds, ydag, arm, cfg)
}

pub fn estimate_mean_with_folds(
    d: &RctDataset,
    folds: &FoldAssignment,
    ydag: &[f64],
    arm: usize,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    cfg.validate()?;
    check_column(d, ydag)?;
    let bundle = nuisance::cross_fit(d, folds, arm, ydag, &cfg.regressor, needs_for(cfg.weight), cfg.exec)?;
    estimate_mean_with_nuisances(d, folds, ydag, arm, &bundle, cfg)
}

/// Like [`estimate_mean_with_folds`] but with the nuisances supplied;
/// element `l - 1` of `bundle` is treated as trained on fold `l`.
pub fn estimate_mean_with_nuisances(
    d: &RctDataset,
    folds: &FoldAssignment,
    ydag: &[f64],
    arm: usize,
    bundle: &[FoldNuisance],
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    d.check_arm(arm)?;
    let strata = (cfg.weight == WeightKind::Robust).then(|| d.strata());
    let mut phi = vec![0.0; d.len()];
    for l in 1..=folds.k() {
        let members = folds.members(l);
        let nu = &bundle[folds.predecessor(l) - 1];
        let vals = eval_mean_fold(d, &members, arm, nu, ydag, cfg.weight, strata.as_deref(), cfg.exec);
        for (&i, v) in members.iter().zip(vals) {
            phi[i] = v;
        }
    }
    Ok(build_report(
        estimator_name(cfg.weight, false),
        Estimand::Mean { arm },
        phi,
        folds.labels(),
        folds.k(),
        cfg,
        None,
    ))
}

/// Standard cross-fitted AIPW for `E[Y(arm)]`, written without any
/// prediction terms.
pub fn estimate_mean_aipw(d: &RctDataset, arm: usize, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    cfg.validate()?;
    let folds = split_folds(d.len(), cfg.folds, cfg.seed)?;
    let zeros = vec![0.0; d.len()];
    let bundle = nuisance::cross_fit(d, &folds, arm, &zeros, &cfg.regressor, Needs::MU_ONLY, cfg.exec)?;
    let mut phi = vec![0.0; d.len()];
    for l in 1..=folds.k() {
        let mu = &bundle[folds.predecessor(l) - 1].mu;
        for i in folds.members(l) {
            let a = if d.arm(i) == arm { 1.0 } else { 0.0 };
            let e = d.e(i, arm);
            phi[i] = a * d.y()[i] / e + (1.0 - a / e) * mu.predict(d.x_row(i));
        }
    }
    let cfg = EstimatorConfig { weight: WeightKind::Zero, ..cfg.clone() };
    Ok(build_report("aipw".into(), Estimand::Mean { arm }, phi, folds.labels(), folds.k(), &cfg, None))
}

/// Estimate with known nuisance functions and no sample splitting.
pub fn estimate_mean_oracle(
    d: &RctDataset,
    ydag: &[f64],
    arm: usize,
    mu: &Fitted,
    mu_dagger: &Fitted,
    omega: &Fitted,
    alpha: f64,
) -> Result<EstimateReport> {
    d.check_arm(arm)?;
    check_column(d, ydag)?;
    let phi: Vec<f64> = (0..d.len())
        .map(|i| {
            let x = d.x_row(i);
            influence_zero_shot(
                d.y()[i],
                d.arm(i) == arm,
                d.e(i, arm),
                mu.predict(x),
                mu_dagger.predict(x),
                omega.predict(x),
                ydag[i],
            )
        })
        .collect();
    let labels = vec![1; d.len()];
    let cfg = EstimatorConfig { folds: 1, alpha, ..EstimatorConfig::default() };
    Ok(build_report("calm-oracle".into(), Estimand::Mean { arm }, phi, &labels, 1, &cfg, None))
}

fn check_column(d: &RctDataset, ydag: &[f64]) -> Result<()> {
    if ydag.len() != d.len() {
        return Err(CalmError::domain(format!(
            "prediction column has {} entries for {} subjects",
            ydag.len(),
            d.len()
        )));
    }
    Ok(())
}

/// Three folds for the few-shot estimators.
pub fn fewshot_folds(d: &RctDataset, seed: u64) -> Result<FoldAssignment> {
    split_folds(d.len(), 3, seed)
}

/// Aggregated few-shot predictions for the training and evaluation folds
/// of one rotation, as a full-length column (donor-fold entries are NaN).
fn rotation_column(
    d: &RctDataset,
    folds: &FoldAssignment,
    set: &PredictionSet,
    arm: usize,
    donor: usize,
) -> Result<Vec<f64>> {
    let subjects: Vec<usize> = (0..d.len()).filter(|&i| folds.label(i) != donor).collect();
    let vals = set.few_shot_column(d, arm, donor, &subjects)?;
    let mut col = vec![f64::NAN; d.len()];
    for (&i, v) in subjects.iter().zip(vals) {
        col[i] = v;
    }
    Ok(col)
}

/// Few-shot estimate of `E[Y(arm)]` from stored draws.
///
/// Three folds rotate through the roles (donor, train, evaluate); the
/// draws for donor fold `l` must cover every subject outside `l`.
pub fn estimate_mean_fewshot(
    d: &RctDataset,
    set: &PredictionSet,
    arm: usize,
    settings: FewShotSettings,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    cfg.validate()?;
    d.check_arm(arm)?;
    let folds = fewshot_folds(d, cfg.seed)?;
    let strata = (cfg.weight == WeightKind::Robust).then(|| d.strata());
    let mut phi = vec![0.0; d.len()];
    for &(donor, train, eval) in &ROTATIONS {
        let col = rotation_column(d, &folds, set, arm, donor)?;
        let nu = nuisance::fit_fold(
            d,
            train,
            &folds.members(train),
            arm,
            &col,
            &cfg.regressor,
            needs_for(cfg.weight),
            cfg.exec,
        )?;
        let members = folds.members(eval);
        let vals = eval_mean_fold(d, &members, arm, &nu, &col, cfg.weight, strata.as_deref(), cfg.exec);
        for (&i, v) in members.iter().zip(vals) {
            phi[i] = v;
        }
    }
    let cfg = EstimatorConfig { folds: 3, ..cfg.clone() };
    Ok(build_report(
        estimator_name(cfg.weight, true),
        Estimand::Mean { arm },
        phi,
        folds.labels(),
        3,
        &cfg,
        Some(settings),
    ))
}

/// Draw few-shot predictions from a live predictor and estimate `E[Y(arm)]`.
pub fn estimate_mean_fewshot_live(
    d: &RctDataset,
    predictor: &dyn Predictor,
    arm: usize,
    fs: &FewShotConfig,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    let folds = fewshot_folds(d, cfg.seed)?;
    let mut set = PredictionSet::new();
    predictor::fill_few_shot(&mut set, d, predictor, &[arm], &folds, fs, cfg.exec)?;
    estimate_mean_fewshot(d, &set, arm, FewShotSettings { m: fs.m, b: fs.b }, cfg)
}

/// Nuisances for a two-arm contrast on one training fold.
struct AteNuisance {
    mu: [Fitted; 2],
    mu_dagger: [Option<Fitted>; 2],
    moments: Option<JointMoments>,
}

fn fit_ate_fold(
    d: &RctDataset,
    fold: usize,
    train: &[usize],
    arms: [usize; 2],
    ydag: [&[f64]; 2],
    cfg: &EstimatorConfig,
) -> Result<AteNuisance> {
    let needs = match cfg.weight {
        WeightKind::Zero => Needs::MU_ONLY,
        _ => Needs { dagger: true, moments: false },
    };
    let f0 = nuisance::fit_fold(d, fold, train, arms[0], ydag[0], &cfg.regressor, needs, cfg.exec)?;
    let f1 = nuisance::fit_fold(d, fold, train, arms[1], ydag[1], &cfg.regressor, needs, cfg.exec)?;
    let moments = if cfg.weight == WeightKind::Smooth {
        let x = gather_rows(d, train);
        let mut cols = vec![Vec::with_capacity(train.len()); 3];
        for &i in train {
            let l0 = d.lambda(i, arms[0]);
            let l1 = d.lambda(i, arms[1]);
            cols[0].push(l0.sqrt() * ydag[0][i]);
            cols[1].push(l1.sqrt() * ydag[1][i]);
            let t = d.arm(i);
            let z = if t == arms[0] {
                l0.sqrt() * d.y()[i] / d.e(i, arms[0])
            } else if t == arms[1] {
                l1.sqrt() * d.y()[i] / d.e(i, arms[1])
            } else {
                0.0
            };
            cols[2].push(z);
        }
        Some(JointMoments::fit(Design::new(&x, d.dim()), &cols, 2, &cfg.regressor, cfg.exec)?)
    } else {
        None
    };
    Ok(AteNuisance {
        mu: [f0.mu, f1.mu],
        mu_dagger: [f0.mu_dagger, f1.mu_dagger],
        moments,
    })
}

fn eval_ate_fold(
    d: &RctDataset,
    members: &[usize],
    arms: [usize; 2],
    nu: &AteNuisance,
    ydag: [&[f64]; 2],
    cfg: &EstimatorConfig,
    strata: Option<&[u32]>,
) -> Vec<f64> {
    // (mu, mu-dagger, omega) for each arm
    let fitted: Vec<[(f64, f64, f64); 2]> = par::map_slice(cfg.exec, members, |&i| {
        let x = d.x_row(i);
        let w = match &nu.moments {
            Some(m) => calibration::ate_weight(&m.at(x)),
            None => [0.0, 0.0],
        };
        [0, 1].map(|a| {
            let mud = nu.mu_dagger[a].as_ref().map_or(0.0, |f| f.predict(x));
            (nu.mu[a].predict(x), mud, w[a])
        })
    });
    let robust: Option<[RobustWeights; 2]> = (cfg.weight == WeightKind::Robust).then(|| {
        let strata = strata.expect("robust weights need strata");
        [0, 1].map(|a| {
            let rows: Vec<(u32, f64, f64, f64)> = members
                .iter()
                .zip(&fitted)
                .filter(|(&i, _)| d.arm(i) == arms[a])
                .map(|(&i, f)| (strata[i], d.lambda(i, arms[a]), d.y()[i] - f[a].0, ydag[a][i] - f[a].1))
                .collect();
            RobustWeights::fit(&rows)
        })
    });
    members
        .iter()
        .zip(&fitted)
        .map(|(&i, f)| {
            let phi = [0, 1].map(|a| {
                let omega = match &robust {
                    Some(r) => r[a].get(strata.expect("strata")[i]),
                    None => f[a].2,
                };
                influence_zero_shot(d.y()[i], d.arm(i) == arms[a], d.e(i, arms[a]), f[a].0, f[a].1, omega, ydag[a][i])
            });
            phi[0] - phi[1]
        })
        .collect()
}

fn check_contrast(d: &RctDataset, arms: [usize; 2]) -> Result<()> {
    d.check_arm(arms[0])?;
    d.check_arm(arms[1])?;
    if arms[0] == arms[1] {
        return Err(CalmError::domain("contrast needs two distinct arms"));
    }
    Ok(())
}

/// Per-subject contrasts `phi_t - phi_t'` from zero-shot predictions.
pub fn ate_influence(
    d: &RctDataset,
    folds: &FoldAssignment,
    ydag: [&[f64]; 2],
    arms: [usize; 2],
    cfg: &EstimatorConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_contrast(d, arms)?;
    check_column(d, ydag[0])?;
    check_column(d, ydag[1])?;
    let strata = (cfg.weight == WeightKind::Robust).then(|| d.strata());
    let bundle: Vec<AteNuisance> = (1..=folds.k())
        .map(|l| fit_ate_fold(d, l, &folds.members(l), arms, ydag, cfg))
        .collect::<Result<_>>()?;
    let mut phi = vec![0.0; d.len()];
    for l in 1..=folds.k() {
        let members = folds.members(l);
        let vals = eval_ate_fold(d, &members, arms, &bundle[folds.predecessor(l) - 1], ydag, cfg, strata.as_deref());
        for (&i, v) in members.iter().zip(vals) {
            phi[i] = v;
        }
    }
    Ok(phi)
}

/// Cross-fitted estimate of `E[Y(t)] - E[Y(t')]`. With the smooth weight the
/// two arms share the joint calibration `Sigma_V^{-1} Cov(V, Z)`.
pub fn estimate_ate(d: &RctDataset, ydag: [&[f64]; 2], arms: [usize; 2], cfg: &EstimatorConfig) -> Result<EstimateReport> {
    let folds = split_folds(d.len(), cfg.folds, cfg.seed)?;
    let phi = ate_influence(d, &folds, ydag, arms, cfg)?;
    Ok(build_report(
        estimator_name(cfg.weight, false),
        Estimand::Ate { arm: arms[0], control: arms[1] },
        phi,
        folds.labels(),
        folds.k(),
        cfg,
        None,
    ))
}

/// Few-shot ATE from stored draws for both arms.
pub fn estimate_ate_fewshot(
    d: &RctDataset,
    set: &PredictionSet,
    arms: [usize; 2],
    settings: FewShotSettings,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    cfg.validate()?;
    check_contrast(d, arms)?;
    let folds = fewshot_folds(d, cfg.seed)?;
    let strata = (cfg.weight == WeightKind::Robust).then(|| d.strata());
    let mut phi = vec![0.0; d.len()];
    for &(donor, train, eval) in &ROTATIONS {
        let c0 = rotation_column(d, &folds, set, arms[0], donor)?;
        let c1 = rotation_column(d, &folds, set, arms[1], donor)?;
        let nu = fit_ate_fold(d, train, &folds.members(train), arms, [&c0, &c1], cfg)?;
        let members = folds.members(eval);
        let vals = eval_ate_fold(d, &members, arms, &nu, [&c0, &c1], cfg, strata.as_deref());
        for (&i, v) in members.iter().zip(vals) {
            phi[i] = v;
        }
    }
    let cfg = EstimatorConfig { folds: 3, ..cfg.clone() };
    Ok(build_report(
        estimator_name(cfg.weight, true),
        Estimand::Ate { arm: arms[0], control: arms[1] },
        phi,
        folds.labels(),
        3,
        &cfg,
        Some(settings),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateConfig {
    pub kernel: Kernel,
    /// Per-coordinate bandwidths; defaults to the undersmoothed rule of thumb.
    pub bandwidth: Option<Vec<f64>>,
    pub undersmooth: f64,
    pub min_ess: f64,
}

impl Default for CateConfig {
    fn default() -> Self {
        CateConfig { kernel: Kernel::Gaussian, bandwidth: None, undersmooth: 0.05, min_ess: 10.0 }
    }
}

/// `1.06 sd_j n^(-1/(p+4)) n^(-undersmooth)` for each coordinate.
pub fn cate_bandwidth(d: &RctDataset, undersmooth: f64) -> Vec<f64> {
    (0..d.dim())
        .map(|j| {
            let col: Vec<f64> = (0..d.len()).map(|i| d.x_row(i)[j]).collect();
            kernel::rule_of_thumb(stats::sd(&col), d.len(), d.dim(), undersmooth)
        })
        .collect()
}

/// Kernel-smoothed contrasts at each query point.
///
/// `tau(x) = sum_i w_i D_i` with normalized kernel weights `w_i`, and
/// variance `sum_i w_i^2 (D_i - tau(x))^2`.
pub fn smooth_contrasts(
    d: &RctDataset,
    contrasts: &[f64],
    x: &[f64],
    cate: &CateConfig,
) -> Result<(f64, f64)> {
    if x.len() != d.dim() {
        return Err(CalmError::domain(format!("query has {} coordinates, data has {}", x.len(), d.dim())));
    }
    let h = match &cate.bandwidth {
        Some(h) => h.clone(),
        None => cate_bandwidth(d, cate.undersmooth),
    };
    if h.len() != d.dim() || h.iter().any(|v| !(*v > 0.0)) {
        return Err(CalmError::domain("bandwidths must be positive, one per coordinate"));
    }
    for j in 0..d.dim() {
        let (lo, hi) = (0..d.len())
            .map(|i| d.x_row(i)[j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if x[j] < lo - h[j] || x[j] > hi + h[j] {
            return Err(CalmError::OutOfSupport { x: x.to_vec() });
        }
    }
    let k: Vec<f64> = (0..d.len()).map(|i| cate.kernel.eval_product(d.x_row(i), x, &h)).collect();
    let total: f64 = k.iter().sum();
    if !(total > 0.0) {
        return Err(CalmError::OutOfSupport { x: x.to_vec() });
    }
    let w: Vec<f64> = k.iter().map(|v| v / total).collect();
    let sum_sq: f64 = w.iter().map(|v| v * v).sum();
    let ess = 1.0 / sum_sq;
    if ess < cate.min_ess {
        return Err(CalmError::UnstableQuery { x: x.to_vec(), ess, min: cate.min_ess });
    }
    let tau: f64 = w.iter().zip(contrasts).map(|(a, b)| a * b).sum();
    let var: f64 = w.iter().zip(contrasts).map(|(a, b)| a * a * (b - tau).powi(2)).sum();
    Ok((tau, var))
}

/// CATE estimates at each of `xs` from one set of cross-fitted contrasts.
pub fn estimate_cate(
    d: &RctDataset,
    ydag: [&[f64]; 2],
    arms: [usize; 2],
    xs: &[Vec<f64>],
    cate: &CateConfig,
    cfg: &EstimatorConfig,
) -> Result<Vec<EstimateReport>> {
    let folds = split_folds(d.len(), cfg.folds, cfg.seed)?;
    let phi = ate_influence(d, &folds, ydag, arms, cfg)?;
    let z = stats::z_two_sided(cfg.alpha);
    xs.iter()
        .map(|x| {
            let (tau, var) = smooth_contrasts(d, &phi, x, cate)?;
            let se = var.sqrt();
            Ok(EstimateReport {
                estimator: estimator_name(cfg.weight, false),
                estimand: Estimand::Cate { arm: arms[0], control: arms[1], x: x.clone() },
                point: tau,
                variance: var,
                se,
                ci: [tau - z * se, tau + z * se],
                alpha: cfg.alpha,
                n: d.len(),
                folds: folds.k(),
                seed: cfg.seed,
                weight: cfg.weight,
                regressor: cfg.regressor.clone(),
                fewshot: None,
                influence: phi.clone(),
            })
        })
        .collect()
}
