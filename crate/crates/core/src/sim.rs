//! Synthetic trials with known truth, and a Monte Carlo harness.
//!
//! Potential outcomes follow
//! `Y(t) = beta_t'x + 1{t = 1} (tau0 + tau1 x1) + c (x1^2 - 1) + theta_t g + sigma eps_t`
//! with `x ~ N(0, I_p)`, `g, eps_t ~ N(0, 1)`. The latent `g` is carried in
//! the payload column, which is how the simulated predictor gets signal the
//! covariates do not contain.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::WeightKind;
use crate::data::{Columns, Propensity, RctDataset, DEFAULT_EPSILON};
use crate::error::{CalmError, Result};
use crate::estimators::{self, Estimand, EstimateReport, EstimatorConfig, FewShotSettings};
use crate::kernel::Kernel;
use crate::par::{self, Execution};
use crate::predictor::{self, FewShotConfig, PredictionSet, SyntheticConfig, SyntheticPredictor};
use crate::rng::{self, tag};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub p: usize,
    /// Assignment probability per arm; arm 1 is the treated arm.
    pub propensity: Vec<f64>,
    /// Explicit coefficients per arm; drawn on a sphere of radius
    /// `beta_norm` when absent.
    #[serde(default)]
    pub beta: Option<Vec<Vec<f64>>>,
    pub beta_norm: f64,
    pub tau0: f64,
    pub tau1: f64,
    pub quadratic: f64,
    pub theta: Vec<f64>,
    pub sigma_y: f64,
    /// Number of equiprobable bins of `x1` recorded as the coarse covariate.
    #[serde(default)]
    pub strata: Option<usize>,
    pub predictor: SyntheticConfig,
    /// Seeds the coefficient draw and the truth integration.
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n: 2000,
            p: 2,
            propensity: vec![0.5, 0.5],
            beta: None,
            beta_norm: 1.0,
            tau0: 1.0,
            tau1: 0.0,
            quadratic: 0.0,
            theta: vec![1.0, 1.0],
            sigma_y: 0.5,
            strata: None,
            predictor: SyntheticConfig::default(),
            seed: 20_240_917,
        }
    }
}

impl DgpConfig {
    /// Named configurations used by the command line and the test suite.
    pub fn preset(name: &str) -> Result<Self> {
        let base = DgpConfig::default();
        Ok(match name {
            "default" => base,
            "constant-mean" => DgpConfig { beta: Some(vec![vec![0.0; 2]; 2]), tau0: 0.0, ..base },
            "nonlinear" => DgpConfig {
                quadratic: 1.0,
                predictor: SyntheticConfig { rho: vec![0.5, 0.5], ..SyntheticConfig::default() },
                ..base
            },
            "cate" => DgpConfig { p: 1, tau0: 0.0, tau1: 1.0, ..base },
            "stratified" => DgpConfig {
                strata: Some(4),
                predictor: SyntheticConfig {
                    rho_by_stratum: [(1, 0.0), (2, 0.3), (3, 0.6), (4, 0.85)].into_iter().collect(),
                    ..SyntheticConfig::default()
                },
                ..base
            },
            "efficiency-null" => DgpConfig {
                p: 1,
                beta_norm: 0.5,
                predictor: SyntheticConfig { rho: vec![0.0, 0.0], ..SyntheticConfig::default() },
                ..base
            },
            "efficiency-alt" => DgpConfig { p: 1, beta_norm: 0.5, ..base },
            other => return Err(CalmError::domain(format!("unknown data-generating process `{other}`"))),
        })
    }

    pub fn arm_count(&self) -> usize {
        self.propensity.len()
    }
}

/// The structural part of the outcome model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    beta: Vec<Vec<f64>>,
    tau0: f64,
    tau1: f64,
    quadratic: f64,
    theta: Vec<f64>,
    sigma_y: f64,
    strata_cuts: Option<Vec<f64>>,
}

impl OutcomeModel {
    pub fn new(cfg: &DgpConfig) -> Result<Self> {
        let k = cfg.arm_count();
        if k < 2 || cfg.theta.len() != k {
            return Err(CalmError::domain("need at least two arms and one latent loading per arm"));
        }
        if cfg.p == 0 {
            return Err(CalmError::domain("need at least one covariate"));
        }
        if !(cfg.sigma_y > 0.0) {
            return Err(CalmError::domain("outcome noise scale must be positive"));
        }
        let beta = match &cfg.beta {
            Some(b) => {
                if b.len() != k || b.iter().any(|v| v.len() != cfg.p) {
                    return Err(CalmError::domain("beta must be arm_count x p"));
                }
                b.clone()
            }
            None => (1..=k)
                .map(|arm| {
                    let mut r = rng::stream(cfg.seed, &[tag::BETA, arm as u64]);
                    let v: Vec<f64> = (0..cfg.p).map(|_| StandardNormal.sample(&mut r)).collect();
                    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    v.into_iter().map(|a| cfg.beta_norm * a / norm).collect()
                })
                .collect(),
        };
        let strata_cuts = cfg.strata.map(|s| (1..s).map(|j| stats::normal_quantile(j as f64 / s as f64)).collect());
        Ok(OutcomeModel {
            beta,
            tau0: cfg.tau0,
            tau1: cfg.tau1,
            quadratic: cfg.quadratic,
            theta: cfg.theta.clone(),
            sigma_y: cfg.sigma_y,
            strata_cuts,
        })
    }

    pub fn arm_count(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[Vec<f64>] {
        &self.beta
    }

    /// `E[Y(arm) | X = x]`.
    pub fn mean(&self, x: &[f64], arm: usize) -> f64 {
        let lin: f64 = self.beta[arm - 1].iter().zip(x).map(|(b, v)| b * v).sum();
        let effect = if arm == 1 { self.tau0 + self.tau1 * x[0] } else { 0.0 };
        lin + effect + self.quadratic * (x[0] * x[0] - 1.0)
    }

    pub fn cate(&self, x: &[f64], arm: usize, control: usize) -> f64 {
        self.mean(x, arm) - self.mean(x, control)
    }

    pub fn theta(&self, arm: usize) -> f64 {
        self.theta[arm - 1]
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    /// `Var(Y(arm) | X)`.
    pub fn residual_var(&self, arm: usize) -> f64 {
        self.theta(arm).powi(2) + self.sigma_y.powi(2)
    }

    pub fn stratum(&self, x: &[f64]) -> Option<u32> {
        self.strata_cuts
            .as_ref()
            .map(|cuts| 1 + cuts.iter().filter(|&&c| x[0] > c).count() as u32)
    }
}

/// Population quantities, by numerical integration over the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub mu: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub draws: usize,
}

impl TruthRecord {
    pub fn integrate(model: &OutcomeModel, p: usize, draws: usize, seed: u64) -> Self {
        let k = model.arm_count();
        let chunks = 64;
        let per = draws.div_ceil(chunks);
        let sums: Vec<Vec<f64>> = par::map_range(Execution::Parallel, chunks, |c| {
            let mut r = rng::stream(seed, &[tag::TRUTH, c as u64]);
            let mut acc = vec![0.0; k];
            let mut x = vec![0.0; p];
            let count = per.min(draws.saturating_sub(c * per));
            for _ in 0..count {
                for v in x.iter_mut() {
                    *v = StandardNormal.sample(&mut r);
                }
                for (arm, a) in acc.iter_mut().enumerate() {
                    *a += model.mean(&x, arm + 1);
                }
            }
            acc
        });
        let mu = (0..k).map(|a| sums.iter().map(|s| s[a]).sum::<f64>() / draws as f64).collect();
        TruthRecord { mu, beta: model.beta().to_vec(), draws }
    }

    pub fn value(&self, estimand: &Estimand, model: &OutcomeModel) -> f64 {
        match estimand {
            Estimand::Mean { arm } => self.mu[arm - 1],
            Estimand::Ate { arm, control } => self.mu[arm - 1] - self.mu[control - 1],
            Estimand::Cate { arm, control, x } => model.cate(x, *arm, *control),
        }
    }
}

pub const TRUTH_DRAWS: usize = 1_000_000;

/// A configured data-generating process with its truth computed once.
#[derive(Debug, Clone)]
pub struct Dgp {
    pub config: DgpConfig,
    pub model: Arc<OutcomeModel>,
    pub truth: TruthRecord,
}

/// One simulated trial.
#[derive(Debug, Clone)]
pub struct Trial {
    pub dataset: RctDataset,
    pub predictions: PredictionSet,
    pub predictor: SyntheticPredictor,
    /// `potential[arm - 1][i] = Y_i(arm)`.
    pub potential: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Dgp {
    pub fn new(config: DgpConfig) -> Result<Self> {
        Self::with_truth_draws(config, TRUTH_DRAWS)
    }

    pub fn with_truth_draws(config: DgpConfig, draws: usize) -> Result<Self> {
        let model = Arc::new(OutcomeModel::new(&config)?);
        // validates the predictor settings up front
        SyntheticPredictor::new(model.clone(), config.predictor.clone())?;
        Propensity::constant(&config.propensity);
        let truth = TruthRecord::integrate(&model, config.p, draws, config.seed);
        Ok(Dgp { config, model, truth })
    }

    pub fn generate(&self, seed: u64, exec: Execution) -> Result<Trial> {
        let cfg = &self.config;
        let k = cfg.arm_count();
        let mut r = rng::stream(seed, &[tag::TRIAL]);
        let mut cols = Columns { p: cfg.p, ..Default::default() };
        let mut potential = vec![Vec::with_capacity(cfg.n); k];
        let mut coarse = Vec::with_capacity(cfg.n);
        let cum: Vec<f64> = cfg
            .propensity
            .iter()
            .scan(0.0, |s, p| {
                *s += p;
                Some(*s)
            })
            .collect();
        for i in 0..cfg.n {
            let x: Vec<f64> = (0..cfg.p).map(|_| StandardNormal.sample(&mut r)).collect();
            let g: f64 = StandardNormal.sample(&mut r);
            for (arm, pot) in potential.iter_mut().enumerate() {
                let eps: f64 = StandardNormal.sample(&mut r);
                pot.push(self.model.mean(&x, arm + 1) + self.model.theta(arm + 1) * g + cfg.sigma_y * eps);
            }
            let u: f64 = r.random();
            let t = cum.iter().position(|&c| u < c).unwrap_or(k - 1) + 1;
            cols.ids.push(format!("s{i:05}"));
            cols.y.push(potential[t - 1][i]);
            cols.arms.push(t);
            cols.z.push(format!("g={g}"));
            if let Some(s) = self.model.stratum(&x) {
                coarse.push(s);
            }
            cols.x.extend(x);
        }
        if cfg.strata.is_some() {
            cols.x_coarse = Some(coarse);
        }
        let dataset = RctDataset::new(cols, Propensity::constant(&cfg.propensity), DEFAULT_EPSILON)?;
        let pcfg = SyntheticConfig { seed: rng::derive(seed, &[tag::PREDICTOR]), ..cfg.predictor.clone() };
        let predictor = SyntheticPredictor::new(self.model.clone(), pcfg)?;
        let arms: Vec<usize> = (1..=k).collect();
        let predictions = PredictionSet::from_predictor(&dataset, &predictor, &arms, exec)?;
        Ok(Trial { dataset, predictions, predictor, potential, seed })
    }
}

/// Draw one trial: data, zero-shot predictions and the truth record.
pub fn generate_trial(config: &DgpConfig, seed: u64) -> Result<(Trial, TruthRecord)> {
    let dgp = Dgp::new(config.clone())?;
    let trial = dgp.generate(seed, Execution::default())?;
    Ok((trial, dgp.truth))
}

/// Asymptotic variances implied by the outcome model and predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalVariance {
    pub v_aipw: f64,
    pub v_calm: f64,
}

impl TheoreticalVariance {
    pub fn ratio(&self) -> f64 {
        self.v_calm / self.v_aipw
    }
}

/// Conditional second moments at `x` for a contrast: `(Sigma_V, Cov(V, Z))`.
fn ate_system(pred: &SyntheticPredictor, e: &[f64], x: &[f64], t: usize, c: usize) -> ([[f64; 2]; 2], [f64; 2]) {
    let m = pred.model();
    let (lt, lc) = (1.0 / e[t - 1] - 1.0, 1.0 / e[c - 1] - 1.0);
    let (vd_t, cov_t) = pred.conditional_moments(t, x);
    let (vd_c, cov_c) = pred.conditional_moments(c, x);
    let (load_t, load_c) = (pred.latent_loading(t, x), pred.latent_loading(c, x));
    let s = load_t * load_c;
    let r = (lt * lc).sqrt();
    let sigma = [[lt * vd_t, r * s], [r * s, lc * vd_c]];
    // Cov(Y(c), Y-dagger(t)) = theta_c * loading_t, and symmetrically
    let cvec = [lt * cov_t + r * m.theta(c) * load_t, lc * cov_c + r * m.theta(t) * load_c];
    (sigma, cvec)
}

fn quad_form_inv(s: [[f64; 2]; 2], c: [f64; 2]) -> f64 {
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    if !(det > 0.0) {
        // fall back to whichever coordinate is non-degenerate
        return [0, 1]
            .iter()
            .filter(|&&j| s[j][j] > 0.0)
            .map(|&j| c[j] * c[j] / s[j][j])
            .fold(0.0, f64::max);
    }
    (s[1][1] * c[0] * c[0] - 2.0 * s[0][1] * c[0] * c[1] + s[0][0] * c[1] * c[1]) / det
}

/// Monte Carlo integration of the asymptotic variance expressions.
///
/// For CATE the values are the variances of `sqrt(n h^p) (tau(x) - tau(x))`.
pub fn theoretical_variance(cfg: &DgpConfig, estimand: &Estimand, draws: usize, seed: u64) -> Result<TheoreticalVariance> {
    let dgp = Dgp::with_truth_draws(cfg.clone(), 1)?;
    let pred = SyntheticPredictor::new(dgp.model.clone(), cfg.predictor.clone())?;
    let m = &dgp.model;
    let e = &cfg.propensity;
    if let Estimand::Cate { arm, control, x } = estimand {
        let (sigma, cvec) = ate_system(&pred, e, x, *arm, *control);
        let base = m.residual_var(*arm) / e[arm - 1] + m.residual_var(*control) / e[control - 1];
        let density: f64 = x.iter().map(|v| Kernel::Gaussian.eval(*v)).product();
        let scale = Kernel::Gaussian.roughness().powi(x.len() as i32) / density;
        return Ok(TheoreticalVariance { v_aipw: scale * base, v_calm: scale * (base - quad_form_inv(sigma, cvec)) });
    }
    let mut r = rng::stream(seed, &[tag::TRUTH, 99]);
    let mut centre = Vec::with_capacity(draws);
    let (mut aipw, mut reduction) = (0.0, 0.0);
    for _ in 0..draws {
        let x: Vec<f64> = (0..cfg.p).map(|_| StandardNormal.sample(&mut r)).collect();
        match *estimand {
            Estimand::Mean { arm } => {
                let et = e[arm - 1];
                let v = m.residual_var(arm);
                let (vd, cov) = pred.conditional_moments(arm, &x);
                let rho2 = if vd > 0.0 { cov * cov / (v * vd) } else { 0.0 };
                centre.push(m.mean(&x, arm));
                aipw += v / et;
                reduction += v / et * (1.0 - et) * rho2;
            }
            Estimand::Ate { arm, control } => {
                centre.push(m.cate(&x, arm, control));
                aipw += m.residual_var(arm) / e[arm - 1] + m.residual_var(control) / e[control - 1];
                let (sigma, cvec) = ate_system(&pred, e, &x, arm, control);
                reduction += quad_form_inv(sigma, cvec);
            }
            Estimand::Cate { .. } => unreachable!(),
        }
    }
    let nd = draws as f64;
    let between = stats::variance_pop(&centre);
    Ok(TheoreticalVariance { v_aipw: between + aipw / nd, v_calm: between + (aipw - reduction) / nd })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Method {
    Aipw,
    Calm,
    CalmFewShot { m: usize, b: usize },
}

/// An estimator to run in every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub name: String,
    pub method: Method,
    pub estimand: Estimand,
    pub config: EstimatorConfig,
}

impl EstimatorSpec {
    /// Parse `aipw`, `calm-zero`, `calm-robust` or `calm-fs` (m = 10, B = 200).
    pub fn parse(name: &str, estimand: Estimand, base: &EstimatorConfig) -> Result<Self> {
        let (method, weight) = match name {
            "aipw" => (Method::Aipw, WeightKind::Zero),
            "calm" | "calm-zero" => (Method::Calm, WeightKind::Smooth),
            "calm-robust" => (Method::Calm, WeightKind::Robust),
            "calm-fs" => (Method::CalmFewShot { m: 10, b: 200 }, WeightKind::Smooth),
            other => return Err(CalmError::domain(format!("unknown estimator `{other}`"))),
        };
        Ok(EstimatorSpec {
            name: name.to_string(),
            method,
            estimand,
            config: EstimatorConfig { weight, ..base.clone() },
        })
    }
}

fn contrast_arms(estimand: &Estimand) -> Result<(Vec<usize>, bool)> {
    match *estimand {
        Estimand::Mean { arm } => Ok((vec![arm], false)),
        Estimand::Ate { arm, control } => Ok((vec![arm, control], true)),
        Estimand::Cate { .. } => Err(CalmError::Harness("use the CATE helpers for conditional effects".into())),
    }
}

/// Run one estimator on one trial. `cache` holds few-shot draws keyed by `(m, b)`.
pub fn run_spec(
    trial: &Trial,
    spec: &EstimatorSpec,
    fold_seed: u64,
    fewshot_seed: u64,
    cache: &mut BTreeMap<(usize, usize), PredictionSet>,
    exec: Execution,
) -> Result<EstimateReport> {
    let d = &trial.dataset;
    let (arms, is_contrast) = contrast_arms(&spec.estimand)?;
    let cfg = EstimatorConfig { seed: fold_seed, exec, ..spec.config.clone() };
    let zs = |arm: usize| trial.predictions.zero_shot_column(d, arm);
    match spec.method {
        Method::Aipw | Method::Calm => {
            let cfg = if spec.method == Method::Aipw {
                EstimatorConfig { weight: WeightKind::Zero, ..cfg }
            } else {
                cfg
            };
            if is_contrast {
                let (a, b) = (zs(arms[0])?, zs(arms[1])?);
                estimators::estimate_ate(d, [&a, &b], [arms[0], arms[1]], &cfg)
            } else {
                estimators::estimate_mean(d, &zs(arms[0])?, arms[0], &cfg)
            }
        }
        Method::CalmFewShot { m, b } => {
            if !cache.contains_key(&(m, b)) {
                let folds = estimators::fewshot_folds(d, fold_seed)?;
                let mut set = PredictionSet::new();
                let all: Vec<usize> = (1..=d.arm_count()).collect();
                let fs = FewShotConfig { m, b, seed: fewshot_seed };
                predictor::fill_few_shot(&mut set, d, &trial.predictor, &all, &folds, &fs, exec)?;
                cache.insert((m, b), set);
            }
            let set = &cache[&(m, b)];
            let settings = FewShotSettings { m, b };
            if is_contrast {
                estimators::estimate_ate_fewshot(d, set, [arms[0], arms[1]], settings, &cfg)
            } else {
                estimators::estimate_mean_fewshot(d, set, arms[0], settings, &cfg)
            }
        }
    }
}

/// Summary of one estimator over replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McMetrics {
    pub estimator: String,
    pub estimand: Estimand,
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub abs_bias: f64,
    /// Monte Carlo standard error of the bias.
    pub bias_mc_se: f64,
    pub sd: f64,
    pub sqrt_n_sd: f64,
    pub coverage: f64,
    pub coverage_se: f64,
    pub mean_ci_width: f64,
    pub mean_variance_hat: f64,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
}

impl McMetrics {
    fn from_reports(spec: &EstimatorSpec, n: usize, truth: f64, reports: &[EstimateReport], failures: usize) -> Self {
        let est: Vec<f64> = reports.iter().map(|r| r.point).collect();
        let r = est.len().max(1) as f64;
        let mean = stats::mean(&est);
        let sd = stats::sd(&est);
        let coverage = reports.iter().filter(|x| x.covers(truth)).count() as f64 / r;
        McMetrics {
            estimator: spec.name.clone(),
            estimand: spec.estimand.clone(),
            n,
            replications: reports.len(),
            failures,
            truth,
            mean_estimate: mean,
            bias: mean - truth,
            abs_bias: (mean - truth).abs(),
            bias_mc_se: sd / r.sqrt(),
            sd,
            sqrt_n_sd: (n as f64).sqrt() * sd,
            coverage,
            coverage_se: (coverage * (1.0 - coverage) / r).sqrt(),
            mean_ci_width: reports.iter().map(EstimateReport::ci_width).sum::<f64>() / r,
            mean_variance_hat: reports.iter().map(|x| x.variance).sum::<f64>() / r,
            estimates: est,
            std_errors: reports.iter().map(|x| x.se).collect(),
        }
    }
}

/// Replication seeds: `(trial, folds, few-shot)`.
pub fn replication_seeds(base_seed: u64, r: usize) -> (u64, u64, u64) {
    let s = rng::derive(base_seed, &[tag::REPLICATION, r as u64]);
    (rng::derive(s, &[tag::TRIAL]), rng::derive(s, &[tag::FOLDS]), rng::derive(s, &[tag::FEWSHOT]))
}

/// Run every spec on the same `reps` simulated trials.
///
/// Failed fits drop that replication for that estimator; more than 5%
/// failures is reported as a harness error.
pub fn run_monte_carlo_many(
    dgp: &Dgp,
    specs: &[EstimatorSpec],
    reps: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<Vec<McMetrics>> {
    if reps == 0 {
        return Err(CalmError::Harness("need at least one replication".into()));
    }
    let per_rep: Vec<Vec<Result<EstimateReport>>> = par::map_range(exec, reps, |r| {
        let (ts, fs, fws) = replication_seeds(base_seed, r);
        let trial = match dgp.generate(ts, Execution::Sequential) {
            Ok(t) => t,
            Err(e) => return specs.iter().map(|_| Err(CalmError::Harness(e.to_string()))).collect(),
        };
        let mut cache = BTreeMap::new();
        specs
            .iter()
            .map(|s| run_spec(&trial, s, fs, fws, &mut cache, Execution::Sequential))
            .collect()
    });
    specs
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let mut ok = Vec::with_capacity(reps);
            let mut failures = 0;
            for row in &per_rep {
                match &row[j] {
                    Ok(rep) => ok.push(rep.clone()),
                    Err(e) => {
                        log::warn!("{}: replication failed: {e}", spec.name);
                        failures += 1;
                    }
                }
            }
            if failures as f64 > 0.05 * reps as f64 {
                return Err(CalmError::Harness(format!("{}: {failures} of {reps} replications failed", spec.name)));
            }
            let truth = dgp.truth.value(&spec.estimand, &dgp.model);
            Ok(McMetrics::from_reports(spec, dgp.config.n, truth, &ok, failures))
        })
        .collect()
}

pub fn run_monte_carlo(dgp: &Dgp, spec: &EstimatorSpec, reps: usize, base_seed: u64) -> Result<McMetrics> {
    Ok(run_monte_carlo_many(dgp, std::slice::from_ref(spec), reps, base_seed, Execution::default())?.remove(0))
}

/// Variance reduction of a calibrated estimator over AIPW, per stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReduction {
    /// `None` for the whole sample.
    pub stratum: Option<u32>,
    pub mean_size: f64,
    pub v_aipw: f64,
    pub v_calm: f64,
    pub reduction_pct: f64,
}

/// Monte Carlo variance of stratum-restricted means of the influence values
/// for AIPW and a calibrated estimator, over `reps` trials.
pub fn variance_reduction_report(
    dgp: &Dgp,
    arm: usize,
    weight: WeightKind,
    base: &EstimatorConfig,
    reps: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<Vec<StratumReduction>> {
    if dgp.config.strata.is_none() {
        return Err(CalmError::Harness("variance reduction report needs a stratified design".into()));
    }
    let rows: Vec<Result<BTreeMap<Option<u32>, (usize, f64, f64)>>> = par::map_range(exec, reps, |r| {
        let (ts, fs, _) = replication_seeds(base_seed, r);
        let trial = dgp.generate(ts, Execution::Sequential)?;
        let d = &trial.dataset;
        let ydag = trial.predictions.zero_shot_column(d, arm)?;
        let cfg = EstimatorConfig { seed: fs, exec: Execution::Sequential, ..base.clone() };
        let a = estimators::estimate_mean(d, &ydag, arm, &EstimatorConfig { weight: WeightKind::Zero, ..cfg.clone() })?;
        let c = estimators::estimate_mean(d, &ydag, arm, &EstimatorConfig { weight, ..cfg })?;
        let strata = d.x_coarse().expect("stratified design records strata");
        let mut acc: BTreeMap<Option<u32>, (usize, f64, f64)> = BTreeMap::new();
        for i in 0..d.len() {
            for key in [Some(strata[i]), None] {
                let e = acc.entry(key).or_insert((0, 0.0, 0.0));
                e.0 += 1;
                e.1 += a.influence[i];
                e.2 += c.influence[i];
            }
        }
        Ok(acc.into_iter().map(|(k, (n, sa, sc))| (k, (n, sa / n as f64, sc / n as f64))).collect())
    });
    let rows: Vec<_> = rows.into_iter().collect::<Result<_>>()?;
    let mut keys: Vec<Option<u32>> = rows.iter().flat_map(|m| m.keys().copied()).collect();
    keys.sort();
    keys.dedup();
    Ok(keys
        .into_iter()
        .map(|k| {
            let vals: Vec<(usize, f64, f64)> = rows.iter().filter_map(|m| m.get(&k).copied()).collect();
            let a: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let c: Vec<f64> = vals.iter().map(|v| v.2).collect();
            let (va, vc) = (stats::variance(&a), stats::variance(&c));
            StratumReduction {
                stratum: k,
                mean_size: vals.iter().map(|v| v.0 as f64).sum::<f64>() / vals.len() as f64,
                v_aipw: va,
                v_calm: vc,
                reduction_pct: (va - vc) / va * 100.0,
            }
        })
        .collect())
}

/// Write metrics as CSV, preceded by a `#` line holding the resolved config.
pub fn write_metrics_csv<W: Write>(metrics: &[McMetrics], config: &serde_json::Value, mut w: W) -> Result<()> {
    writeln!(w, "# config: {config}")?;
    writeln!(
        w,
        "estimator,estimand,n,replications,failures,truth,mean_estimate,bias,abs_bias,bias_mc_se,sd,sqrt_n_sd,coverage,coverage_se,mean_ci_width"
    )?;
    for m in metrics {
        let estimand = match &m.estimand {
            Estimand::Mean { arm } => format!("mean:{arm}"),
            Estimand::Ate { arm, control } => format!("ate:{arm}-{control}"),
            Estimand::Cate { arm, control, .. } => format!("cate:{arm}-{control}"),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            m.estimator,
            estimand,
            m.n,
            m.replications,
            m.failures,
            m.truth,
            m.mean_estimate,
            m.bias,
            m.abs_bias,
            m.bias_mc_se,
            m.sd,
            m.sqrt_n_sd,
            m.coverage,
            m.coverage_se,
            m.mean_ci_width
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for name in ["default", "constant-mean", "nonlinear", "cate", "stratified", "efficiency-null", "efficiency-alt"] {
            let cfg = DgpConfig::preset(name).unwrap();
            Dgp::with_truth_draws(cfg, 10).unwrap();
        }
        assert!(DgpConfig::preset("nope").is_err());
    }

    #[test]
    fn random_beta_has_requested_norm_and_is_seeded() {
        let cfg = DgpConfig { p: 5, beta_norm: 2.0, ..DgpConfig::default() };
        let a = OutcomeModel::new(&cfg).unwrap();
        let b = OutcomeModel::new(&cfg).unwrap();
        assert_eq!(a, b);
        for v in a.beta() {
            assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn truth_integration_agrees_with_closed_form() {
        // E[beta'x] = 0 and E[x1^2 - 1] = 0, so mu_1 = tau0 and mu_2 = 0
        let cfg = DgpConfig { quadratic: 0.7, ..DgpConfig::default() };
        let dgp = Dgp::with_truth_draws(cfg, 200_000).unwrap();
        assert!((dgp.truth.mu[0] - 1.0).abs() < 0.02);
        assert!(dgp.truth.mu[1].abs() < 0.02);
    }

    #[test]
    fn closed_form_variance_example() {
        // sigma^2 = 1, e = 0.5, rho = 0.8, constant mean: 1.36 versus 2
        let cfg = DgpConfig {
            beta: Some(vec![vec![0.0, 0.0]; 2]),
            tau0: 0.0,
            theta: vec![0.8, 0.8],
            sigma_y: 0.6,
            ..DgpConfig::default()
        };
        let tv = theoretical_variance(&cfg, &Estimand::Mean { arm: 1 }, 2000, 1).unwrap();
        assert!((tv.v_aipw - 2.0).abs() < 1e-12);
        assert!((tv.v_calm - 1.36).abs() < 1e-12);
        assert!((tv.ratio() - 0.68).abs() < 1e-12);
    }

    #[test]
    fn ate_reduction_with_uninformative_predictor_is_zero() {
        let mut cfg = DgpConfig::default();
        cfg.predictor.rho = vec![0.0, 0.0];
        let tv = theoretical_variance(&cfg, &Estimand::Ate { arm: 1, control: 2 }, 1000, 1).unwrap();
        assert!((tv.v_aipw - tv.v_calm).abs() < 1e-9);
    }

    #[test]
    fn trials_are_reproducible() {
        let dgp = Dgp::with_truth_draws(DgpConfig { n: 50, ..DgpConfig::default() }, 10).unwrap();
        let a = dgp.generate(3, Execution::Sequential).unwrap();
        let b = dgp.generate(3, Execution::Parallel).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.predictions, b.predictions);
        let c = dgp.generate(4, Execution::Sequential).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn observed_outcome_is_the_assigned_potential_outcome() {
        let dgp = Dgp::with_truth_draws(DgpConfig { n: 100, ..DgpConfig::default() }, 10).unwrap();
        let t = dgp.generate(1, Execution::Sequential).unwrap();
        for i in 0..100 {
            assert_eq!(t.dataset.y()[i], t.potential[t.dataset.arm(i) - 1][i]);
        }
    }
}
