//! Outcome predictors, stored prediction sets and few-shot aggregation.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{FoldAssignment, RctDataset};
use crate::error::{CalmError, Result};
use crate::par::{self, Execution};
use crate::rng::{self, tag};
use crate::sim::OutcomeModel;

/// The subject a prediction is requested for.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub id: &'a str,
    pub x: &'a [f64],
    pub z: &'a str,
}

impl<'a> Query<'a> {
    pub fn of(d: &'a RctDataset, i: usize) -> Self {
        Query { id: d.id(i), x: d.x_row(i), z: d.z(i) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Demo<'a> {
    pub id: &'a str,
    pub x: &'a [f64],
    pub z: &'a str,
    pub y: f64,
}

/// An ordered demonstration set with a fingerprint of its member ids.
#[derive(Debug, Clone)]
pub struct DemoSet<'a> {
    pub demos: Vec<Demo<'a>>,
    pub fingerprint: u64,
}

impl<'a> DemoSet<'a> {
    pub fn new(d: &'a RctDataset, members: &[usize]) -> Self {
        let demos: Vec<Demo<'a>> = members
            .iter()
            .map(|&i| Demo { id: d.id(i), x: d.x_row(i), z: d.z(i), y: d.y()[i] })
            .collect();
        let fingerprint = demos
            .iter()
            .fold(rng::splitmix64(demos.len() as u64), |acc, dm| rng::splitmix64(acc ^ rng::hash_str(dm.id)));
        DemoSet { demos, fingerprint }
    }
}

pub trait Predictor: Send + Sync {
    /// Predict `Y(arm)` for `query`, optionally conditioning on demonstrations.
    fn predict(&self, query: &Query<'_>, arm: usize, demos: Option<&DemoSet<'_>>) -> Result<f64>;
}

/// Zero-shot and few-shot predictions keyed by subject id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    zero_shot: BTreeMap<(String, usize), f64>,
    /// `(id, arm, donor fold) -> (b -> value)`.
    few_shot: BTreeMap<(String, usize, usize), BTreeMap<usize, f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    arm: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    donor_fold: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    b: Option<usize>,
    value: f64,
}

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_zero_shot(&mut self, id: &str, arm: usize, value: f64) {
        self.zero_shot.insert((id.to_string(), arm), value);
    }

    pub fn insert_few_shot(&mut self, id: &str, arm: usize, donor_fold: usize, b: usize, value: f64) {
        self.few_shot
            .entry((id.to_string(), arm, donor_fold))
            .or_default()
            .insert(b, value);
    }

    pub fn zero_shot(&self, id: &str, arm: usize) -> Option<f64> {
        self.zero_shot.get(&(id.to_string(), arm)).copied()
    }

    pub fn has_zero_shot(&self) -> bool {
        !self.zero_shot.is_empty()
    }

    pub fn has_few_shot(&self) -> bool {
        !self.few_shot.is_empty()
    }

    /// Individual few-shot draws in `b` order.
    pub fn few_shot_draws(&self, id: &str, arm: usize, donor_fold: usize) -> Option<Vec<f64>> {
        self.few_shot
            .get(&(id.to_string(), arm, donor_fold))
            .map(|m| m.values().copied().collect())
    }

    /// The few-shot aggregate: the mean over draws.
    pub fn few_shot_mean(&self, id: &str, arm: usize, donor_fold: usize) -> Option<f64> {
        let m = self.few_shot.get(&(id.to_string(), arm, donor_fold))?;
        if m.is_empty() {
            return None;
        }
        Some(m.values().sum::<f64>() / m.len() as f64)
    }

    /// Zero-shot predictions for every subject, in dataset order.
    pub fn zero_shot_column(&self, d: &RctDataset, arm: usize) -> Result<Vec<f64>> {
        (0..d.len())
            .map(|i| {
                self.zero_shot(d.id(i), arm).ok_or_else(|| CalmError::MissingPrediction {
                    id: d.id(i).to_string(),
                    arm,
                    context: None,
                })
            })
            .collect()
    }

    /// Few-shot aggregates for `subjects` using demonstrations from `donor_fold`.
    pub fn few_shot_column(&self, d: &RctDataset, arm: usize, donor_fold: usize, subjects: &[usize]) -> Result<Vec<f64>> {
        subjects
            .iter()
            .map(|&i| {
                self.few_shot_mean(d.id(i), arm, donor_fold)
                    .ok_or_else(|| CalmError::MissingPrediction {
                        id: d.id(i).to_string(),
                        arm,
                        context: Some(format!("donor fold {donor_fold}")),
                    })
            })
            .collect()
    }

    /// Keep draws `0..b` of every few-shot entry.
    pub fn retain_draws(&mut self, b: usize) -> Result<()> {
        for ((id, arm, f), draws) in self.few_shot.iter_mut() {
            if (0..b).any(|k| !draws.contains_key(&k)) {
                return Err(CalmError::domain(format!(
                    "subject {id}, arm {arm}, donor fold {f}: fewer than B = {b} few-shot draws"
                )));
            }
            draws.retain(|&k, _| k < b);
        }
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut set = PredictionSet::new();
        for (ln, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| {
                let msg = e.to_string();
                let column = ["id", "arm", "donor_fold", "b", "value"]
                    .into_iter()
                    .find(|c| msg.contains(&format!("`{c}`")))
                    .unwrap_or("record");
                CalmError::parse(ln + 1, column, msg)
            })?;
            if !rec.value.is_finite() {
                return Err(CalmError::parse(ln + 1, "value", "prediction is not finite"));
            }
            match (rec.donor_fold, rec.b) {
                (Some(f), Some(b)) => set.insert_few_shot(&rec.id, rec.arm, f, b, rec.value),
                (None, None) => set.insert_zero_shot(&rec.id, rec.arm, rec.value),
                _ => {
                    return Err(CalmError::parse(ln + 1, "donor_fold", "few-shot records need both donor_fold and b"))
                }
            }
        }
        Ok(set)
    }

    /// Zero-shot records first, then few-shot, each in key order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for ((id, arm), v) in &self.zero_shot {
            let rec = Record { id: id.clone(), arm: *arm, donor_fold: None, b: None, value: *v };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        for ((id, arm, f), draws) in &self.few_shot {
            for (b, v) in draws {
                let rec = Record { id: id.clone(), arm: *arm, donor_fold: Some(*f), b: Some(*b), value: *v };
                writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
            }
        }
        Ok(())
    }

    /// Zero-shot predictions for every subject and each of `arms`.
    pub fn from_predictor(d: &RctDataset, predictor: &dyn Predictor, arms: &[usize], exec: Execution) -> Result<Self> {
        let mut set = PredictionSet::new();
        for &arm in arms {
            d.check_arm(arm)?;
            let vals = par::map_range(exec, d.len(), |i| predictor.predict(&Query::of(d, i), arm, None));
            for (i, v) in vals.into_iter().enumerate() {
                set.insert_zero_shot(d.id(i), arm, v?);
            }
        }
        Ok(set)
    }
}

/// Few-shot sampling settings: `m` demonstrations, `b` draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FewShotConfig {
    pub m: usize,
    pub b: usize,
    pub seed: u64,
}

/// Draw `cfg.b` ordered demonstration sets of size `cfg.m` from the arm-t
/// members of `donors` and predict every query subject under each set.
///
/// Demonstration sets are shared by all queries. The result holds one row
/// of `b` draws per query.
pub fn aggregate_few_shot(
    d: &RctDataset,
    predictor: &dyn Predictor,
    arm: usize,
    donor_fold: usize,
    donors: &[usize],
    queries: &[usize],
    cfg: &FewShotConfig,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    if cfg.b == 0 {
        return Err(CalmError::domain("few-shot aggregation needs at least one draw"));
    }
    let eligible: Vec<usize> = donors.iter().copied().filter(|&i| d.arm(i) == arm).collect();
    if eligible.len() < cfg.m {
        return Err(CalmError::domain(format!(
            "donor fold {donor_fold} has {} arm-{arm} subjects, fewer than m = {}",
            eligible.len(),
            cfg.m
        )));
    }
    let sets: Vec<Option<DemoSet<'_>>> = (0..cfg.b)
        .map(|b| {
            if cfg.m == 0 {
                return None;
            }
            let mut pool = eligible.clone();
            let mut r = rng::stream(cfg.seed, &[tag::FEWSHOT, arm as u64, donor_fold as u64, b as u64]);
            let (chosen, _) = pool.partial_shuffle(&mut r, cfg.m);
            Some(DemoSet::new(d, chosen))
        })
        .collect();
    let rows = par::map_slice(exec, queries, |&i| {
        let q = Query::of(d, i);
        sets.iter().map(|s| predictor.predict(&q, arm, s.as_ref())).collect::<Result<Vec<f64>>>()
    });
    rows.into_iter().collect()
}

/// The three-fold rotation `(donor, train, evaluate)`.
pub const ROTATIONS: [(usize, usize, usize); 3] = [(1, 2, 3), (2, 3, 1), (3, 1, 2)];

/// Fill `set` with few-shot draws for each arm and rotation: every subject
/// outside a donor fold is predicted with demonstrations from that fold.
pub fn fill_few_shot(
    set: &mut PredictionSet,
    d: &RctDataset,
    predictor: &dyn Predictor,
    arms: &[usize],
    folds: &FoldAssignment,
    cfg: &FewShotConfig,
    exec: Execution,
) -> Result<()> {
    if folds.k() != 3 {
        return Err(CalmError::domain("few-shot estimation uses exactly three folds"));
    }
    for &arm in arms {
        d.check_arm(arm)?;
        for &(donor, _, _) in &ROTATIONS {
            let donors = folds.members(donor);
            let queries: Vec<usize> = (0..d.len()).filter(|&i| folds.label(i) != donor).collect();
            let rows = aggregate_few_shot(d, predictor, arm, donor, &donors, &queries, cfg, exec)?;
            for (&i, row) in queries.iter().zip(rows) {
                for (b, v) in row.into_iter().enumerate() {
                    set.insert_few_shot(d.id(i), arm, donor, b, v);
                }
            }
        }
    }
    Ok(())
}

/// Replays stored zero-shot predictions; demonstrations are ignored.
#[derive(Debug, Clone)]
pub struct FilePredictor {
    set: PredictionSet,
}

impl FilePredictor {
    pub fn new(set: PredictionSet) -> Self {
        FilePredictor { set }
    }
}

impl Predictor for FilePredictor {
    fn predict(&self, q: &Query<'_>, arm: usize, _demos: Option<&DemoSet<'_>>) -> Result<f64> {
        self.set.zero_shot(q.id, arm).ok_or_else(|| CalmError::MissingPrediction {
            id: q.id.to_string(),
            arm,
            context: None,
        })
    }
}

/// Settings for the simulated predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Target `corr(Y(t), Y-dagger(t) | X)` per arm.
    pub rho: Vec<f64>,
    /// Per-stratum override of the target correlation, applied to all arms.
    #[serde(default)]
    pub rho_by_stratum: BTreeMap<u32, f64>,
    /// Additive bias.
    #[serde(default)]
    pub bias: f64,
    /// Residual scale of the predictions; defaults to `sd(Y(t) | X)`.
    #[serde(default)]
    pub noise_sd: Option<f64>,
    /// Weight on the mean demonstration residual.
    #[serde(default)]
    pub demo_shift: f64,
    /// Scale of noise keyed by the demonstration set.
    #[serde(default)]
    pub demo_noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            rho: vec![0.8, 0.8],
            rho_by_stratum: BTreeMap::new(),
            bias: 0.0,
            noise_sd: None,
            demo_shift: 0.5,
            demo_noise_sd: 0.5,
            seed: 0,
        }
    }
}

/// Simulated predictor with a controlled conditional correlation.
///
/// The payload `z` carries the latent signal `g` of the outcome model, so
/// the prediction residual can be built as `a * theta_t * g + b * eta`
/// where `eta` is independent noise. `(a, b)` are solved so the residual has
/// scale `noise_sd` and conditional correlation `rho` with `Y(t)`.
#[derive(Debug, Clone)]
pub struct SyntheticPredictor {
    model: Arc<OutcomeModel>,
    cfg: SyntheticConfig,
}

impl SyntheticPredictor {
    pub fn new(model: Arc<OutcomeModel>, cfg: SyntheticConfig) -> Result<Self> {
        if cfg.rho.len() != model.arm_count() {
            return Err(CalmError::domain("synthetic predictor needs one target correlation per arm"));
        }
        if cfg.noise_sd.is_some_and(|s| !(s >= 0.0)) || !(cfg.demo_noise_sd >= 0.0) {
            return Err(CalmError::domain("noise scales must be non-negative"));
        }
        let p = SyntheticPredictor { model, cfg };
        for arm in 1..=p.model.arm_count() {
            let theta = p.model.theta(arm);
            let v = p.model.residual_var(arm);
            let mut targets = vec![p.cfg.rho[arm - 1]];
            targets.extend(p.cfg.rho_by_stratum.values().copied());
            for rho in targets {
                if !(-1.0..=1.0).contains(&rho) {
                    return Err(CalmError::domain(format!("target correlation {rho} outside [-1, 1]")));
                }
                if theta != 0.0 && rho * rho > theta * theta / v + 1e-12 {
                    return Err(CalmError::domain(format!(
                        "arm {arm}: target correlation {rho} exceeds the latent share {:.4}",
                        (theta * theta / v).sqrt()
                    )));
                }
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Arc<OutcomeModel> {
        &self.model
    }

    pub fn target_rho(&self, arm: usize, x: &[f64]) -> f64 {
        self.model
            .stratum(x)
            .and_then(|s| self.cfg.rho_by_stratum.get(&s).copied())
            .unwrap_or(self.cfg.rho[arm - 1])
    }

    pub fn noise_sd(&self, arm: usize) -> f64 {
        self.cfg.noise_sd.unwrap_or_else(|| self.model.residual_var(arm).sqrt())
    }

    /// Coefficients `(a, b)` of the prediction residual `a * theta * g + b * eta`.
    pub fn coefficients(&self, arm: usize, rho: f64) -> (f64, f64) {
        let s = self.noise_sd(arm);
        let theta = self.model.theta(arm);
        if theta == 0.0 {
            return (0.0, s * (1.0 - rho * rho).max(0.0).sqrt());
        }
        let v = self.model.residual_var(arm);
        let a = rho * s * v.sqrt() / (theta * theta);
        let b = s * (1.0 - rho * rho * v / (theta * theta)).max(0.0).sqrt();
        (a, b)
    }

    /// `(Var(Y-dagger | X), Cov(Y(arm), Y-dagger(arm) | X))` implied by the coefficients.
    pub fn conditional_moments(&self, arm: usize, x: &[f64]) -> (f64, f64) {
        let (a, b) = self.coefficients(arm, self.target_rho(arm, x));
        let theta = self.model.theta(arm);
        (a * a * theta * theta + b * b, a * theta * theta)
    }

    /// The `a * theta` loading of the prediction on the latent signal.
    pub fn latent_loading(&self, arm: usize, x: &[f64]) -> f64 {
        self.coefficients(arm, self.target_rho(arm, x)).0 * self.model.theta(arm)
    }
}

/// Extract the latent signal from a payload of the form `g=<value>`.
pub fn parse_latent(z: &str) -> Result<f64> {
    let s = z.trim();
    let s = s.strip_prefix("g=").unwrap_or(s);
    s.parse::<f64>()
        .map_err(|_| CalmError::domain(format!("payload `{z}` does not carry a latent value")))
}

impl Predictor for SyntheticPredictor {
    fn predict(&self, q: &Query<'_>, arm: usize, demos: Option<&DemoSet<'_>>) -> Result<f64> {
        let g = parse_latent(q.z)?;
        let (a, b) = self.coefficients(arm, self.target_rho(arm, q.x));
        let key = rng::hash_str(q.id);
        let eta = if b != 0.0 {
            rng::keyed_normal(self.cfg.seed, &[tag::PREDICTOR, key, arm as u64])
        } else {
            0.0
        };
        let mut v = self.model.mean(q.x, arm) + self.cfg.bias + a * self.model.theta(arm) * g + b * eta;
        if let Some(ds) = demos.filter(|ds| !ds.demos.is_empty()) {
            if self.cfg.demo_shift != 0.0 {
                let resid: f64 = ds.demos.iter().map(|dm| dm.y - self.model.mean(dm.x, arm)).sum::<f64>()
                    / ds.demos.len() as f64;
                v += self.cfg.demo_shift * resid;
            }
            if self.cfg.demo_noise_sd != 0.0 {
                v += self.cfg.demo_noise_sd
                    * rng::keyed_normal(self.cfg.seed, &[tag::DEMO_NOISE, ds.fingerprint, key, arm as u64]);
            }
        }
        Ok(v)
    }
}

/// A predictor served over HTTP.
///
/// Requests are `POST {"x", "z", "arm", "demos": [{"x", "z", "y"}]}` and
/// the response is `{"value": <number>}`. Answers are cached by subject,
/// arm and demonstration fingerprint, and optionally appended to a JSONL
/// cache file so reruns replay them without network traffic.
pub struct RemotePredictor {
    url: String,
    agent: ureq::Agent,
    retries: usize,
    cache: Mutex<BTreeMap<(String, usize, u64), f64>>,
    cache_file: Option<Mutex<std::fs::File>>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    id: String,
    arm: usize,
    demos: String,
    value: f64,
}

#[derive(Serialize)]
struct RemoteDemo<'a> {
    x: &'a [f64],
    z: &'a str,
    y: f64,
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    x: &'a [f64],
    z: &'a str,
    arm: usize,
    demos: Vec<RemoteDemo<'a>>,
}

#[derive(Deserialize)]
struct RemoteResponse {
    value: f64,
}

impl RemotePredictor {
    pub fn new(url: impl Into<String>, timeout: Duration, retries: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        RemotePredictor {
            url: url.into(),
            agent,
            retries,
            cache: Mutex::new(BTreeMap::new()),
            cache_file: None,
        }
    }

    /// Load cached answers from `path` and append new ones to it.
    pub fn with_cache_file(mut self, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let mut cache = self.cache.lock().expect("cache lock");
            for (ln, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let c: CacheLine =
                    serde_json::from_str(line).map_err(|e| CalmError::parse(ln + 1, "cache", e.to_string()))?;
                let fp = u64::from_str_radix(&c.demos, 16)
                    .map_err(|_| CalmError::parse(ln + 1, "demos", "bad fingerprint"))?;
                cache.insert((c.id, c.arm, fp), c.value);
            }
        }
        let f = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
        self.cache_file = Some(Mutex::new(f));
        Ok(self)
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn call(&self, q: &Query<'_>, arm: usize, demos: Option<&DemoSet<'_>>) -> Result<f64> {
        let body = RemoteRequest {
            x: q.x,
            z: q.z,
            arm,
            demos: demos
                .map(|ds| ds.demos.iter().map(|d| RemoteDemo { x: d.x, z: d.z, y: d.y }).collect())
                .unwrap_or_default(),
        };
        let mut attempt = 0;
        loop {
            let result = self
                .agent
                .post(&self.url)
                .send_json(&body)
                .map_err(remote_error)
                .and_then(|mut resp| {
                    resp.body_mut().read_json::<RemoteResponse>().map_err(|e| CalmError::Remote {
                        message: format!("malformed response: {e}"),
                        retryable: false,
                    })
                });
            match result {
                Ok(r) if r.value.is_finite() => return Ok(r.value),
                Ok(r) => {
                    return Err(CalmError::Remote {
                        message: format!("non-finite prediction {}", r.value),
                        retryable: false,
                    })
                }
                Err(CalmError::Remote { retryable: true, .. }) if attempt < self.retries => {
                    attempt += 1;
                    std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn remote_error(e: ureq::Error) -> CalmError {
    let retryable = match &e {
        ureq::Error::StatusCode(code) => *code >= 500 || *code == 429,
        ureq::Error::Io(_) | ureq::Error::Timeout(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            true
        }
        _ => false,
    };
    CalmError::Remote { message: e.to_string(), retryable }
}

impl Predictor for RemotePredictor {
    fn predict(&self, q: &Query<'_>, arm: usize, demos: Option<&DemoSet<'_>>) -> Result<f64> {
        let fp = demos.map_or(0, |d| d.fingerprint);
        let key = (q.id.to_string(), arm, fp);
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let v = self.call(q, arm, demos)?;
        self.cache.lock().expect("cache lock").insert(key, v);
        if let Some(f) = &self.cache_file {
            let line = CacheLine { id: q.id.to_string(), arm, demos: format!("{fp:016x}"), value: v };
            let mut f = f.lock().expect("cache file lock");
            writeln!(f, "{}", serde_json::to_string(&line).expect("cache line serializes"))?;
        }
        Ok(v)
    }
}
