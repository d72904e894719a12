use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use calm_core::calibration::WeightKind;
use calm_core::data::{self, CsvSchema, Propensity, RctDataset};
use calm_core::efftest::{self, EffTestConfig, Engine};
use calm_core::estimators::{self, CateConfig, EstimateReport, Estimand, EstimatorConfig, FewShotSettings};
use calm_core::nuisance::RegressorConfig;
use calm_core::par::Execution;
use calm_core::predictor::{self, FewShotConfig, FilePredictor, PredictionSet, Predictor, RemotePredictor};
use calm_core::rng::{self, tag};
use calm_core::sim::{self, DgpConfig, EstimatorSpec};
use calm_core::CalmError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

const DEFAULT_SEED: u64 = 20_240_917;

#[derive(Parser)]
#[command(name = "calm", version, about = "Calibrated estimation in randomized trials with outcome predictions")]
struct Cli {
    /// Worker threads (default: logical cores). Output does not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file of defaults; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a mean, contrast or conditional contrast from trial data.
    Analyze(AnalyzeArgs),
    /// Monte Carlo study on a synthetic data-generating process.
    Simulate(SimulateArgs),
    /// Test whether predictions can reduce variance for one arm.
    TestEfficiency(TestArgs),
    /// Collect few-shot predictions over resampled demonstration sets.
    AggregatePredictions(AggregateArgs),
}

#[derive(Args, Default)]
struct Shared {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct DataArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    propensity: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Robust-weight strata: the `xc` column when present, or quartile bins.
    #[arg(long, value_enum)]
    coarsen: Option<Coarsen>,
}

#[derive(Clone, Copy, ValueEnum, Deserialize, PartialEq, Eq, Debug)]
#[serde(rename_all = "lowercase")]
enum Coarsen {
    Auto,
    Quartile,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    arm: Option<usize>,
    /// Two arms `t,t'` for the contrast `E[Y(t)] - E[Y(t')]`.
    #[arg(long)]
    contrast: Option<String>,
    /// Query point `x1,..,xp` for a conditional contrast; repeatable.
    #[arg(long = "cate-at")]
    cate_at: Vec<String>,
    #[arg(long)]
    weight: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    regressor: Option<String>,
    #[arg(long = "fewshot-m")]
    fewshot_m: Option<usize>,
    #[arg(long = "fewshot-B")]
    fewshot_b: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    dgp: Option<String>,
    #[arg(long = "R")]
    reps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated: aipw, calm-zero, calm-robust, calm-fs.
    #[arg(long)]
    estimators: Option<String>,
    #[arg(long)]
    arm: Option<usize>,
    #[arg(long)]
    contrast: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    regressor: Option<String>,
    /// Prediction quality for every arm.
    #[arg(long)]
    rho: Option<f64>,
    /// Additive prediction bias.
    #[arg(long)]
    bias: Option<f64>,
    #[arg(long = "fewshot-m")]
    fewshot_m: Option<usize>,
    #[arg(long = "fewshot-B")]
    fewshot_b: Option<usize>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    arm: Option<usize>,
    /// Zero-based covariate used for the test.
    #[arg(long)]
    coordinate: Option<usize>,
    #[arg(long = "n-sim")]
    n_sim: Option<usize>,
    #[arg(long = "grid-size")]
    grid_size: Option<usize>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
}

#[derive(Clone, Copy, ValueEnum, Deserialize, Debug)]
#[serde(rename_all = "lowercase")]
enum EngineArg {
    Gaussian,
    Multiplier,
}

#[derive(Args)]
struct AggregateArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    data: DataArgs,
    /// Prediction service accepting POSTed JSON queries.
    #[arg(long)]
    remote: Option<String>,
    /// JSONL cache of remote answers, read and appended.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    retries: Option<usize>,
    /// Comma-separated arms (default: all).
    #[arg(long)]
    arms: Option<String>,
    #[arg(long = "fewshot-m")]
    fewshot_m: Option<usize>,
    #[arg(long = "fewshot-B")]
    fewshot_b: Option<usize>,
    /// Also record zero-shot predictions.
    #[arg(long = "zero-shot")]
    zero_shot: bool,
}

/// Keys accepted in the `--config` file.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    alpha: Option<f64>,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    propensity: Option<PathBuf>,
    predictions: Option<PathBuf>,
    coarsen: Option<Coarsen>,
    arm: Option<usize>,
    contrast: Option<String>,
    cate_at: Option<Vec<String>>,
    weight: Option<String>,
    folds: Option<usize>,
    regressor: Option<String>,
    fewshot_m: Option<usize>,
    fewshot_b: Option<usize>,
    dgp: Option<String>,
    reps: Option<usize>,
    n: Option<usize>,
    estimators: Option<String>,
    rho: Option<f64>,
    bias: Option<f64>,
    coordinate: Option<usize>,
    n_sim: Option<usize>,
    grid_size: Option<usize>,
    bandwidth: Option<f64>,
    engine: Option<EngineArg>,
    remote: Option<String>,
    cache: Option<PathBuf>,
    timeout: Option<f64>,
    retries: Option<usize>,
    arms: Option<String>,
    threads: Option<usize>,
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Estimation(String),
}

impl From<CalmError> for Failure {
    fn from(e: CalmError) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Estimation(e.to_string())
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn input(msg: impl Into<String>) -> Failure {
    Failure::Input(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Estimation(m)) => {
            eprintln!("estimation failed: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Outcome<()> {
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| input(format!("{}: {e}", p.display())))?;
            toml::from_str::<FileConfig>(&text).map_err(|e| input(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let exec = configure_threads(cli.threads.or(file.threads))?;
    match cli.command {
        Command::Analyze(a) => analyze(a, &file, exec),
        Command::Simulate(a) => simulate(a, &file, exec),
        Command::TestEfficiency(a) => test_efficiency(a, &file, exec),
        Command::AggregatePredictions(a) => aggregate(a, &file, exec),
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: Option<usize>) -> Outcome<Execution> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(input("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| input(e.to_string()))?;
    }
    Ok(Execution::Parallel)
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(threads: Option<usize>) -> Outcome<Execution> {
    if threads == Some(0) {
        return Err(input("--threads must be at least 1"));
    }
    Ok(Execution::Sequential)
}

/// Flag, then config file, then `CALM_SEED`, then the built-in default.
fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> Outcome<u64> {
    if let Some(s) = flag.or(file.seed) {
        return Ok(s);
    }
    if let Ok(v) = std::env::var("CALM_SEED") {
        return v.trim().parse().map_err(|_| input(format!("CALM_SEED=`{v}` is not an unsigned integer")));
    }
    eprintln!("seed: {DEFAULT_SEED} (default)");
    Ok(DEFAULT_SEED)
}

fn required<T: Clone>(flag: Option<T>, file: &Option<T>, name: &str) -> Outcome<T> {
    flag.or_else(|| file.clone()).ok_or_else(|| input(format!("missing --{name}")))
}

fn parse_weight(s: &str) -> Outcome<WeightKind> {
    WeightKind::parse(s).ok_or_else(|| input(format!("unknown weight `{s}` (smooth, robust or zero)")))
}

fn parse_arms(s: &str) -> Outcome<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| input(format!("bad arm list `{s}`"))))
        .collect()
}

fn parse_contrast(s: &str) -> Outcome<[usize; 2]> {
    match parse_arms(s)?.as_slice() {
        &[a, b] => Ok([a, b]),
        _ => Err(input(format!("--contrast expects `t,t'`, got `{s}`"))),
    }
}

fn parse_point(s: &str) -> Outcome<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| input(format!("bad query point `{s}`"))))
        .collect()
}

fn load(args: &DataArgs, file: &FileConfig) -> Outcome<(RctDataset, Value)> {
    let data_path = required(args.data.clone(), &file.data, "data")?;
    let prop_path = required(args.propensity.clone(), &file.propensity, "propensity")?;
    let coarsen = args.coarsen.or(file.coarsen).unwrap_or(Coarsen::Auto);
    let text = fs::read_to_string(&prop_path).map_err(|e| input(format!("{}: {e}", prop_path.display())))?;
    let (prop, eps) = Propensity::from_json(&text)?;
    let f = fs::File::open(&data_path).map_err(|e| input(format!("{}: {e}", data_path.display())))?;
    let d = if coarsen == Coarsen::Quartile {
        let mut rdr = csv::ReaderBuilder::new().from_path(&data_path).map_err(|e| input(e.to_string()))?;
        let headers: Vec<String> =
            rdr.headers().map_err(|e| input(e.to_string()))?.iter().map(|h| h.trim().to_string()).collect();
        let schema = CsvSchema { x_coarse: None, ..CsvSchema::infer(&headers) };
        data::load_dataset(f, Some(&schema), prop, eps)?
    } else {
        data::read_dataset(f, prop, eps)?
    };
    let echo = json!({
        "data": data_path.display().to_string(),
        "propensity": prop_path.display().to_string(),
        "epsilon": eps,
        "coarsen": format!("{coarsen:?}").to_lowercase(),
    });
    Ok((d, echo))
}

fn load_predictions(path: &Path) -> Outcome<PredictionSet> {
    let f = fs::File::open(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    Ok(PredictionSet::read_jsonl(f)?)
}

fn write_output(out: Option<&Path>, text: &str) -> Outcome<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| input(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn merge(a: Value, b: Value) -> Value {
    match (a, b) {
        (Value::Object(mut x), Value::Object(y)) => {
            x.extend(y);
            Value::Object(x)
        }
        (a, _) => a,
    }
}

fn estimand_label(e: &Estimand) -> String {
    match e {
        Estimand::Mean { arm } => format!("E[Y({arm})]"),
        Estimand::Ate { arm, control } => format!("ATE({arm},{control})"),
        Estimand::Cate { arm, control, x } => {
            let pts: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
            format!("CATE({arm},{control})@{}", pts.join(","))
        }
    }
}

fn table(reports: &[EstimateReport]) -> String {
    let mut s = format!(
        "{:<10} {:<24} {:>12} {:>10} {:>12} {:>12}\n",
        "method", "estimand", "estimate", "se", "ci_low", "ci_high"
    );
    for r in reports {
        s += &format!(
            "{:<10} {:<24} {:>12.6} {:>10.6} {:>12.6} {:>12.6}\n",
            r.estimator,
            estimand_label(&r.estimand),
            r.point,
            r.se,
            r.ci[0],
            r.ci[1]
        );
    }
    s
}

fn analyze(a: AnalyzeArgs, file: &FileConfig, exec: Execution) -> Outcome<()> {
    let seed = resolve_seed(a.shared.seed, file)?;
    let (d, data_echo) = load(&a.data, file)?;
    let pred_path = required(a.data.predictions.clone(), &file.predictions, "predictions")?;
    let mut set = load_predictions(&pred_path)?;
    let weight = parse_weight(&a.weight.clone().or_else(|| file.weight.clone()).unwrap_or_else(|| "smooth".into()))?;
    let regressor = RegressorConfig::parse(&a.regressor.clone().or_else(|| file.regressor.clone()).unwrap_or_else(|| "knn".into()))?;
    let cfg = EstimatorConfig {
        folds: a.folds.or(file.folds).unwrap_or(2),
        seed,
        alpha: a.shared.alpha.or(file.alpha).unwrap_or(0.05),
        weight,
        regressor,
        exec,
    };
    let contrast = a.contrast.clone().or_else(|| file.contrast.clone()).map(|s| parse_contrast(&s)).transpose()?;
    let cate_at: Vec<String> = if a.cate_at.is_empty() { file.cate_at.clone().unwrap_or_default() } else { a.cate_at.clone() };
    let points: Vec<Vec<f64>> = cate_at.iter().map(|s| parse_point(s)).collect::<Outcome<_>>()?;
    let arm = a.arm.or(file.arm);
    let fewshot = match (a.fewshot_m.or(file.fewshot_m), a.fewshot_b.or(file.fewshot_b)) {
        (Some(m), Some(b)) => Some(FewShotSettings { m, b }),
        (None, None) => None,
        _ => return Err(input("few-shot estimation needs both --fewshot-m and --fewshot-B")),
    };
    if let Some(fs) = fewshot {
        set.retain_draws(fs.b)?;
    }

    let reports: Vec<EstimateReport> = match (contrast, points.is_empty(), fewshot) {
        (Some(arms), true, None) => {
            let (c0, c1) = (set.zero_shot_column(&d, arms[0])?, set.zero_shot_column(&d, arms[1])?);
            vec![estimators::estimate_ate(&d, [&c0, &c1], arms, &cfg)?]
        }
        (Some(arms), true, Some(fs)) => vec![estimators::estimate_ate_fewshot(&d, &set, arms, fs, &cfg)?],
        (Some(arms), false, None) => {
            let (c0, c1) = (set.zero_shot_column(&d, arms[0])?, set.zero_shot_column(&d, arms[1])?);
            estimators::estimate_cate(&d, [&c0, &c1], arms, &points, &CateConfig::default(), &cfg)?
        }
        (Some(_), false, Some(_)) => return Err(input("conditional contrasts use zero-shot predictions only")),
        (None, false, _) => return Err(input("--cate-at needs --contrast")),
        (None, true, fs) => {
            let arm = arm.ok_or_else(|| input("missing --arm or --contrast"))?;
            match fs {
                None => vec![estimators::estimate_mean(&d, &set.zero_shot_column(&d, arm)?, arm, &cfg)?],
                Some(fs) => vec![estimators::estimate_mean_fewshot(&d, &set, arm, fs, &cfg)?],
            }
        }
    };

    let config = merge(
        data_echo,
        json!({
            "command": "analyze",
            "predictions": pred_path.display().to_string(),
            "arm": arm,
            "contrast": contrast,
            "cate_at": points,
            "weight": cfg.weight.name(),
            "regressor": cfg.regressor,
            "folds": cfg.folds,
            "alpha": cfg.alpha,
            "fewshot": fewshot,
            "seed": seed,
        }),
    );
    let body = json!({ "config": config, "reports": reports });
    let text = serde_json::to_string_pretty(&body).expect("report serializes") + "\n";
    let out = a.shared.out.clone().or_else(|| file.out.clone());
    match &out {
        Some(p) => {
            write_output(Some(p), &text)?;
            print!("{}", table(&reports));
        }
        None => print!("{}{text}", table(&reports)),
    }
    Ok(())
}

fn simulate(a: SimulateArgs, file: &FileConfig, exec: Execution) -> Outcome<()> {
    let seed = resolve_seed(a.shared.seed, file)?;
    let preset = a.dgp.clone().or_else(|| file.dgp.clone()).unwrap_or_else(|| "default".into());
    let mut dgp_cfg = DgpConfig::preset(&preset)?;
    if let Some(n) = a.n.or(file.n) {
        dgp_cfg.n = n;
    }
    if let Some(r) = a.rho.or(file.rho) {
        dgp_cfg.predictor.rho = vec![r; dgp_cfg.arm_count()];
    }
    if let Some(b) = a.bias.or(file.bias) {
        dgp_cfg.predictor.bias = b;
    }
    let reps = a.reps.or(file.reps).unwrap_or(100);
    let names = a.estimators.clone().or_else(|| file.estimators.clone()).unwrap_or_else(|| "aipw,calm-zero".into());
    let contrast = a.contrast.clone().or_else(|| file.contrast.clone()).map(|s| parse_contrast(&s)).transpose()?;
    let estimand = match contrast {
        Some([arm, control]) => Estimand::Ate { arm, control },
        None => Estimand::Mean { arm: a.arm.or(file.arm).unwrap_or(1) },
    };
    let base = EstimatorConfig {
        folds: a.folds.or(file.folds).unwrap_or(2),
        seed,
        alpha: a.shared.alpha.or(file.alpha).unwrap_or(0.05),
        regressor: RegressorConfig::parse(&a.regressor.clone().or_else(|| file.regressor.clone()).unwrap_or_else(|| "knn".into()))?,
        ..EstimatorConfig::default()
    };
    let (m, b) = (a.fewshot_m.or(file.fewshot_m), a.fewshot_b.or(file.fewshot_b));
    let specs: Vec<EstimatorSpec> = names
        .split(',')
        .map(|s| {
            let mut spec = EstimatorSpec::parse(s.trim(), estimand.clone(), &base)?;
            if let sim::Method::CalmFewShot { m: sm, b: sb } = &mut spec.method {
                *sm = m.unwrap_or(*sm);
                *sb = b.unwrap_or(*sb);
            }
            Ok(spec)
        })
        .collect::<calm_core::Result<_>>()?;
    let dgp = sim::Dgp::new(dgp_cfg.clone())?;
    let metrics = sim::run_monte_carlo_many(&dgp, &specs, reps, seed, exec)?;
    let config = json!({
        "command": "simulate",
        "dgp": preset,
        "dgp_config": dgp_cfg,
        "replications": reps,
        "estimand": estimand,
        "estimators": specs,
        "seed": seed,
    });
    let mut csv_bytes = Vec::new();
    sim::write_metrics_csv(&metrics, &config, &mut csv_bytes)?;
    let csv_text = String::from_utf8(csv_bytes).expect("metrics are UTF-8");
    let out = a.shared.out.clone().or_else(|| file.out.clone());
    match out {
        Some(prefix) => {
            let json_text = serde_json::to_string_pretty(&json!({ "config": config, "metrics": metrics }))
                .expect("metrics serialize")
                + "\n";
            write_output(Some(&with_ext(&prefix, "csv")), &csv_text)?;
            write_output(Some(&with_ext(&prefix, "json")), &json_text)?;
            for m in &metrics {
                println!(
                    "{:<12} bias {:>10.6}  sd {:>9.6}  coverage {:.3}  ({} reps, {} failed)",
                    m.estimator, m.bias, m.sd, m.coverage, m.replications, m.failures
                );
            }
        }
        None => print!("{csv_text}"),
    }
    Ok(())
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn test_efficiency(a: TestArgs, file: &FileConfig, exec: Execution) -> Outcome<()> {
    let seed = resolve_seed(a.shared.seed, file)?;
    let (d, data_echo) = load(&a.data, file)?;
    let pred_path = required(a.data.predictions.clone(), &file.predictions, "predictions")?;
    let set = load_predictions(&pred_path)?;
    let arm = required(a.arm, &file.arm, "arm")?;
    let ydag = set.zero_shot_column(&d, arm)?;
    let engine = match a.engine.or(file.engine).unwrap_or(EngineArg::Gaussian) {
        EngineArg::Gaussian => Engine::Gaussian,
        EngineArg::Multiplier => Engine::Multiplier,
    };
    let cfg = EffTestConfig {
        coordinate: a.coordinate.or(file.coordinate).unwrap_or(0),
        grid_size: a.grid_size.or(file.grid_size).unwrap_or(20),
        bandwidth: a.bandwidth.or(file.bandwidth),
        alpha: a.shared.alpha.or(file.alpha).unwrap_or(0.05),
        n_sim: a.n_sim.or(file.n_sim).unwrap_or(5000),
        seed: rng::derive(seed, &[tag::SUP_SIM]),
        engine,
        exec,
        ..EffTestConfig::default()
    };
    let report = efftest::test_efficiency(&d, &ydag, arm, &cfg)?;
    let config = merge(
        data_echo,
        json!({ "command": "test-efficiency", "predictions": pred_path.display().to_string(), "arm": arm, "test": cfg, "seed": seed }),
    );
    let summary = format!(
        "t_stat {:.6}\ncritical_value {:.6}\np_value {:.6}\ndecision {}\n",
        report.t_stat,
        report.critical_value,
        report.p_value,
        if report.reject { "reject" } else { "do not reject" }
    );
    let text = serde_json::to_string_pretty(&json!({ "config": config, "report": report })).expect("report serializes") + "\n";
    let out = a.shared.out.clone().or_else(|| file.out.clone());
    if out.is_some() {
        write_output(out.as_deref(), &text)?;
    }
    print!("{summary}");
    Ok(())
}

fn aggregate(a: AggregateArgs, file: &FileConfig, exec: Execution) -> Outcome<()> {
    let seed = resolve_seed(a.shared.seed, file)?;
    let (d, _) = load(&a.data, file)?;
    let m = a.fewshot_m.or(file.fewshot_m).unwrap_or(10);
    let b = a.fewshot_b.or(file.fewshot_b).unwrap_or(200);
    let arms = match a.arms.clone().or_else(|| file.arms.clone()) {
        Some(s) => parse_arms(&s)?,
        None => (1..=d.arm_count()).collect(),
    };
    let predictor: Arc<dyn Predictor> = match (a.remote.clone().or_else(|| file.remote.clone()), &a.data.predictions) {
        (Some(url), _) => {
            let timeout = Duration::from_secs_f64(a.timeout.or(file.timeout).unwrap_or(30.0));
            let mut r = RemotePredictor::new(url, timeout, a.retries.or(file.retries).unwrap_or(3));
            if let Some(c) = a.cache.clone().or_else(|| file.cache.clone()) {
                r = r.with_cache_file(c)?;
            }
            Arc::new(r)
        }
        (None, Some(p)) => Arc::new(FilePredictor::new(load_predictions(p)?)),
        (None, None) => match &file.predictions {
            Some(p) => Arc::new(FilePredictor::new(load_predictions(p)?)),
            None => return Err(input("need --remote or --predictions as the prediction source")),
        },
    };
    let folds = estimators::fewshot_folds(&d, seed)?;
    let fs = FewShotConfig { m, b, seed: rng::derive(seed, &[tag::FEWSHOT]) };
    let mut set = if a.zero_shot {
        PredictionSet::from_predictor(&d, predictor.as_ref(), &arms, exec)?
    } else {
        PredictionSet::new()
    };
    predictor::fill_few_shot(&mut set, &d, predictor.as_ref(), &arms, &folds, &fs, exec)?;
    let mut buf = Vec::new();
    set.write_jsonl(&mut buf)?;
    let out = a.shared.out.clone().or_else(|| file.out.clone());
    match out {
        Some(p) => {
            fs::write(&p, &buf).map_err(|e| input(format!("{}: {e}", p.display())))?;
            eprintln!("wrote {b} few-shot draws per subject, arm and donor fold (m = {m}, seed = {seed})");
        }
        None => std::io::stdout().write_all(&buf).map_err(|e| input(e.to_string()))?,
    }
    Ok(())
}
