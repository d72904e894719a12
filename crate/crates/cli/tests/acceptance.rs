//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Pass substrings such as `AC4` on the command line to run a subset.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use calm_core::calibration::WeightKind;
use calm_core::data::{self, Columns, Propensity, RctDataset};
use calm_core::efftest::{self, EffTestConfig};
use calm_core::estimators::{self, CateConfig, Estimand, EstimatorConfig};
use calm_core::nuisance::{self, RegressorConfig};
use calm_core::par::{self, Execution};
use calm_core::predictor::FewShotConfig;
use calm_core::rng;
use calm_core::sim::{self, Dgp, DgpConfig, EstimatorSpec};
use calm_core::stats;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn dgp(preset: &str, n: usize) -> Dgp {
    let mut cfg = DgpConfig::preset(preset).unwrap();
    cfg.n = n;
    Dgp::new(cfg).unwrap()
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0usize;
    let mut checked = 0;
    for (k, preset) in ["default", "nonlinear", "stratified"].iter().enumerate() {
        let g = dgp(preset, 300);
        for rep in 0..3u64 {
            let trial = g.generate(rng::derive(11, &[k as u64, rep]), Execution::Parallel).unwrap();
            let d = &trial.dataset;
            for arm in 1..=2 {
                let ydag = trial.predictions.zero_shot_column(d, arm).unwrap();
                let cfg = EstimatorConfig { seed: rep, weight: WeightKind::Zero, ..EstimatorConfig::default() };
                let calm = estimators::estimate_mean(d, &ydag, arm, &cfg).unwrap();
                let aipw = estimators::estimate_mean_aipw(d, arm, &cfg).unwrap();
                let diff = calm.influence.iter().zip(&aipw.influence).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
                worst = worst.max(diff + usize::from(calm.point.to_bits() != aipw.point.to_bits()));
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst == 0, format!("{checked} datasets, {worst} differing values, {secs:.2}s"))
}

/// Ten subjects with hand-chosen values; influence values are computed
/// here from the closed form, independently of the library.
fn ac2() -> Outcome {
    let x = [-1.2, -0.7, -0.3, 0.0, 0.2, 0.5, 0.8, 1.1, 1.5, 2.0];
    let arms = [1, 2, 1, 1, 2, 2, 1, 2, 1, 2];
    let y = [0.3, -1.1, 1.4, 0.9, 0.2, 1.7, 2.2, 0.4, 3.1, 1.9];
    let ydag = [0.1, -0.4, 1.0, 1.3, 0.0, 1.2, 1.9, 0.8, 2.5, 2.4];
    let e1 = 0.4;
    let cols = Columns {
        ids: (0..10).map(|i| format!("u{i}")).collect(),
        y: y.to_vec(),
        arms: arms.to_vec(),
        x: x.to_vec(),
        p: 1,
        x_coarse: None,
        z: vec![String::new(); 10],
    };
    let d = RctDataset::new(cols, Propensity::constant(&[e1, 1.0 - e1]), 0.01).unwrap();
    let mu = |x: f64| 0.5 + 1.1 * x;
    let mud = |x: f64| 0.3 + 0.9 * x - 0.1 * x * x;
    let om = |x: f64| 0.6 / (1.0 + x * x);
    let hand: Vec<f64> = (0..10)
        .map(|i| {
            let a = if arms[i] == 1 { 1.0 } else { 0.0 };
            a * y[i] / e1 + (1.0 - a / e1) * (mu(x[i]) + om(x[i]) * (ydag[i] - mud(x[i])))
        })
        .collect();
    let want = hand.iter().sum::<f64>() / 10.0;
    let r = estimators::estimate_mean_oracle(
        &d,
        &ydag,
        1,
        &nuisance::from_fn(move |x: &[f64]| mu(x[0])),
        &nuisance::from_fn(move |x: &[f64]| mud(x[0])),
        &nuisance::from_fn(move |x: &[f64]| om(x[0])),
        0.05,
    )
    .unwrap();
    let err = (r.point - want).abs();
    let phi_err = r.influence.iter().zip(&hand).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(err < 1e-10 && phi_err < 1e-10, format!("estimate {:.12}, oracle {want:.12}, |diff| {err:.1e}", r.point))
}

fn ac3() -> Outcome {
    let start = Instant::now();
    let mut cfg = DgpConfig::preset("default").unwrap();
    cfg.n = 2000;
    cfg.predictor.bias = 5.0;
    cfg.predictor.rho = vec![0.8, 0.8];
    let g = Dgp::new(cfg).unwrap();
    let spec = EstimatorSpec::parse("calm-zero", Estimand::Mean { arm: 1 }, &EstimatorConfig::default()).unwrap();
    let m = sim::run_monte_carlo(&g, &spec, 300, 303).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        m.abs_bias < 3.0 * m.bias_mc_se && secs < 600.0,
        format!("bias {:.5}, 3*MC-SE {:.5}, {} reps in {secs:.0}s", m.bias, 3.0 * m.bias_mc_se, m.replications),
    )
}

fn ac4() -> Outcome {
    let g = dgp("constant-mean", 2000);
    let est = Estimand::Mean { arm: 1 };
    let theory = sim::theoretical_variance(&g.config, &est, 200_000, 4).unwrap();
    let base = EstimatorConfig::default();
    let specs = [
        EstimatorSpec::parse("aipw", est.clone(), &base).unwrap(),
        EstimatorSpec::parse("calm-zero", est, &base).unwrap(),
    ];
    let m = sim::run_monte_carlo_many(&g, &specs, 300, 404, Execution::Parallel).unwrap();
    let ratio = (m[1].sd / m[0].sd).powi(2);
    let closed = 1.0 - 0.5 * 0.8f64.powi(2);
    outcome(
        (ratio - theory.ratio()).abs() <= 0.1 && (theory.ratio() - closed).abs() < 0.01,
        format!("MC ratio {ratio:.3}, theory {:.3}, closed form {closed:.3}", theory.ratio()),
    )
}

fn ac5() -> Outcome {
    let base = EstimatorConfig::default();
    let mut rows = Vec::new();
    let mut pass = true;
    for n in [400, 2000] {
        let g = dgp("default", n);
        let mut specs = Vec::new();
        for est in [Estimand::Mean { arm: 1 }, Estimand::Ate { arm: 1, control: 2 }] {
            for name in ["aipw", "calm-zero", "calm-fs"] {
                specs.push(EstimatorSpec::parse(name, est.clone(), &base).unwrap());
            }
        }
        let m = sim::run_monte_carlo_many(&g, &specs, 300, 505 + n as u64, Execution::Parallel).unwrap();
        for x in m {
            let ok = (0.92..=0.98).contains(&x.coverage);
            pass &= ok;
            let what = match x.estimand {
                Estimand::Mean { .. } => "mean",
                _ => "ate",
            };
            rows.push(format!("{}/{what}/n={n}: {:.3}{}", x.estimator, x.coverage, if ok { "" } else { " (out)" }));
        }
    }
    outcome(pass, rows.join("; "))
}

fn ac6() -> Outcome {
    let g = dgp("default", 2000);
    let trial = g.generate(606, Execution::Parallel).unwrap();
    let d = &trial.dataset;
    let cfg = EstimatorConfig { seed: 6, ..EstimatorConfig::default() };
    let spread = |b: usize| {
        let pts: Vec<f64> = (0..20u64)
            .map(|s| {
                let fs = FewShotConfig { m: 10, b, seed: rng::derive(66, &[s]) };
                estimators::estimate_mean_fewshot_live(d, &trial.predictor, 1, &fs, &cfg).unwrap().point
            })
            .collect();
        stats::sd(&pts)
    };
    let (s2, s200) = (spread(2), spread(200));
    outcome(s2 >= 3.0 * s200, format!("sd over seeds: B=2 {s2:.5}, B=200 {s200:.5}, ratio {:.1}", s2 / s200))
}

fn rejection_rate(preset: &str, reps: usize, seed: u64) -> f64 {
    let g = dgp(preset, 2000);
    let rejects: Vec<bool> = par::map_range(Execution::Parallel, reps, |r| {
        let trial = g.generate(rng::derive(seed, &[r as u64]), Execution::Sequential).unwrap();
        let d = &trial.dataset;
        let ydag = trial.predictions.zero_shot_column(d, 1).unwrap();
        let cfg = EffTestConfig {
            n_sim: 2000,
            seed: rng::derive(seed, &[r as u64, 1]),
            exec: Execution::Sequential,
            ..EffTestConfig::default()
        };
        efftest::test_efficiency(d, &ydag, 1, &cfg).unwrap().reject
    });
    rejects.iter().filter(|&&r| r).count() as f64 / reps as f64
}

fn ac7() -> Outcome {
    let size = rejection_rate("efficiency-null", 200, 707);
    let power = rejection_rate("efficiency-alt", 200, 708);
    outcome(size <= 0.10 && power >= 0.80, format!("size {size:.3} (<= 0.10), power {power:.3} (>= 0.80)"))
}

fn ac8() -> Outcome {
    let g = dgp("cate", 5000);
    let xs: Vec<Vec<f64>> = vec![vec![-1.0], vec![0.0], vec![1.0]];
    let cate = CateConfig::default();
    let results: Vec<Vec<(f64, f64, bool)>> = par::map_range(Execution::Parallel, 200, |r| {
        let trial = g.generate(rng::derive(808, &[r as u64]), Execution::Sequential).unwrap();
        let d = &trial.dataset;
        let (c1, c2) = (
            trial.predictions.zero_shot_column(d, 1).unwrap(),
            trial.predictions.zero_shot_column(d, 2).unwrap(),
        );
        let cfg = EstimatorConfig { seed: r as u64, exec: Execution::Sequential, ..EstimatorConfig::default() };
        estimators::estimate_cate(d, [&c1, &c2], [1, 2], &xs, &cate, &cfg)
            .unwrap()
            .into_iter()
            .zip(&xs)
            .map(|(rep, x)| {
                let truth = g.model.cate(x, 1, 2);
                ((rep.point - truth) / rep.se, rep.point, rep.covers(truth))
            })
            .collect()
    });
    let first = &results[0];
    let within = first.iter().all(|(z, _, _)| z.abs() <= 3.0);
    let cov0 = results.iter().filter(|r| r[1].2).count() as f64 / results.len() as f64;
    let pts: Vec<String> = first.iter().zip(&xs).map(|((z, p, _), x)| format!("x={}: {p:.3} ({z:+.2} SE)", x[0])).collect();
    outcome(within && (0.90..=0.99).contains(&cov0), format!("{}; coverage at 0: {cov0:.3}", pts.join(", ")))
}

fn ac9() -> Outcome {
    let g = dgp("nonlinear", 2000);
    let est = Estimand::Mean { arm: 1 };
    let base = EstimatorConfig { regressor: RegressorConfig::Linear, ..EstimatorConfig::default() };
    let specs = [
        EstimatorSpec::parse("aipw", est.clone(), &base).unwrap(),
        EstimatorSpec::parse("calm-robust", est, &base).unwrap(),
    ];
    let m = sim::run_monte_carlo_many(&g, &specs, 300, 909, Execution::Parallel).unwrap();
    let ratio = (m[1].sd / m[0].sd).powi(2);
    outcome(ratio <= 1.02, format!("variance ratio robust/AIPW {ratio:.3} with linear outcome model"))
}

fn write_inputs(dir: &Path) {
    let g = dgp("stratified", 300);
    let trial = g.generate(1010, Execution::Parallel).unwrap();
    let d = &trial.dataset;
    data::write_csv(d, std::fs::File::create(dir.join("trial.csv")).unwrap()).unwrap();
    trial.predictions.write_jsonl(std::fs::File::create(dir.join("pred.jsonl")).unwrap()).unwrap();
    std::fs::write(dir.join("prop.json"), d.propensity().to_json().to_string()).unwrap();
}

fn run_cli(dir: &Path, threads: usize, tag: &str, args: &[&str]) -> Vec<u8> {
    let out = dir.join(format!("{tag}-{threads}"));
    let status = Command::new(env!("CARGO_BIN_EXE_calm"))
        .current_dir(dir)
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{tag}: {}", String::from_utf8_lossy(&status.stderr));
    let mut bytes = Vec::new();
    for ext in ["", ".csv", ".json"] {
        let mut p = out.as_os_str().to_owned();
        p.push(ext);
        if let Ok(b) = std::fs::read(&p) {
            bytes.extend(b);
        }
    }
    bytes
}

fn ac10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let data = ["--data", "trial.csv", "--propensity", "prop.json"];
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("analyze", [&["analyze", "--predictions", "pred.jsonl", "--arm", "1", "--seed", "3"][..], &data].concat()),
        (
            "analyze-ate",
            [&["analyze", "--predictions", "pred.jsonl", "--contrast", "1,2", "--weight", "robust", "--seed", "3"][..], &data]
                .concat(),
        ),
        (
            "test",
            [&["test-efficiency", "--predictions", "pred.jsonl", "--arm", "1", "--n-sim", "500", "--seed", "3"][..], &data]
                .concat(),
        ),
        (
            "aggregate",
            [&["aggregate-predictions", "--predictions", "pred.jsonl", "--fewshot-m", "4", "--fewshot-B", "3", "--seed", "3"][..], &data]
                .concat(),
        ),
        (
            "simulate",
            vec!["simulate", "--dgp", "default", "--R", "6", "--n", "300", "--estimators", "aipw,calm-zero,calm-fs", "--fewshot-B", "10", "--seed", "3"],
        ),
    ];
    let mut bad = Vec::new();
    for (tag, args) in &runs {
        let reference = run_cli(dir.path(), 1, tag, args);
        for threads in [1, 2, 4] {
            let again = run_cli(dir.path(), threads, &format!("{tag}-again"), args);
            if again != reference || reference.is_empty() {
                bad.push(format!("{tag} at {threads} threads"));
            }
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { format!("{} commands x 3 thread counts identical", runs.len()) } else { bad.join(", ") })
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("AC1", "AIPW reduction identity", ac1),
        ("AC2", "oracle equivalence", ac2),
        ("AC3", "bias robustness", ac3),
        ("AC4", "efficiency gain magnitude", ac4),
        ("AC5", "coverage", ac5),
        ("AC6", "few-shot stability", ac6),
        ("AC7", "efficiency test size and power", ac7),
        ("AC8", "CATE recovery", ac8),
        ("AC9", "robust weight under misspecification", ac9),
        ("AC10", "CLI determinism", ac10),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| id == p || name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {id} {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
