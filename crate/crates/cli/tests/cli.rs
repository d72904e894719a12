use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use calm_core::data;
use calm_core::par::Execution;
use calm_core::predictor::PredictionSet;
use calm_core::sim::{Dgp, DgpConfig};
use serde_json::Value;

fn calm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calm"))
        .current_dir(dir)
        .env_remove("CALM_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn inputs(dir: &Path, n: usize) {
    let mut cfg = DgpConfig::preset("stratified").unwrap();
    cfg.n = n;
    let g = Dgp::with_truth_draws(cfg, 1000).unwrap();
    let trial = g.generate(42, Execution::Sequential).unwrap();
    data::write_csv(&trial.dataset, std::fs::File::create(dir.join("trial.csv")).unwrap()).unwrap();
    trial.predictions.write_jsonl(std::fs::File::create(dir.join("pred.jsonl")).unwrap()).unwrap();
    std::fs::write(dir.join("prop.json"), r#"{"1": 0.5, "2": 0.5}"#).unwrap();
}

const DATA: [&str; 6] = ["--data", "trial.csv", "--propensity", "prop.json", "--predictions", "pred.jsonl"];

fn report(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

#[test]
fn analyze_writes_report_with_bracketing_interval() {
    let dir = tempfile::tempdir().unwrap();
    inputs(dir.path(), 200);
    let out = calm(dir.path(), &[&["analyze", "--arm", "1", "--seed", "5", "--out", "r.json"][..], &DATA].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path(), "r.json");
    let rep = &r["reports"][0];
    let (lo, pt, hi) = (rep["ci"][0].as_f64().unwrap(), rep["point"].as_f64().unwrap(), rep["ci"][1].as_f64().unwrap());
    assert!(lo < pt && pt < hi);
    assert_eq!(r["config"]["seed"], 5);
    assert!(String::from_utf8_lossy(&out.stdout).contains("estimate"));
}

#[test]
fn robust_weight_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    inputs(dir.path(), 200);
    let args = [&["analyze", "--arm", "2", "--weight", "robust", "--coarsen", "quartile", "--out", "r.json"][..], &DATA].concat();
    let out = calm(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path(), "r.json");
    assert_eq!(r["config"]["weight"], "robust");
    assert_eq!(r["reports"][0]["weight"], "robust");
    assert_eq!(r["config"]["coarsen"], "quartile");
}

#[test]
fn missing_prediction_exits_2_naming_the_subject() {
    let dir = tempfile::tempdir().unwrap();
    inputs(dir.path(), 100);
    let text = std::fs::read_to_string(dir.path().join("pred.jsonl")).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.contains("\"s00007\"")).collect();
    std::fs::write(dir.path().join("pred.jsonl"), kept.join("\n")).unwrap();
    let out = calm(dir.path(), &[&["analyze", "--arm", "1"][..], &DATA].concat());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("s00007"));
}

#[test]
fn malformed_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    inputs(dir.path(), 100);
    std::fs::write(dir.path().join("bad.json"), r#"{"1": 0.995, "2": 0.005}"#).unwrap();
    let args = ["analyze", "--arm", "1", "--data", "trial.csv", "--propensity", "bad.json", "--predictions", "pred.jsonl"];
    assert_eq!(calm(dir.path(), &args).status.code(), Some(2));
    assert_eq!(calm(dir.path(), &[&["analyze", "--arm", "9"][..], &DATA].concat()).status.code(), Some(2));
    assert_eq!(calm(dir.path(), &["analyze", "--arm", "1"]).status.code(), Some(2));
}

#[test]
fn estimation_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    inputs(dir.path(), 200);
    let args = [&["analyze", "--contrast", "1,2", "--cate-at", "40,0"][..], &DATA].concat();
    let out = calm(dir.path(), &args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn cate_reports_each_query_point() {
    let dir = tempfile::tempdir().unwrap();
    inputs(dir.path(), 400);
    let args = [&["analyze", "--contrast", "1,2", "--cate-at", "0,0", "--cate-at", "0.5,-0.5", "--out", "c.json"][..], &DATA].concat();
    let out = calm(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(report(dir.path(), "c.json")["reports"].as_array().unwrap().len(), 2);
}

#[test]
fn simulate_writes_one_row_per_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let out = calm(dir.path(), &["simulate", "--dgp", "default", "--R", "3", "--n", "200", "--estimators", "aipw,calm-zero", "--seed", "1", "--out", "m"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config: "));
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("aipw,") && lines[3].starts_with("calm-zero,"));
    let json = report(dir.path(), "m.json");
    assert_eq!(json["metrics"].as_array().unwrap().len(), 2);
}

#[test]
fn seed_falls_back_to_env_then_default() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["simulate", "--R", "2", "--n", "150", "--out", "m"];
    let out = Command::new(env!("CARGO_BIN_EXE_calm")).current_dir(dir.path()).env("CALM_SEED", "77").args(base).output().unwrap();
    assert!(out.status.success());
    assert!(std::fs::read_to_string(dir.path().join("m.csv")).unwrap().contains("\"seed\":77"));
    let out = calm(dir.path(), &base);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed: 20240917 (default)"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    inputs(dir.path(), 200);
    std::fs::write(
        dir.path().join("run.toml"),
        "data = \"trial.csv\"\npropensity = \"prop.json\"\npredictions = \"pred.jsonl\"\narm = 1\nweight = \"zero\"\nseed = 9\n",
    )
    .unwrap();
    let out = calm(dir.path(), &["--config", "run.toml", "analyze", "--seed", "10", "--out", "r.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path(), "r.json");
    assert_eq!(r["config"]["seed"], 10);
    assert_eq!(r["config"]["weight"], "zero");
    assert_eq!(r["reports"][0]["estimator"], "aipw");
    std::fs::write(dir.path().join("bad.toml"), "sede = 1\n").unwrap();
    assert_eq!(calm(dir.path(), &["--config", "bad.toml", "analyze"]).status.code(), Some(2));
}

#[test]
fn efficiency_test_prints_decision() {
    let dir = tempfile::tempdir().unwrap();
    inputs(dir.path(), 600);
    let out = calm(dir.path(), &[&["test-efficiency", "--arm", "1", "--n-sim", "500", "--seed", "2"][..], &DATA].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = String::from_utf8_lossy(&out.stdout);
    for key in ["t_stat", "critical_value", "p_value", "decision"] {
        assert!(s.contains(key), "{s}");
    }
}

/// Minimal HTTP endpoint: answers `2 * x1 + number of demos`, failing the
/// first request with 503 to exercise retries. Request bodies are recorded.
fn serve(calls: Arc<AtomicUsize>, bodies: Arc<Mutex<HashSet<Vec<u8>>>>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let k = calls.fetch_add(1, Ordering::SeqCst);
            bodies.lock().unwrap().insert(body.clone());
            let resp = if k == 0 {
                "HTTP/1.1 503 Service Unavailable\r\ncontent-length: 0\r\nconnection: close\r\n\r\n".to_string()
            } else {
                let q: Value = serde_json::from_slice(&body).unwrap();
                let v = 2.0 * q["x"][0].as_f64().unwrap() + q["demos"].as_array().unwrap().len() as f64;
                let json = format!("{{\"value\": {v}}}");
                format!("HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{json}", json.len())
            };
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    format!("http://{addr}/predict")
}

#[test]
fn remote_aggregation_retries_and_replays_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    inputs(dir.path(), 60);
    let calls = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(HashSet::new()));
    let url = serve(calls.clone(), bodies.clone());
    let args = [
        "aggregate-predictions", "--data", "trial.csv", "--propensity", "prop.json", "--remote", &url, "--cache", "cache.jsonl",
        "--fewshot-m", "3", "--fewshot-B", "2", "--arms", "1", "--zero-shot", "--seed", "4", "--out",
    ];
    let out = calm(dir.path(), &[&args[..], &["fs.jsonl"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first_calls = calls.load(Ordering::SeqCst);
    // Independent draws may repeat a demonstration set; repeats are answered
    // from the cache, so each distinct request goes out once plus one retry.
    let distinct = bodies.lock().unwrap().len();
    assert_eq!(first_calls, distinct + 1);
    assert!(distinct > 60 + 120 && distinct <= 60 + 240, "{distinct}");
    let set = PredictionSet::read_jsonl(std::fs::File::open(dir.path().join("fs.jsonl")).unwrap()).unwrap();
    let d = data::read_dataset(
        std::fs::File::open(dir.path().join("trial.csv")).unwrap(),
        calm_core::data::Propensity::balanced(2),
        0.01,
    )
    .unwrap();
    let x0 = d.x_row(0)[0];
    assert!((set.zero_shot(d.id(0), 1).unwrap() - 2.0 * x0).abs() < 1e-12);
    let out = calm(dir.path(), &[&args[..], &["fs2.jsonl"]].concat());
    assert!(out.status.success());
    assert_eq!(calls.load(Ordering::SeqCst), first_calls, "second run should be served from the cache");
    assert_eq!(std::fs::read(dir.path().join("fs.jsonl")).unwrap(), std::fs::read(dir.path().join("fs2.jsonl")).unwrap());
    let fs_args = [&["analyze", "--arm", "1", "--fewshot-m", "3", "--fewshot-B", "2", "--seed", "4", "--predictions", "fs.jsonl"][..], &DATA[..4]].concat();
    let out = calm(dir.path(), &fs_args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unreachable_service_is_an_estimation_failure() {
    let dir = tempfile::tempdir().unwrap();
    inputs(dir.path(), 30);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}/");
    let out = calm(
        dir.path(),
        &["aggregate-predictions", "--data", "trial.csv", "--propensity", "prop.json", "--remote", &url, "--retries", "0", "--timeout", "2", "--fewshot-m", "2", "--fewshot-B", "1"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
