//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero
//! exit if any fails. Thresholds are the constants below.

#[path = "../../core/tests/checks/mod.rs"]
mod checks;

use std::io::{BufRead, BufReader};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tandem_core::agents::{AgentConfig, CANONICAL_INSTRUCTIONS};
use tandem_core::harness;
use tandem_core::session::{DatasetRole, JournalEvent, LogicalClock, Session, SessionOptions};
use tandem_core::synth;

const MAX_RUN_SECONDS: f64 = 60.0;
const TEST_ROWS: usize = 100;
const MIN_BINARY_AUC: f64 = 0.85;
const MAX_RMSE_OVER_SIGMA: f64 = 1.5;
const MIN_GOLDEN_CASES: usize = 50;
const ROUND_TRIP_CASES: u64 = 1000;
const TRANSACTION_CASES: u64 = 500;
const MIN_RANK_PERCENTILE: f64 = 0.75;
const RECOVERY_SEED: u64 = 7;
const HTTP_TIMEOUT: Duration = Duration::from_secs(60);

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

fn scripted(dataset: &str) -> String {
    format!("scripted:{}", assets().join(dataset).join("fixture.jsonl").display())
}

/// The binary with proxies pointed at a closed port, so any stray HTTP
/// request fails instead of reaching the network.
fn tandem() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tandem"));
    for var in ["http_proxy", "https_proxy", "HTTP_PROXY", "HTTPS_PROXY", "ALL_PROXY"] {
        cmd.env(var, "http://127.0.0.1:9");
    }
    cmd.env_remove("NO_PROXY").env_remove("no_proxy");
    cmd
}

struct RunResult {
    seconds: f64,
    journal: Vec<u8>,
    submission: String,
    dir: PathBuf,
}

fn run_dataset(dataset: &str, out: &Path) -> Result<RunResult, String> {
    let a = assets().join(dataset);
    let start = Instant::now();
    let output = tandem()
        .arg("run")
        .arg("--train")
        .arg(a.join("train.csv"))
        .arg("--test")
        .arg(a.join("test.csv"))
        .args(["--target", "y", "--backend", &scripted(dataset), "--seed", "0", "--out"])
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    if !output.status.success() {
        return Err(format!("{dataset}: exit {:?}: {}", output.status.code(), String::from_utf8_lossy(&output.stderr).trim()));
    }
    let journal = std::fs::read(out.join("journal.jsonl")).map_err(|e| e.to_string())?;
    let submission = std::fs::read_to_string(out.join("artifacts/submission.csv")).map_err(|e| e.to_string())?;
    Ok(RunResult { seconds, journal, submission, dir: out.to_path_buf() })
}

fn criterion_1(runs: &Runs) -> Result<String, String> {
    let (a, b) = (runs.binary_a.as_ref()?, runs.binary_b.as_ref()?);
    for r in [a, b] {
        if r.seconds >= MAX_RUN_SECONDS {
            return Err(format!("run took {:.1}s", r.seconds));
        }
    }
    if a.journal != b.journal {
        return Err("journals differ between identical runs".into());
    }
    let summary = harness::verify_journal(&a.dir.join("journal.jsonl")).map_err(|e| e.to_string())?;
    if format!("{:?}", summary.stage) != "Tuned" || summary.finalized_model.is_none() || summary.instructions != 4 {
        return Err(format!("session did not complete: {summary:?}"));
    }
    let rows = a.submission.lines().count() - 1;
    if rows != TEST_ROWS {
        return Err(format!("submission has {rows} rows"));
    }
    Ok(format!(
        "exit 0 in {:.2}s and {:.2}s, {} journal bytes identical, 4 instructions, {rows} predictions",
        a.seconds,
        b.seconds,
        a.journal.len()
    ))
}

/// `id -> value` from a two-column CSV.
fn by_id(csv: &str) -> Result<Vec<(String, f64)>, String> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let (id, v) = l.split_once(',').ok_or_else(|| format!("bad line {l:?}"))?;
            Ok((id.to_string(), v.parse::<f64>().map_err(|e| format!("{l:?}: {e}"))?))
        })
        .collect()
}

fn paired(submission: &str, labels: &str) -> Result<(Vec<f64>, Vec<f64>), String> {
    let (pred, truth) = (by_id(submission)?, by_id(labels)?);
    if pred.len() != truth.len() || pred.iter().zip(&truth).any(|(p, t)| p.0 != t.0) {
        return Err("submission ids do not match the label ids".into());
    }
    Ok((pred.into_iter().map(|p| p.1).collect(), truth.into_iter().map(|t| t.1).collect()))
}

/// Pair counting with ties as one half.
fn pair_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                pairs += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    num / pairs
}

fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    (pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt()
}

fn criterion_2(runs: &Runs) -> Result<String, String> {
    let [binary, regression] = synth::bundled();
    let labels = |d: &str| std::fs::read_to_string(assets().join(d).join("test_labels.csv")).map_err(|e| e.to_string());

    let (scores, y) = paired(&runs.binary_a.as_ref()?.submission, &labels("binary")?)?;
    let auc = pair_auc(&scores, &y);
    let bayes_auc = pair_auc(&binary.test_signal, &y);

    let (pred, truth) = paired(&runs.regression.as_ref()?.submission, &labels("regression")?)?;
    let err = rmse(&pred, &truth);
    let bayes_rmse = rmse(&regression.test_signal, &truth);
    let limit = MAX_RMSE_OVER_SIGMA * synth::REGRESSION_NOISE_SIGMA;

    let detail = format!(
        "AUC {auc:.4} (floor {MIN_BINARY_AUC}, true-logit {bayes_auc:.4}); RMSE {err:.4} (ceiling {limit}, true-mean {bayes_rmse:.4})"
    );
    if auc >= MIN_BINARY_AUC && err <= limit {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3() -> Result<String, String> {
    checks::oracles::ridge_matches_normal_equations();
    checks::oracles::logistic_gradient_matches_finite_differences();
    checks::oracles::auc_matches_brute_force_on_grid();
    Ok("ridge 100 systems within 1e-8, logistic gradients 50 problems within rel 1e-4, AUC all grid inputs n <= 8".into())
}

fn criterion_4() -> Result<String, String> {
    checks::oracles::halving_rungs_and_resources();
    checks::oracles::halving_keeps_the_full_resource_top_two();
    Ok("rungs 8/4/2/1 at 1/8, 1/4, 1/2, 1; finalists are the brute-forced top 2 over 20 seeds".into())
}

fn criterion_5() -> Result<String, String> {
    let golden = checks::corpus::dsl_error_corpus() + checks::corpus::dsl_success_corpus() + checks::corpus::react_corpus();
    if golden < MIN_GOLDEN_CASES {
        return Err(format!("only {golden} golden cases"));
    }
    for seed in 0..ROUND_TRIP_CASES {
        checks::scripts::render_parse_round_trip(seed).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok(format!("{golden} golden cases, {ROUND_TRIP_CASES} random round trips"))
}

fn criterion_6() -> Result<String, String> {
    for seed in 0..TRANSACTION_CASES {
        checks::scripts::failing_statement_leaves_env_unchanged(seed).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok(format!("{TRANSACTION_CASES} scripts with an injected failure left the env unchanged"))
}

fn criterion_7() -> Result<String, String> {
    checks::repair::third_attempt_succeeds_with_exactly_three_calls();
    checks::repair::three_failures_exhaust_the_budget_and_keep_the_env();
    checks::repair::repair_prompt_carries_previous_diagnostics();
    Ok("success at attempt 3 with 3 calls; 3 failures give E_REPAIR_EXHAUSTED with the env unchanged".into())
}

struct Server {
    child: Child,
    addr: String,
    restored: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start_server(data_dir: &Path) -> Result<Server, String> {
    let mut child = tandem()
        .arg("serve")
        .arg("--data-dir")
        .arg(data_dir)
        .args(["--bind", "127.0.0.1:0", "--backend", &scripted("binary")])
        .env("NO_PROXY", "127.0.0.1")
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let stdout = child.stdout.take().ok_or("no stdout")?;
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut line = String::new();
        let _ = BufReader::new(stdout).read_line(&mut line);
        let _ = tx.send(line);
    });
    let mut server = Server { child, addr: String::new(), restored: String::new() };
    let line = rx.recv_timeout(HTTP_TIMEOUT).map_err(|_| "server did not report its address")?;
    let rest = line.trim().strip_prefix("listening on ").ok_or_else(|| format!("unexpected banner {line:?}"))?;
    let (addr, restored) = rest.split_once(' ').unwrap_or((rest, ""));
    server.addr = addr.to_string();
    server.restored = restored.to_string();
    Ok(server)
}

fn http() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).proxy(None).timeout_global(Some(HTTP_TIMEOUT)).build().into()
}

fn request(method: &str, url: &str, body: Option<&[u8]>) -> Result<(u16, Value), String> {
    let agent = http();
    let resp = match (method, body) {
        ("POST", Some(b)) => agent.post(url).send(b),
        ("POST", None) => agent.post(url).send_empty(),
        _ => agent.get(url).call(),
    };
    let mut resp = resp.map_err(|e| format!("{method} {url}: {e}"))?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
    Ok((status, serde_json::from_str(&text).unwrap_or(Value::String(text))))
}

/// Reads the event stream until an event with `seq >= until` arrives.
fn read_events(url: &str, last_event_id: Option<u64>, until: u64) -> Result<Vec<JournalEvent>, String> {
    read_until(url, last_event_id, move |e: &[JournalEvent]| e.last().is_some_and(|e| e.seq >= until))
}

/// Reads the event stream until `stop` holds for the events so far.
fn read_until(url: &str, last_event_id: Option<u64>, stop: impl Fn(&[JournalEvent]) -> bool) -> Result<Vec<JournalEvent>, String> {
    let (tx, rx) = mpsc::channel();
    let url = url.to_string();
    std::thread::spawn(move || {
        let mut req = http().get(&url);
        if let Some(id) = last_event_id {
            req = req.header("Last-Event-ID", id.to_string());
        }
        let resp = match req.call() {
            Ok(r) => r,
            Err(e) => return drop(tx.send(Err(e.to_string()))),
        };
        for line in BufReader::new(resp.into_body().into_reader()).lines() {
            let Ok(line) = line else { break };
            if let Some(data) = line.strip_prefix("data: ") {
                if tx.send(serde_json::from_str::<JournalEvent>(data).map_err(|e| e.to_string())).is_err() {
                    break;
                }
            }
        }
    });
    let mut out = Vec::new();
    loop {
        match rx.recv_timeout(HTTP_TIMEOUT) {
            Ok(Ok(e)) => {
                out.push(e);
                if stop(&out) {
                    return Ok(out);
                }
            }
            Ok(Err(e)) => return Err(e),
            Err(_) => return Err(format!("stream stalled after {} events", out.len())),
        }
    }
}

fn state_of(report: &Value) -> Value {
    json!({"stage": report["stage"], "env_version": report["env_version"], "tables": report["tables"]})
}

fn criterion_8() -> Result<String, String> {
    let data = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = synth::binary(synth::BINARY_SEED);
    let processing = &CANONICAL_INSTRUCTIONS[..2];

    let server = start_server(data.path())?;
    let base = format!("http://{}/v1/sessions", server.addr);
    let (status, created) = request("POST", &base, Some(json!({"seed": RECOVERY_SEED}).to_string().as_bytes()))?;
    let id = created["session_id"].as_str().ok_or_else(|| format!("create: {status} {created}"))?.to_string();
    let session = format!("{base}/{id}");
    for (role, csv) in [("train", &d.train_csv), ("test", &d.test_csv)] {
        let (status, body) = request("POST", &format!("{session}/dataset?role={role}"), Some(csv.as_bytes()))?;
        if status != 200 {
            return Err(format!("attach {role}: {status} {body}"));
        }
    }
    for text in processing {
        let (status, body) = request("POST", &format!("{session}/instructions"), Some(json!({"text": text}).to_string().as_bytes()))?;
        if status != 202 {
            return Err(format!("submit: {status} {body}"));
        }
    }
    // The second reply closes the Process instruction.
    let events = read_until(&format!("{session}/events?from=1"), None, |e: &[JournalEvent]| {
        e.iter().filter(|e| e.kind.as_str() == "user_reply").count() == processing.len()
    })?;
    let head = events.last().map_or(0, |e| e.seq);
    let (_, before) = request("GET", &format!("{session}/report"), None)?;
    drop(server);

    let server = start_server(data.path())?;
    let session = format!("http://{}/v1/sessions/{id}", server.addr);
    let (status, after) = request("GET", &format!("{session}/report"), None)?;
    if status != 200 {
        return Err(format!("report after restart: {status} {after}"));
    }

    let mut reference = Session::create(
        None,
        &id,
        SessionOptions { seed: RECOVERY_SEED, agent: AgentConfig::default(), ..SessionOptions::default() },
        Box::new(LogicalClock),
    )
    .map_err(|e| e.to_string())?;
    reference.attach(DatasetRole::Train, d.train_csv.as_bytes()).map_err(|e| e.to_string())?;
    reference.attach(DatasetRole::Test, d.test_csv.as_bytes()).map_err(|e| e.to_string())?;
    let backend = tandem_cli::build_backend(&scripted("binary")).map_err(|e| e.to_string())?;
    for text in processing {
        reference.submit(text, backend.as_ref()).map_err(|e| e.to_string())?;
    }
    let expected = state_of(&reference.report());
    if state_of(&before) != expected {
        return Err(format!("before the kill {} vs uninterrupted {expected}", state_of(&before)));
    }
    if state_of(&after) != expected {
        return Err(format!("after restart {} vs uninterrupted {expected}", state_of(&after)));
    }

    // Resume from every position, by query and by Last-Event-ID.
    for from in 1..=head {
        let by_query = read_events(&format!("{session}/events?from={from}"), None, head)?;
        let by_header = if from > 1 { Some(read_events(&format!("{session}/events"), Some(from - 1), head)?) } else { None };
        for got in std::iter::once(&by_query).chain(by_header.as_ref()) {
            let seqs: Vec<u64> = got.iter().map(|e| e.seq).collect();
            if seqs != (from..=head).collect::<Vec<_>>() {
                return Err(format!("resume from {from}: got seqs {seqs:?}"));
            }
        }
    }
    Ok(format!(
        "restart {} to {expected}; resumed from all {head} positions by query and Last-Event-ID with no gaps or duplicates",
        server.restored.trim_matches(|c| c == '(' || c == ')')
    ))
}

fn criterion_9() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("bench.json");
    let output = tandem()
        .arg("bench")
        .arg("--suite")
        .arg(assets().join(tandem_cli::SUITE_FILE))
        .arg("--out")
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!("bench exit {:?}: {}", output.status.code(), String::from_utf8_lossy(&output.stderr).trim()));
    }
    let result: Value = serde_json::from_slice(&std::fs::read(&out).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let schema: Value = serde_json::from_slice(&std::fs::read(assets().join(tandem_cli::SCHEMA_FILE)).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let validator = jsonschema::validator_for(&schema).map_err(|e| e.to_string())?;
    let errors: Vec<String> = validator.iter_errors(&result).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    if !errors.is_empty() {
        return Err(format!("schema: {errors:?}"));
    }
    let datasets = result["datasets"].as_array().ok_or("no datasets")?;
    let mut parts = Vec::new();
    let mut ok = datasets.len() == 2;
    for d in datasets {
        let rank = d["rank_percentile"].as_f64().unwrap_or(-1.0);
        let pool = d["pool"].as_array().map_or(0, Vec::len);
        let beaten = d["pool"].as_array().map_or(0, |p| p.iter().filter(|m| m["beaten"] == true).count());
        ok &= d["error"].is_null() && rank >= MIN_RANK_PERCENTILE;
        parts.push(format!("{} rank {rank:.2} (beat {beaten}/{pool})", d["name"].as_str().unwrap_or("?")));
    }
    let detail = format!("{}; JSON valid against the bundled schema", parts.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Runs {
    binary_a: Result<RunResult, String>,
    binary_b: Result<RunResult, String>,
    regression: Result<RunResult, String>,
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload.downcast_ref::<String>().cloned().or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into())
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let runs = Runs {
        binary_a: run_dataset("binary", &dir.path().join("binary-a")),
        binary_b: run_dataset("binary", &dir.path().join("binary-b")),
        regression: run_dataset("regression", &dir.path().join("regression")),
    };

    let criteria: Vec<(&str, Box<dyn FnOnce() -> Result<String, String> + '_>)> = vec![
        ("hermetic end-to-end run", Box::new(|| criterion_1(&runs))),
        ("quality floor on synthetic data", Box::new(|| criterion_2(&runs))),
        ("oracle equivalence", Box::new(criterion_3)),
        ("successive halving", Box::new(criterion_4)),
        ("parser suites", Box::new(criterion_5)),
        ("transactional scripts", Box::new(criterion_6)),
        ("repair loop", Box::new(criterion_7)),
        ("crash recovery and stream resume", Box::new(criterion_8)),
        ("bench against the reference pool", Box::new(criterion_9)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| Err(panic_message(p)));
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {}. {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name}: {}", i + 1, why.replace('\n', " | "));
            }
        }
    }
    println!("{} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
