//! Command implementations behind the `tandem` binary.
//!
//! Every command writes to caller-supplied writers and returns a process
//! exit code, so tests can drive them in-process.

use std::fs;
use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::Args;
use serde_json::{json, Value};
use tandem_core::agents::{AgentConfig, EventKind};
use tandem_core::harness::{self, BenchSuite, RunConfig};
use tandem_core::llm::{BackendConfig, ChatBackend, LlmError};
use tandem_core::session::{self, DatasetRole, JournalEvent, Session, SessionOptions, SystemClock, JOURNAL_FILE};
use tandem_core::{synth, ErrorCode};
use tandem_server::{BackendFactory, Service, ServiceConfig};

/// JSON schema for the machine-readable bench output.
pub const BENCH_SCHEMA: &str = include_str!("../bench_result.schema.json");
pub const SCHEMA_FILE: &str = "bench_result.schema.json";
pub const SUITE_FILE: &str = "bench_suite.json";

pub fn build_backend(spec: &str) -> Result<Box<dyn ChatBackend>, LlmError> {
    BackendConfig::parse_spec(spec)?.build()
}

fn agent_config(max_script_seconds: f64) -> AgentConfig {
    AgentConfig { max_script_seconds, ..AgentConfig::default() }
}

fn shorten(s: &str, max: usize) -> String {
    let one_line = s.replace('\n', " | ");
    if one_line.chars().count() <= max {
        one_line
    } else {
        one_line.chars().take(max).collect::<String>() + "..."
    }
}

/// One-line rendering of the events worth showing live; `None` for the rest.
pub fn describe_event(e: &JournalEvent) -> Option<String> {
    let p = &e.payload;
    let text = |k: &str| p[k].as_str().unwrap_or_default().to_string();
    let line = match e.kind {
        EventKind::Thought => format!("thought: {}", text("text")),
        EventKind::Action => format!("action: {} <- {}", text("tool"), shorten(&text("input"), 160)),
        EventKind::Observation => format!("observation: {}", shorten(&text("text"), 300)),
        EventKind::ExecResult => {
            let status = if p["ok"].as_bool() == Some(true) { "ok".to_string() } else { format!("failed {}", text("code")) };
            format!("script attempt {}: {status}", p["attempt"])
        }
        EventKind::StageChange => format!("stage: {} -> {}", text("from"), text("to")),
        EventKind::Error => format!("{} {}: {}", text("severity"), text("code"), text("message")),
        _ => return None,
    };
    Some(format!("[{}] {line}", e.seq))
}

fn verbose_listener() -> session::Listener {
    Box::new(|e: &JournalEvent| {
        if let Some(line) = describe_event(e) {
            eprintln!("{line}");
        }
    })
}

// ---------------------------------------------------------------------------
// run

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Training CSV (must contain the target column).
    #[arg(long)]
    pub train: PathBuf,
    /// Test CSV to predict.
    #[arg(long)]
    pub test: PathBuf,
    /// Target column name.
    #[arg(long)]
    pub target: String,
    /// scripted:<fixture.jsonl> | http:<model> | replay:<dir>[+http:<model>]
    #[arg(long)]
    pub backend: String,
    /// Output directory for journal, report and artifacts.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print thoughts, actions and observations to stderr as they happen.
    #[arg(long)]
    pub verbose: bool,
    #[arg(long, default_value_t = 300.0)]
    pub max_script_seconds: f64,
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let started = Instant::now();
    let backend = match build_backend(&args.backend) {
        Ok(b) => b,
        Err(e) => {
            let _ = writeln!(err, "failed at setup: {}: {e}", e.code());
            return 2;
        }
    };
    let config = RunConfig {
        train: args.train.clone(),
        test: args.test.clone(),
        target: args.target.clone(),
        out_dir: args.out.clone(),
        seed: args.seed,
        agent: agent_config(args.max_script_seconds),
    };
    match harness::run(&config, &backend, args.verbose.then(verbose_listener)) {
        Ok(o) => {
            let rows = o.report.rows;
            let _ = writeln!(out, "session {}: finalized model {} ({})", o.session.id, o.report.model, o.report.spec);
            for m in &o.report.metrics {
                let _ = writeln!(out, "  {} on {}: {:.4}", m.metric.name(), m.table, m.score);
            }
            if let Some(t) = &o.report.tune {
                let _ = writeln!(out, "  tuned: best {} {:.4} over {} trials", t.metric, t.best_score, t.trials);
            }
            let _ = writeln!(out, "submission: {} ({rows} rows)", o.submission.display());
            let _ = writeln!(out, "report: {}", args.out.join(harness::REPORT_FILE).display());
            let _ = writeln!(out, "journal: {} ({} events)", o.journal.display(), o.session.head());
            let _ = writeln!(out, "elapsed: {:.2}s", started.elapsed().as_secs_f64());
            0
        }
        Err(e) => {
            let _ = writeln!(err, "{e}");
            if let Some(j) = &e.journal {
                let _ = writeln!(err, "journal: {}", j.display());
            }
            1
        }
    }
}

// ---------------------------------------------------------------------------
// replay

pub fn cmd_replay(journal: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match harness::verify_journal(journal) {
        Ok(summary) => {
            let _ = writeln!(out, "{summary}");
            0
        }
        Err(e) => {
            let _ = writeln!(err, "replay failed: {}: {e}", e.code());
            1
        }
    }
}

// ---------------------------------------------------------------------------
// bench

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Suite JSON; relative paths inside it resolve against its directory.
    #[arg(long)]
    pub suite: PathBuf,
    /// Backend for datasets that do not name their own.
    #[arg(long)]
    pub backend: Option<String>,
    /// Where to write the machine-readable result.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-dataset run outputs [default: <out>.runs].
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 300.0)]
    pub max_script_seconds: f64,
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let suite = match BenchSuite::load(&args.suite) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(err, "{}: {e}", e.code());
            return 2;
        }
    };
    let runs_dir = args.runs_dir.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".runs");
        PathBuf::from(p)
    });
    let result = harness::run_bench(&suite, args.backend.as_deref().unwrap_or(""), &runs_dir, &agent_config(args.max_script_seconds));
    let body = serde_json::to_string_pretty(&result).expect("bench result serializes") + "\n";
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        if let Err(e) = fs::create_dir_all(parent) {
            let _ = writeln!(err, "E_IO: {}: {e}", parent.display());
            return 2;
        }
    }
    if let Err(e) = fs::write(&args.out, body) {
        let _ = writeln!(err, "E_IO: {}: {e}", args.out.display());
        return 2;
    }
    let _ = write!(out, "{}", harness::render_bench_table(&result));
    let _ = writeln!(out, "result: {}", args.out.display());
    for d in result.datasets.iter().filter(|d| d.error.is_some()) {
        let _ = writeln!(err, "{} (seed {}): {}", d.name, d.seed, d.error.as_deref().unwrap_or_default());
    }
    i32::from(result.summary.failures > 0)
}

// ---------------------------------------------------------------------------
// chat

#[derive(Debug, Clone, Args)]
pub struct ChatArgs {
    /// Session directory; an existing journal there is resumed.
    #[arg(long)]
    pub session_dir: PathBuf,
    #[arg(long)]
    pub backend: String,
    /// Target column, if known up front.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub verbose: bool,
    #[arg(long, default_value_t = 300.0)]
    pub max_script_seconds: f64,
}

const CHAT_HELP: &str = "commands: :attach <train|test> <csv>, :report, :events [N], :help, :quit (Ctrl-D also exits)";

fn open_or_create(args: &ChatArgs) -> Result<Session, session::SessionError> {
    if args.session_dir.join(JOURNAL_FILE).exists() {
        return Session::open(&args.session_dir, Box::new(SystemClock));
    }
    let options = SessionOptions {
        seed: args.seed,
        agent: agent_config(args.max_script_seconds),
        target: args.target.clone(),
        ..SessionOptions::default()
    };
    Session::create(Some(&args.session_dir), &session::random_session_id(), options, Box::new(SystemClock))
}

fn meta_command(s: &mut Session, line: &str, out: &mut dyn Write) -> io::Result<bool> {
    let mut parts = line.split_whitespace();
    match parts.next().unwrap_or_default() {
        ":quit" | ":q" => return Ok(false),
        ":help" => writeln!(out, "{CHAT_HELP}")?,
        ":report" => writeln!(out, "{}", serde_json::to_string_pretty(&s.report()).expect("report serializes"))?,
        ":events" => {
            let n = match parts.next().map(str::parse::<usize>) {
                None => 10,
                Some(Ok(n)) => n,
                Some(Err(_)) => {
                    writeln!(out, "usage: :events N")?;
                    return Ok(true);
                }
            };
            let events = s.events();
            for e in &events[events.len().saturating_sub(n)..] {
                writeln!(out, "{}", serde_json::to_string(e).expect("event serializes"))?;
            }
        }
        ":attach" => {
            let (Some(role), Some(path)) = (parts.next(), parts.next()) else {
                writeln!(out, "usage: :attach <train|test> <path>")?;
                return Ok(true);
            };
            let result = DatasetRole::parse(role).and_then(|r| {
                let bytes = fs::read(path).map_err(|e| session::SessionError::Io(format!("{path}: {e}")))?;
                s.attach(r, &bytes)
            });
            match result {
                Ok(summary) => writeln!(out, "{}", summary["digest"].as_str().unwrap_or_default().trim_end())?,
                Err(e) => writeln!(out, "error: {}: {e}", e.code())?,
            }
        }
        other => writeln!(out, "unknown command {other}; {CHAT_HELP}")?,
    }
    Ok(true)
}

/// Interactive loop over `input`. Replies are the `user_reply` events the
/// instruction produced, so what is printed is exactly what the journal holds.
pub fn cmd_chat(args: &ChatArgs, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let backend = match build_backend(&args.backend) {
        Ok(b) => b,
        Err(e) => {
            let _ = writeln!(err, "{}: {e}", e.code());
            return 2;
        }
    };
    let mut s = match open_or_create(args) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(err, "{}: {e}", e.code());
            return 2;
        }
    };
    if args.verbose {
        s.add_listener(verbose_listener());
    }
    let _ = writeln!(out, "session {} in {} (stage {:?}); {CHAT_HELP}", s.id, args.session_dir.display(), s.state.stage);
    let mut line = String::new();
    loop {
        let _ = write!(out, "> ");
        let _ = out.flush();
        line.clear();
        match input.read_line(&mut line) {
            Ok(0) => {
                let _ = writeln!(out);
                return 0;
            }
            Ok(_) => {}
            Err(e) => {
                let _ = writeln!(err, "E_IO: {e}");
                return 1;
            }
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text.starts_with(':') {
            match meta_command(&mut s, text, out) {
                Ok(true) => continue,
                Ok(false) => return 0,
                Err(e) => {
                    let _ = writeln!(err, "E_IO: {e}");
                    return 1;
                }
            }
        }
        let head = s.head();
        if let Err(e) = s.submit(text, &backend) {
            let _ = writeln!(out, "error: {}: {e}", e.code());
        }
        for e in s.events_from(head + 1).iter().filter(|e| e.kind == EventKind::UserReply) {
            let _ = writeln!(out, "{}", e.payload["text"].as_str().unwrap_or_default());
        }
    }
}

// ---------------------------------------------------------------------------
// serve

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Directory holding one subdirectory per session.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long)]
    pub backend: String,
    #[arg(long, default_value_t = 64)]
    pub max_sessions: usize,
    #[arg(long, default_value_t = 300.0)]
    pub max_script_seconds: f64,
}

pub fn cmd_serve(args: &ServeArgs, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32 {
    let config = match BackendConfig::parse_spec(&args.backend) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "{}: {e}", e.code());
            return 2;
        }
    };
    if let Err(e) = config.build() {
        let _ = writeln!(err, "{}: {e}", e.code());
        return 2;
    }
    let factory: BackendFactory = Arc::new(move || config.build());
    let mut service_config = ServiceConfig::new(&args.data_dir);
    service_config.max_sessions = args.max_sessions;
    service_config.agent = agent_config(args.max_script_seconds);
    let service = match Service::new(service_config, factory) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(err, "{}: {}", e.code, e.message);
            return 2;
        }
    };
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "E_IO: {e}");
            return 2;
        }
    };
    let sessions = service.session_ids().len();
    let result = runtime.block_on(tandem_server::serve(args.bind, service, |addr| {
        let _ = writeln!(out, "listening on {addr} ({sessions} sessions restored)");
        let _ = out.flush();
    }));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "E_IO: {e}");
            1
        }
    }
}

// ---------------------------------------------------------------------------
// bundled assets

/// Files written by `gen-assets`, relative to the asset directory.
pub fn asset_files() -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    for (d, fixture) in synth::bundled().into_iter().zip([synth::binary_fixture(), synth::regression_fixture()]) {
        let dir = PathBuf::from(d.name);
        files.push((dir.join("train.csv"), d.train_csv.into_bytes()));
        files.push((dir.join("test.csv"), d.test_csv.into_bytes()));
        files.push((dir.join("test_labels.csv"), d.test_labels_csv.into_bytes()));
        files.push((dir.join("fixture.jsonl"), synth::fixture_jsonl(&fixture).into_bytes()));
    }
    files.push((PathBuf::from(SUITE_FILE), bench_suite_json().into_bytes()));
    files.push((PathBuf::from(SCHEMA_FILE), BENCH_SCHEMA.as_bytes().to_vec()));
    files
}

fn bench_suite_json() -> String {
    let datasets: Vec<Value> = synth::bundled()
        .iter()
        .map(|d| {
            let metric = if d.task.is_classification() { "auc" } else { "rmse" };
            json!({
                "name": d.name,
                "train": format!("{}/train.csv", d.name),
                "test": format!("{}/test.csv", d.name),
                "test_labels": format!("{}/test_labels.csv", d.name),
                "target": d.target,
                "task": d.task,
                "metric": metric,
                "backend": format!("scripted:{}/fixture.jsonl", d.name),
            })
        })
        .collect();
    let pool: Vec<Value> = harness::default_pool().iter().map(|s| serde_json::to_value(s).expect("spec serializes")).collect();
    serde_json::to_string_pretty(&json!({"datasets": datasets, "reference_pool": pool, "seeds": [0]})).expect("suite serializes") + "\n"
}

pub fn cmd_gen_assets(dir: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    for (rel, bytes) in asset_files() {
        let path = dir.join(&rel);
        let written = path.parent().map_or(Ok(()), fs::create_dir_all).and_then(|_| fs::write(&path, bytes));
        if let Err(e) = written {
            let _ = writeln!(err, "E_IO: {}: {e}", path.display());
            return 1;
        }
        let _ = writeln!(out, "wrote {}", path.display());
    }
    0
}
