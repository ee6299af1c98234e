//! End-to-end runs, journal verification and the desk-scale benchmark.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agents::{self, AgentConfig, FinalReport, Stage, CANONICAL_INSTRUCTIONS};
use crate::data::{self, Column, ColumnType, DataError, ImputeStrategy, Table, Task, DEFAULT_MAX_CARD};
use crate::llm::{BackendConfig, ChatBackend};
use crate::ml::{self, Family, MetricKind, ModelSpec};
use crate::session::{self, DatasetRole, JournalEvent, Listener, LogicalClock, Session, SessionError, SessionOptions, JOURNAL_FILE};
use crate::ErrorCode;

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub target: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub agent: AgentConfig,
}

/// Where a run failed: `setup`, one of the canonical instructions, or
/// `finalize`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunError {
    pub stage: String,
    pub code: String,
    pub message: String,
    pub journal: Option<PathBuf>,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "failed at {}: {}: {}", self.stage, self.code, self.message)
    }
}

impl std::error::Error for RunError {}

pub struct RunOutcome {
    pub session: Session,
    pub report: FinalReport,
    pub journal: PathBuf,
    pub submission: PathBuf,
}

fn setup_error(code: &str, message: String) -> RunError {
    RunError { stage: "setup".into(), code: code.into(), message, journal: None }
}

/// Creates a session in `out_dir`, attaches the data, issues the four
/// canonical instructions, finalizes and writes `report.json`. An existing
/// journal in `out_dir` is replaced; once the session exists its journal is
/// left on disk whatever the outcome.
pub fn run(config: &RunConfig, backend: &dyn ChatBackend, listener: Option<Listener>) -> Result<RunOutcome, RunError> {
    let read = |p: &Path| fs::read(p).map_err(|e| setup_error("E_IO", format!("{}: {e}", p.display())));
    let train = read(&config.train)?;
    let test = read(&config.test)?;

    fs::create_dir_all(&config.out_dir).map_err(|e| setup_error("E_IO", format!("{}: {e}", config.out_dir.display())))?;
    for stale in [JOURNAL_FILE, REPORT_FILE] {
        let p = config.out_dir.join(stale);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| setup_error("E_IO", format!("{}: {e}", p.display())))?;
        }
    }
    let options = SessionOptions { seed: config.seed, agent: config.agent.clone(), target: Some(config.target.clone()), ..Default::default() };
    let id = session::seeded_session_id(config.seed);
    let mut s = Session::create(Some(&config.out_dir), &id, options, Box::new(LogicalClock))
        .map_err(|e| setup_error(e.code(), e.to_string()))?;
    if let Some(l) = listener {
        s.add_listener(l);
    }
    let journal = config.out_dir.join(JOURNAL_FILE);
    let fail = |stage: &str, code: &str, message: String| RunError {
        stage: stage.to_string(),
        code: code.to_string(),
        message,
        journal: Some(journal.clone()),
    };

    s.attach(DatasetRole::Train, &train).map_err(|e| fail("setup", e.code(), e.to_string()))?;
    let columns = s.state.env.tables[agents::TRAIN_TABLE].column_names().join(", ");
    if !s.state.env.tables[agents::TRAIN_TABLE].has_column(&config.target) {
        let message = format!("target column {:?} not found in train (columns: {columns})", config.target);
        return Err(fail("setup", "E_NO_SUCH_COLUMN", message));
    }
    s.attach(DatasetRole::Test, &test).map_err(|e| fail("setup", e.code(), e.to_string()))?;

    let expected = [Stage::Explored, Stage::Processed, Stage::ModelSelected, Stage::Tuned];
    for (instruction, want) in CANONICAL_INSTRUCTIONS.iter().zip(expected) {
        s.submit(instruction, backend).map_err(|e| fail(instruction, e.code(), e.to_string()))?;
        if s.state.stage < want {
            let reply = s.state.transcript.last().map(|x| x.reply.clone()).unwrap_or_default();
            let code = s
                .events()
                .iter()
                .rev()
                .take_while(|e| e.kind != agents::EventKind::UserInstruction)
                .find_map(|e| (e.kind == agents::EventKind::Error).then(|| e.payload["code"].as_str().unwrap_or("E_STAGE").to_string()))
                .unwrap_or_else(|| "E_STAGE".into());
            return Err(fail(instruction, &code, format!("stage is {:?}, expected {want:?}; reply: {reply}", s.state.stage)));
        }
    }
    let report = s.finalize().map_err(|e| fail("finalize", e.code(), e.to_string()))?;
    let report_path = config.out_dir.join(REPORT_FILE);
    let body = serde_json::to_string_pretty(&json!({"session_id": s.id, "report": report})).expect("report serializes");
    fs::write(&report_path, body + "\n").map_err(|e| fail("finalize", "E_IO", e.to_string()))?;
    let submission = config.out_dir.join(session::ARTIFACT_DIR).join(agents::SUBMISSION_ARTIFACT);
    Ok(RunOutcome { session: s, report, journal, submission })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableShape {
    pub name: String,
    pub rows: usize,
    pub columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplaySummary {
    pub session_id: String,
    pub events: usize,
    pub instructions: u64,
    pub scripts_replayed: usize,
    pub stage: Stage,
    pub env_version: u64,
    pub tables: Vec<TableShape>,
    pub target_column: Option<String>,
    pub chosen_model: Option<String>,
    pub finalized_model: Option<String>,
    pub interrupted: bool,
}

impl fmt::Display for ReplaySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "session {}", self.session_id)?;
        writeln!(f, "events: {} (seq dense)", self.events)?;
        writeln!(f, "instructions: {}{}", self.instructions, if self.interrupted { " (last interrupted)" } else { "" })?;
        writeln!(f, "scripts replayed: {}", self.scripts_replayed)?;
        writeln!(f, "stage: {:?}", self.stage)?;
        writeln!(f, "env version: {}", self.env_version)?;
        for t in &self.tables {
            writeln!(f, "  table {}: {} rows x {} columns", t.name, t.rows, t.columns)?;
        }
        writeln!(f, "target: {}", self.target_column.as_deref().unwrap_or("-"))?;
        writeln!(f, "chosen model: {}", self.chosen_model.as_deref().unwrap_or("-"))?;
        write!(f, "finalized: {}", self.finalized_model.as_deref().unwrap_or("no"))
    }
}

/// Re-derives session state from a journal file, checking seq density and
/// re-executing every committed script. Blobs are read from `blobs/` next to
/// the journal.
pub fn verify_journal(path: &Path) -> Result<ReplaySummary, SessionError> {
    let text = fs::read_to_string(path).map_err(|e| SessionError::Io(format!("{}: {e}", path.display())))?;
    let (events, _) = session::parse_journal(&text, false)?;
    let blobs = path.parent().unwrap_or(Path::new(".")).join(session::BLOB_DIR);
    let r = session::replay(&events, Some(&blobs))?;
    Ok(summarize(&events, &r))
}

fn summarize(events: &[JournalEvent], r: &session::Replayed) -> ReplaySummary {
    ReplaySummary {
        session_id: r.id.clone(),
        events: events.len(),
        instructions: r.instructions,
        scripts_replayed: r.scripts_replayed,
        stage: r.state.stage,
        env_version: r.state.env.version,
        tables: r
            .state
            .env
            .tables
            .values()
            .map(|t| TableShape { name: t.name.clone(), rows: t.n_rows, columns: t.columns.len() })
            .collect(),
        target_column: r.state.target_column.clone(),
        chosen_model: r.state.chosen_model.clone(),
        finalized_model: r.state.final_report.as_ref().map(|x| x.model.clone()),
        interrupted: r.pending.is_some(),
    }
}

// ---------------------------------------------------------------------------
// Benchmark

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchDataset {
    pub name: String,
    pub train: PathBuf,
    pub test: PathBuf,
    /// CSV with `id` and the target column for the test rows.
    pub test_labels: PathBuf,
    pub target: String,
    pub task: Task,
    pub metric: String,
    /// Backend spec for this dataset; falls back to the command-line one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

pub fn default_pool() -> Vec<ModelSpec> {
    Family::ALL.into_iter().map(ModelSpec::new).collect()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSuite {
    pub datasets: Vec<BenchDataset>,
    #[serde(default = "default_pool")]
    pub reference_pool: Vec<ModelSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BenchError {
    #[error("invalid suite: {0}")]
    Suite(String),
    #[error("io error: {0}")]
    Io(String),
}

impl ErrorCode for BenchError {
    fn code(&self) -> &'static str {
        match self {
            BenchError::Suite(_) => "E_BAD_SUITE",
            BenchError::Io(_) => "E_IO",
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Resolves the path inside `scripted:` / `replay:` specs against `base`.
pub fn resolve_backend_spec(spec: &str, base: &Path) -> String {
    let mut parts = spec.splitn(2, '+');
    let head = parts.next().unwrap_or_default();
    let rest = parts.next();
    let head = match head.split_once(':') {
        Some((kind @ ("scripted" | "replay"), path)) => format!("{kind}:{}", resolve(base, Path::new(path)).display()),
        _ => head.to_string(),
    };
    match rest {
        Some(r) => format!("{head}+{}", resolve_backend_spec(r, base)),
        None => head,
    }
}

impl BenchSuite {
    /// Loads a suite file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = fs::read_to_string(path).map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
        let mut suite: BenchSuite = serde_json::from_str(&text).map_err(|e| BenchError::Suite(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut suite.datasets {
            d.train = resolve(base, &d.train);
            d.test = resolve(base, &d.test);
            d.test_labels = resolve(base, &d.test_labels);
            d.backend = d.backend.as_deref().map(|b| resolve_backend_spec(b, base));
        }
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.datasets.is_empty() || self.reference_pool.is_empty() || self.seeds.is_empty() {
            return Err(BenchError::Suite("datasets, reference_pool and seeds must be non-empty".into()));
        }
        for d in &self.datasets {
            let m = MetricKind::parse(&d.metric).ok_or_else(|| BenchError::Suite(format!("{}: unknown metric {:?}", d.name, d.metric)))?;
            if !m.supports(d.task) {
                return Err(BenchError::Suite(format!("{}: metric {} does not apply to {}", d.name, d.metric, d.task)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolScore {
    pub spec: String,
    pub score: Option<f64>,
    pub error: Option<String>,
    pub beaten: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetResult {
    pub name: String,
    pub seed: u64,
    pub task: Task,
    pub metric: String,
    pub agent_model: Option<String>,
    pub agent_score: Option<f64>,
    pub pool: Vec<PoolScore>,
    pub rank_percentile: f64,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub runs: usize,
    pub failures: usize,
    pub mean_rank_percentile: f64,
    pub min_rank_percentile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub note: String,
    pub datasets: Vec<DatasetResult>,
    pub summary: BenchSummary,
}

/// Fraction of pool members strictly beaten; a member without a score
/// (it could not be trained or scored for the task) counts as beaten.
pub fn rank_percentile(agent: f64, pool: &[Option<f64>], metric: MetricKind) -> f64 {
    if pool.is_empty() {
        return 0.0;
    }
    let beaten = pool.iter().filter(|p| p.is_none_or(|s| metric.direction().better(agent, s) && agent != s)).count();
    beaten as f64 / pool.len() as f64
}

/// Default processing for the reference pool: drop `id`, median-impute
/// numeric columns, one-hot encode categorical ones and drop text columns.
pub fn default_process(table: &Table, target: &str) -> Result<Table, DataError> {
    let mut t = table.clone();
    let names: Vec<String> = t.column_names().iter().map(|s| s.to_string()).collect();
    for name in names {
        if name == target {
            continue;
        }
        let c = t.column(&name)?;
        t = match c.ctype() {
            _ if name == "id" => data::drop_column(&t, &name)?,
            ColumnType::Numeric if c.missing_count() > 0 => data::impute(&t, &name, &ImputeStrategy::Median)?,
            ColumnType::Numeric => t,
            ColumnType::Categorical => data::onehot(&t, &name, DEFAULT_MAX_CARD)?,
            ColumnType::Text => data::drop_column(&t, &name)?,
        };
    }
    Ok(t)
}

/// Projects `table` onto the model's features; features absent from the
/// table (one-hot levels unseen there) become all-zero columns.
pub fn align_features(model: &ml::TrainedModel, table: &Table) -> Result<Table, DataError> {
    let cols: Vec<Column> = model
        .feature_schema
        .iter()
        .map(|f| match table.column(&f.name) {
            Ok(c) => c.clone(),
            Err(_) => Column::numeric(&f.name, vec![Some(0.0); table.n_rows]),
        })
        .collect();
    Table::new("aligned", cols)
}

/// Target values for the test rows, in test-row order.
pub fn aligned_labels(test: &Table, labels: &Table, target: &str) -> Result<Column, String> {
    let truth = labels.column(target).map_err(|e| format!("test labels: {e}"))?;
    let ids = |t: &Table| -> Result<Vec<Option<String>>, String> {
        let c = t.column("id").map_err(|e| format!("{}: {e}", t.name))?;
        Ok((0..t.n_rows).map(|r| c.cell_text(r)).collect())
    };
    if ids(test)? != ids(labels)? {
        return Err("test label ids do not match the test ids row for row".into());
    }
    Ok(truth.clone())
}

fn read_table(path: &Path, name: &str) -> Result<Table, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    data::read_csv(&bytes, name).map_err(|e| format!("{}: {e}", path.display()))
}

/// Scores every pool spec trained on a seeded 80/20 split of the default
/// processed train table, evaluated on the labelled test table.
pub fn pool_scores(d: &BenchDataset, pool: &[ModelSpec], seed: u64) -> Result<Vec<(String, Result<f64, String>)>, String> {
    let metric = MetricKind::parse(&d.metric).ok_or("unknown metric")?;
    let train = default_process(&read_table(&d.train, "train")?, &d.target).map_err(|e| e.to_string())?;
    let raw_test = read_table(&d.test, "test")?;
    let truth = aligned_labels(&raw_test, &read_table(&d.test_labels, "labels")?, &d.target)?;
    let test = default_process(&raw_test, &d.target).map_err(|e| e.to_string())?;
    let (fit, _) = data::split(&train, 0.8, seed, "pool_train", "pool_valid").map_err(|e| e.to_string())?;
    Ok(pool
        .iter()
        .map(|spec| {
            let score = ml::train(spec, &fit, &d.target)
                .and_then(|m| {
                    let x = align_features(&m, &test)?;
                    let preds = ml::predict(&m, &x)?;
                    ml::score(metric, &truth, &preds)
                })
                .map_err(|e| format!("{}: {e}", e.code()));
            (spec.to_string(), score)
        })
        .collect())
}

/// Agent run for one dataset; returns the chosen model name and its score on
/// the labelled test rows.
fn agent_score(d: &BenchDataset, backend_spec: &str, seed: u64, out_dir: &Path, agent: &AgentConfig) -> Result<(String, f64), String> {
    let metric = MetricKind::parse(&d.metric).ok_or("unknown metric")?;
    let backend = BackendConfig::parse_spec(backend_spec).and_then(|c| c.build()).map_err(|e| format!("{}: {e}", e.code()))?;
    let config = RunConfig {
        train: d.train.clone(),
        test: d.test.clone(),
        target: d.target.clone(),
        out_dir: out_dir.to_path_buf(),
        seed,
        agent: agent.clone(),
    };
    let outcome = run(&config, &backend, None).map_err(|e| e.to_string())?;
    let state = &outcome.session.state;
    let model = &state.env.models[&outcome.report.model].model;
    let test = &state.env.tables[agents::TEST_TABLE];
    let truth = aligned_labels(test, &read_table(&d.test_labels, "labels")?, &d.target)?;
    let (_, preds) = agents::predict_table(model, test).map_err(|e| e.to_string())?;
    let score = ml::score(metric, &truth, &preds).map_err(|e| e.to_string())?;
    Ok((outcome.report.model.clone(), score))
}

fn bench_one(d: &BenchDataset, pool: &[ModelSpec], seed: u64, backend_spec: &str, out_dir: &Path, agent: &AgentConfig) -> DatasetResult {
    let start = Instant::now();
    let metric = MetricKind::parse(&d.metric).expect("validated suite");
    let mut result = DatasetResult {
        name: d.name.clone(),
        seed,
        task: d.task,
        metric: d.metric.clone(),
        agent_model: None,
        agent_score: None,
        pool: Vec::new(),
        rank_percentile: 0.0,
        wall_seconds: 0.0,
        error: None,
    };
    let spec = d.backend.as_deref().unwrap_or(backend_spec);
    let run_dir = out_dir.join(&d.name).join(format!("seed-{seed}"));
    match (agent_score(d, spec, seed, &run_dir, agent), pool_scores(d, pool, seed)) {
        (Ok((model, score)), Ok(pool)) => {
            let scores: Vec<Option<f64>> = pool.iter().map(|p| p.1.as_ref().ok().copied()).collect();
            result.rank_percentile = rank_percentile(score, &scores, metric);
            result.pool = pool
                .into_iter()
                .zip(&scores)
                .map(|((spec, s), p)| PoolScore { spec, score: *p, error: s.err(), beaten: rank_percentile(score, &[*p], metric) == 1.0 })
                .collect();
            result.agent_model = Some(model);
            result.agent_score = Some(score);
        }
        (Err(e), _) | (_, Err(e)) => result.error = Some(e),
    }
    result.wall_seconds = start.elapsed().as_secs_f64();
    result
}

/// Runs every (dataset, seed) pair, datasets in parallel. Failures are
/// recorded with rank 0 and the suite continues.
pub fn run_bench(suite: &BenchSuite, backend_spec: &str, out_dir: &Path, agent: &AgentConfig) -> BenchResult {
    let jobs: Vec<(&BenchDataset, u64)> = suite.datasets.iter().flat_map(|d| suite.seeds.iter().map(move |s| (d, *s))).collect();
    let datasets: Vec<DatasetResult> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(d, seed)| scope.spawn(move || bench_one(d, &suite.reference_pool, *seed, backend_spec, out_dir, agent)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });
    let ranks: Vec<f64> = datasets.iter().map(|d| d.rank_percentile).collect();
    let summary = BenchSummary {
        runs: datasets.len(),
        failures: datasets.iter().filter(|d| d.error.is_some()).count(),
        mean_rank_percentile: ranks.iter().sum::<f64>() / ranks.len().max(1) as f64,
        min_rank_percentile: ranks.iter().copied().fold(f64::INFINITY, f64::min).min(1.0),
    };
    let note = format!(
        "desk-scale analog: reference pool of {} internal model specs at fixed hyperparameters, per-script cap {}s; \
         not comparable to external leaderboard percentiles",
        suite.reference_pool.len(),
        agent.max_script_seconds
    );
    BenchResult { note, datasets, summary }
}

fn fmt_score(s: Option<f64>) -> String {
    s.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// Human-readable table of a bench result.
pub fn render_bench_table(result: &BenchResult) -> String {
    let mut out = format!("{:<14} {:>5} {:<7} {:>8} {:>8}  pool\n", "dataset", "seed", "metric", "agent", "rank");
    for d in &result.datasets {
        let pool: Vec<String> = d
            .pool
            .iter()
            .map(|p| format!("{}={}{}", p.spec, fmt_score(p.score), if p.beaten { "" } else { "*" }))
            .collect();
        out.push_str(&format!(
            "{:<14} {:>5} {:<7} {:>8} {:>8.2}  {}\n",
            d.name,
            d.seed,
            d.metric,
            fmt_score(d.agent_score),
            d.rank_percentile,
            d.error.as_deref().map_or_else(|| pool.join(" "), |e| format!("error: {e}"))
        ));
    }
    out.push_str(&format!(
        "mean rank percentile {:.2} over {} runs ({} failed); * = not beaten\n{}\n",
        result.summary.mean_rank_percentile, result.summary.runs, result.summary.failures, result.note
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_percentile_examples() {
        let m = MetricKind::Auc;
        assert_eq!(rank_percentile(0.9, &[Some(0.5), Some(0.6), Some(0.7), Some(0.8)], m), 1.0);
        assert_eq!(rank_percentile(0.4, &[Some(0.5), Some(0.6), Some(0.7), Some(0.8)], m), 0.0);
        assert_eq!(rank_percentile(0.75, &[Some(0.5), Some(0.6), Some(0.7), Some(0.8)], m), 0.75);
        assert_eq!(rank_percentile(0.7, &[Some(0.7)], m), 0.0);
        assert_eq!(rank_percentile(1.0, &[Some(2.0), None], MetricKind::Rmse), 1.0);
    }

    #[test]
    fn backend_spec_resolution() {
        let base = Path::new("/suite");
        assert_eq!(resolve_backend_spec("scripted:f.jsonl", base), "scripted:/suite/f.jsonl");
        assert_eq!(resolve_backend_spec("replay:c+http:m", base), "replay:/suite/c+http:m");
        assert_eq!(resolve_backend_spec("http:m", base), "http:m");
    }

    #[test]
    fn default_processing() {
        let csv = "id,a,c,y\n1,1,u,0\n2,,v,1\n3,3,u,1\n";
        let t = default_process(&data::read_csv(csv.as_bytes(), "t").unwrap(), "y").unwrap();
        assert_eq!(t.column_names(), vec!["a", "c=u", "c=v", "y"]);
        assert_eq!(t.column("a").unwrap().missing_count(), 0);
    }
}
