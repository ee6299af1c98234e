//! Event-sourced sessions.
//!
//! A session directory holds `journal.jsonl` (one `{seq, ts, type, payload}`
//! object per line, fsynced on append), `blobs/<sha256>.csv` for attached
//! datasets and `artifacts/` for saved files. Replaying the journal rebuilds
//! the session state: datasets are re-attached from blobs, successful scripts
//! are re-executed and tool effects and stage changes are re-applied.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{self, AgentConfig, EventKind, EventSink, Exchange, FinalReport, InstructionOutcome, SessionState, Stage};
use crate::data::{self, DataError};
use crate::dsl;
use crate::llm::ChatBackend;
use crate::rng::SplitMix64;
use crate::ErrorCode;

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const BLOB_DIR: &str = "blobs";
pub const ARTIFACT_DIR: &str = "artifacts";
pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("session limit of {0} reached")]
    Capacity(usize),
    #[error("upload of {size} bytes exceeds the {limit} byte limit")]
    TooLarge { size: usize, limit: usize },
    #[error("unknown dataset role {0:?}; expected train or test")]
    BadRole(String),
    #[error("artifact {0:?} not found")]
    ArtifactNotFound(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("journal is empty")]
    Empty,
    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
    #[error("seq gap: expected {expected}, found {found}")]
    Gap { expected: u64, found: u64 },
    #[error("replay diverged at seq {seq}: {message}")]
    Diverged { seq: u64, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Agent(#[from] agents::AgentError),
}

impl ErrorCode for SessionError {
    fn code(&self) -> &'static str {
        match self {
            SessionError::NotFound(_) => "E_SESSION_NOT_FOUND",
            SessionError::Capacity(_) => "E_CAPACITY",
            SessionError::TooLarge { .. } => "E_TOO_LARGE",
            SessionError::BadRole(_) => "E_BAD_ROLE",
            SessionError::ArtifactNotFound(_) => "E_NOT_FOUND",
            SessionError::Io(_) => "E_IO",
            SessionError::Empty => "E_EMPTY",
            SessionError::Journal { .. } => "E_JOURNAL",
            SessionError::Gap { .. } => "E_SEQ_GAP",
            SessionError::Diverged { .. } => "E_REPLAY_DIVERGED",
            SessionError::Data(e) => e.code(),
            SessionError::Agent(e) => e.code(),
        }
    }
}

fn io_err(context: &Path, e: std::io::Error) -> SessionError {
    SessionError::Io(format!("{}: {e}", context.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEvent {
    pub seq: u64,
    pub ts: u64,
    #[serde(rename = "type")]
    pub kind: EventKind,
    pub payload: Value,
}

/// Timestamp source for journal events.
pub trait Clock: Send {
    fn now_ms(&mut self, seq: u64) -> u64;
}

/// Wall-clock UTC milliseconds.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&mut self, _seq: u64) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// `ts = seq`; keeps journals byte-identical across runs.
#[derive(Debug, Default, Clone, Copy)]
pub struct LogicalClock;

impl Clock for LogicalClock {
    fn now_ms(&mut self, seq: u64) -> u64 {
        seq
    }
}

pub type Listener = Box<dyn FnMut(&JournalEvent) + Send>;

/// Append-only event log with optional file backing and live listeners.
pub struct Journal {
    events: Vec<JournalEvent>,
    file: Option<File>,
    path: Option<PathBuf>,
    clock: Box<dyn Clock>,
    listeners: Vec<Listener>,
    io_error: Option<SessionError>,
}

impl Journal {
    fn new(path: Option<PathBuf>, events: Vec<JournalEvent>, clock: Box<dyn Clock>) -> Result<Self, SessionError> {
        let file = match &path {
            Some(p) => Some(OpenOptions::new().create(true).append(true).open(p).map_err(|e| io_err(p, e))?),
            None => None,
        };
        Ok(Self { events, file, path, clock, listeners: Vec::new(), io_error: None })
    }

    pub fn events(&self) -> &[JournalEvent] {
        &self.events
    }

    pub fn head(&self) -> u64 {
        self.events.len() as u64
    }

    pub fn append(&mut self, kind: EventKind, payload: Value) -> Result<u64, SessionError> {
        let seq = self.head() + 1;
        let event = JournalEvent { seq, ts: self.clock.now_ms(seq), kind, payload };
        if let (Some(file), Some(path)) = (&mut self.file, &self.path) {
            let mut line = serde_json::to_string(&event).expect("journal events serialize");
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
            file.sync_data().map_err(|e| io_err(path, e))?;
        }
        for l in &mut self.listeners {
            l(&event);
        }
        self.events.push(event);
        Ok(seq)
    }

    fn take_io_error(&mut self) -> Result<(), SessionError> {
        match self.io_error.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

impl EventSink for Journal {
    fn emit(&mut self, kind: EventKind, payload: Value) {
        if let Err(e) = self.append(kind, payload) {
            self.io_error.get_or_insert(e);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    Train,
    Test,
}

impl DatasetRole {
    pub fn parse(s: &str) -> Result<Self, SessionError> {
        match s {
            "train" => Ok(DatasetRole::Train),
            "test" => Ok(DatasetRole::Test),
            other => Err(SessionError::BadRole(other.to_string())),
        }
    }

    pub fn table_name(self) -> &'static str {
        match self {
            DatasetRole::Train => agents::TRAIN_TABLE,
            DatasetRole::Test => agents::TEST_TABLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOptions {
    pub seed: u64,
    pub agent: AgentConfig,
    pub max_upload_bytes: usize,
    /// Target column known up front (e.g. from a command-line flag).
    #[serde(default)]
    pub target: Option<String>,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self { seed: 0, agent: AgentConfig::default(), max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES, target: None }
    }
}

/// Random 128-bit hex id.
pub fn random_session_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

/// Seed-derived 128-bit hex id, for reproducible runs.
pub fn seeded_session_id(seed: u64) -> String {
    let mut rng = SplitMix64::new(seed ^ 0x5e55_1011);
    format!("{:016x}{:016x}", rng.next_u64(), rng.next_u64())
}

/// Everything replay must reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub stage: Stage,
    pub env: dsl::Env,
    pub target_column: Option<String>,
    pub chosen_model: Option<String>,
    pub transcript: Vec<Exchange>,
    pub final_report: Option<FinalReport>,
}

pub struct Session {
    pub id: String,
    dir: Option<PathBuf>,
    pub state: SessionState,
    journal: Journal,
    max_upload_bytes: usize,
    submission: Option<Vec<u8>>,
    finalized_version: Option<u64>,
    instructions: u64,
}

impl Session {
    /// Creates a session; with `dir` the session is persisted in that
    /// directory, otherwise it lives only in memory.
    pub fn create(dir: Option<&Path>, id: &str, options: SessionOptions, clock: Box<dyn Clock>) -> Result<Self, SessionError> {
        let dir = match dir {
            Some(d) => {
                let dir = d.to_path_buf();
                if dir.join(JOURNAL_FILE).exists() {
                    return Err(SessionError::Io(format!("session {id} already exists")));
                }
                fs::create_dir_all(dir.join(BLOB_DIR)).map_err(|e| io_err(&dir, e))?;
                fs::create_dir_all(dir.join(ARTIFACT_DIR)).map_err(|e| io_err(&dir, e))?;
                Some(dir)
            }
            None => None,
        };
        let journal = Journal::new(dir.as_ref().map(|d| d.join(JOURNAL_FILE)), Vec::new(), clock)?;
        let mut s = Session {
            id: id.to_string(),
            dir,
            state: initial_state(&options),
            journal,
            max_upload_bytes: options.max_upload_bytes,
            submission: None,
            finalized_version: None,
            instructions: 0,
        };
        s.journal.append(EventKind::SessionCreated, json!({"session_id": id, "options": options}))?;
        Ok(s)
    }

    /// Reopens `dir` (a session directory) by replaying its journal. A torn
    /// final line is dropped; an instruction without a reply is closed with
    /// an `E_INTERRUPTED` error and reply.
    pub fn open(dir: &Path, clock: Box<dyn Clock>) -> Result<Self, SessionError> {
        let path = dir.join(JOURNAL_FILE);
        if !path.exists() {
            return Err(SessionError::NotFound(dir.display().to_string()));
        }
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let (events, torn) = parse_journal(&text, true)?;
        if torn {
            let keep: usize = text.rfind('\n').map_or(0, |i| i + 1);
            let f = OpenOptions::new().write(true).open(&path).map_err(|e| io_err(&path, e))?;
            f.set_len(keep as u64).map_err(|e| io_err(&path, e))?;
        }
        let replayed = replay(&events, Some(&dir.join(BLOB_DIR)))?;
        let journal = Journal::new(Some(path), events, clock)?;
        let mut s = Session {
            id: replayed.id,
            dir: Some(dir.to_path_buf()),
            state: replayed.state,
            journal,
            max_upload_bytes: replayed.options.max_upload_bytes,
            submission: replayed.submission,
            finalized_version: replayed.finalized_version,
            instructions: replayed.instructions,
        };
        if let Some(text) = replayed.pending {
            s.journal.append(
                EventKind::Error,
                json!({"severity": "error", "code": "E_INTERRUPTED", "message": "instruction interrupted by a restart"}),
            )?;
            let reply = "This instruction was interrupted by a restart; changes committed before the interruption are kept.";
            s.journal.append(EventKind::UserReply, json!({"text": reply, "intent": null, "stage": s.state.stage}))?;
            s.state.transcript.push(Exchange { instruction: text, reply: reply.into() });
        }
        s.write_artifacts()?;
        Ok(s)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn events(&self) -> &[JournalEvent] {
        self.journal.events()
    }

    pub fn events_from(&self, from: u64) -> &[JournalEvent] {
        let start = (from.max(1) - 1).min(self.journal.head()) as usize;
        &self.journal.events()[start..]
    }

    pub fn head(&self) -> u64 {
        self.journal.head()
    }

    pub fn add_listener(&mut self, listener: Listener) {
        self.journal.listeners.push(listener);
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            stage: self.state.stage,
            env: self.state.env.clone(),
            target_column: self.state.target_column.clone(),
            chosen_model: self.state.chosen_model.clone(),
            transcript: self.state.transcript.clone(),
            final_report: self.state.final_report.clone(),
        }
    }

    /// Parses and stores a dataset under its role name; returns a summary
    /// with the profile digest.
    pub fn attach(&mut self, role: DatasetRole, csv: &[u8]) -> Result<Value, SessionError> {
        if csv.len() > self.max_upload_bytes {
            return Err(SessionError::TooLarge { size: csv.len(), limit: self.max_upload_bytes });
        }
        let table = data::read_csv(csv, role.table_name())?;
        let blob = hex::encode(Sha256::digest(csv));
        if let Some(dir) = &self.dir {
            let path = dir.join(BLOB_DIR).join(format!("{blob}.csv"));
            if !path.exists() {
                fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
            }
        }
        if self.state.env.tables.contains_key(role.table_name()) {
            self.journal.append(
                EventKind::Error,
                json!({"severity": "warning", "code": "E_REATTACH", "message": format!("replacing the {} table", role.table_name())}),
            )?;
        }
        let summary = attach_table(&mut self.state, role, table);
        let mut payload = summary.clone();
        payload["blob"] = json!(blob);
        self.journal.append(EventKind::DatasetAttached, payload)?;
        Ok(summary)
    }

    /// Runs one instruction to completion. Returns the 1-based instruction
    /// ordinal with the outcome. Backend failures are journaled and answered
    /// with an error reply rather than returned.
    pub fn submit(&mut self, text: &str, backend: &dyn ChatBackend) -> Result<(u64, Option<InstructionOutcome>), SessionError> {
        self.instructions += 1;
        let ordinal = self.instructions;
        let stage_before = self.state.stage;
        let outcome = match agents::handle_instruction(&mut self.state, text, backend, &mut self.journal) {
            Ok(o) => Some(o),
            Err(e) => {
                self.journal.append(EventKind::Error, json!({"severity": "error", "code": e.code(), "message": e.to_string()}))?;
                let reply = format!("I could not finish this instruction: {e}");
                self.journal.append(EventKind::UserReply, json!({"text": reply, "intent": null, "stage": self.state.stage}))?;
                self.state.transcript.push(Exchange { instruction: text.to_string(), reply });
                None
            }
        };
        self.journal.take_io_error()?;
        self.write_artifacts()?;
        if stage_before < Stage::Tuned && self.state.stage == Stage::Tuned && self.state.env.tables.contains_key(agents::TEST_TABLE) {
            if let Err(e) = self.finalize() {
                if let SessionError::Io(_) = e {
                    return Err(e);
                }
                self.journal.append(EventKind::Error, json!({"severity": "error", "code": e.code(), "message": e.to_string()}))?;
            }
        }
        Ok((ordinal, outcome))
    }

    /// Predicts the test table with the chosen model and writes the
    /// submission artifact. Idempotent while the env is unchanged.
    pub fn finalize(&mut self) -> Result<FinalReport, SessionError> {
        if let (Some(r), Some(v)) = (&self.state.final_report, self.finalized_version) {
            if v == self.state.env.version {
                return Ok(r.clone());
            }
        }
        let (report, bytes) = agents::finalize(&self.state)?;
        self.journal.append(
            EventKind::Finalized,
            json!({"report": report, "env_version": self.state.env.version, "submission_sha256": hex::encode(Sha256::digest(&bytes))}),
        )?;
        self.state.final_report = Some(report.clone());
        self.finalized_version = Some(self.state.env.version);
        self.submission = Some(bytes);
        self.write_artifacts()?;
        Ok(report)
    }

    pub fn report(&self) -> Value {
        match &self.state.final_report {
            Some(r) => json!({"status": "finalized", "report": r}),
            None => json!({
                "status": "in_progress",
                "stage": self.state.stage,
                "env_version": self.state.env.version,
                "tables": self
                    .state
                    .env
                    .tables
                    .values()
                    .map(|t| json!({"name": t.name, "rows": t.n_rows, "columns": t.columns.len()}))
                    .collect::<Vec<_>>(),
                "models": self.state.env.models.keys().collect::<Vec<_>>(),
                "target_column": self.state.target_column,
                "chosen_model": self.state.chosen_model,
            }),
        }
    }

    pub fn artifact_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.state.env.artifacts.keys().cloned().collect();
        if self.submission.is_some() {
            names.push(agents::SUBMISSION_ARTIFACT.into());
        }
        names
    }

    /// Artifact bytes exactly as written. Names failing the save-path rule
    /// are reported as not found.
    pub fn artifact(&self, name: &str) -> Result<&[u8], SessionError> {
        let missing = || SessionError::ArtifactNotFound(name.to_string());
        dsl::check_save_path(name).map_err(|_| missing())?;
        if name == agents::SUBMISSION_ARTIFACT {
            if let Some(b) = &self.submission {
                return Ok(b);
            }
        }
        self.state.env.artifacts.get(name).map(Vec::as_slice).ok_or_else(missing)
    }

    fn write_artifacts(&self) -> Result<(), SessionError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let base = dir.join(ARTIFACT_DIR);
        let mut files: Vec<(&str, &[u8])> = self.state.env.artifacts.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
        if let Some(b) = &self.submission {
            files.push((agents::SUBMISSION_ARTIFACT, b));
        }
        for (name, bytes) in files {
            let path = base.join(name);
            if fs::read(&path).ok().as_deref() == Some(bytes) {
                continue;
            }
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }
}

fn initial_state(options: &SessionOptions) -> SessionState {
    let mut state = SessionState::new(options.agent.clone(), options.seed);
    state.target_column = options.target.clone();
    state
}

fn attach_table(state: &mut SessionState, role: DatasetRole, table: data::Table) -> Value {
    let target = state.target_column.clone().filter(|c| role == DatasetRole::Train && table.has_column(c));
    let digest = data::profile(&table, target.as_deref()).map(|p| p.digest()).unwrap_or_default();
    let summary = json!({
        "role": role,
        "rows": table.n_rows,
        "columns": table.column_names(),
        "digest": digest,
    });
    state.env.attach(table);
    summary
}

/// Parses journal text. With `tolerate_torn`, an unparseable last line
/// without a trailing newline is dropped (reported by the flag).
pub fn parse_journal(text: &str, tolerate_torn: bool) -> Result<(Vec<JournalEvent>, bool), SessionError> {
    let mut events = Vec::new();
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut torn = false;
    for (i, raw) in lines.iter().enumerate() {
        let line = raw.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<JournalEvent>(line) {
            Ok(e) => {
                let expected = events.len() as u64 + 1;
                if e.seq != expected {
                    return Err(SessionError::Gap { expected, found: e.seq });
                }
                events.push(e);
            }
            Err(err) => {
                if tolerate_torn && i + 1 == lines.len() && !raw.ends_with('\n') {
                    torn = true;
                } else {
                    return Err(SessionError::Journal { line: i + 1, message: err.to_string() });
                }
            }
        }
    }
    if events.is_empty() {
        return Err(SessionError::Empty);
    }
    Ok((events, torn))
}

/// Result of replaying a journal.
pub struct Replayed {
    pub id: String,
    pub options: SessionOptions,
    pub state: SessionState,
    pub pending: Option<String>,
    pub submission: Option<Vec<u8>>,
    pub finalized_version: Option<u64>,
    pub instructions: u64,
    pub scripts_replayed: usize,
}

/// Rebuilds session state from events. `blob_dir` holds attached datasets.
pub fn replay(events: &[JournalEvent], blob_dir: Option<&Path>) -> Result<Replayed, SessionError> {
    let first = events.first().ok_or(SessionError::Empty)?;
    if first.kind != EventKind::SessionCreated {
        return Err(SessionError::Diverged { seq: first.seq, message: "journal does not start with session_created".into() });
    }
    let id = first.payload["session_id"].as_str().unwrap_or_default().to_string();
    let options: SessionOptions = serde_json::from_value(first.payload["options"].clone())
        .map_err(|e| SessionError::Diverged { seq: 1, message: format!("bad session options: {e}") })?;
    let mut r = Replayed {
        id,
        state: initial_state(&options),
        options,
        pending: None,
        submission: None,
        finalized_version: None,
        instructions: 0,
        scripts_replayed: 0,
    };
    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for (i, ev) in events.iter().enumerate() {
        let expected = i as u64 + 1;
        if ev.seq != expected {
            return Err(SessionError::Gap { expected, found: ev.seq });
        }
        let diverged = |message: String| SessionError::Diverged { seq: ev.seq, message };
        let p = &ev.payload;
        match ev.kind {
            EventKind::SessionCreated if i > 0 => return Err(diverged("second session_created".into())),
            EventKind::DatasetAttached => {
                let role: DatasetRole = serde_json::from_value(p["role"].clone()).map_err(|e| diverged(e.to_string()))?;
                let hash = p["blob"].as_str().ok_or_else(|| diverged("dataset_attached without blob".into()))?;
                let bytes = match blobs.get(hash) {
                    Some(b) => b.clone(),
                    None => {
                        let dir = blob_dir.ok_or_else(|| diverged("no blob directory".into()))?;
                        let path = dir.join(format!("{hash}.csv"));
                        let b = fs::read(&path).map_err(|e| io_err(&path, e))?;
                        if hex::encode(Sha256::digest(&b)) != hash {
                            return Err(diverged(format!("blob {hash} content hash mismatch")));
                        }
                        blobs.insert(hash.to_string(), b.clone());
                        b
                    }
                };
                let table = data::read_csv(&bytes, role.table_name())?;
                attach_table(&mut r.state, role, table);
            }
            EventKind::UserInstruction => {
                r.instructions += 1;
                r.pending = Some(p["text"].as_str().unwrap_or_default().to_string());
            }
            EventKind::ExecResult if p["ok"] == json!(true) => {
                let script = p["script"].as_str().ok_or_else(|| diverged("exec_result without script".into()))?;
                let limits = dsl::Limits { max_seconds: f64::INFINITY, ..r.state.config.limits() };
                let (env, report) = dsl::run_script(script, &r.state.env, &limits)
                    .map_err(|(e, _)| diverged(format!("script failed on replay: {e}")))?;
                if let Some(v) = p["report"]["version_after"].as_u64() {
                    if v != report.version_after {
                        return Err(diverged(format!("env version {} on replay, journal says {v}", report.version_after)));
                    }
                }
                r.state.env = env;
                r.scripts_replayed += 1;
            }
            EventKind::Observation => {
                if let Some(effects) = p.get("effects") {
                    let effects: agents::Effects = serde_json::from_value(effects.clone()).map_err(|e| diverged(e.to_string()))?;
                    r.state.apply_effects(&effects);
                }
            }
            EventKind::StageChange => {
                r.state.stage = serde_json::from_value(p["to"].clone()).map_err(|e| diverged(e.to_string()))?;
            }
            EventKind::UserReply => {
                let instruction = r.pending.take().ok_or_else(|| diverged("user_reply without instruction".into()))?;
                r.state.transcript.push(Exchange { instruction, reply: p["text"].as_str().unwrap_or_default().to_string() });
            }
            EventKind::Finalized => {
                let (report, bytes) = agents::finalize(&r.state)?;
                let recorded: FinalReport = serde_json::from_value(p["report"].clone()).map_err(|e| diverged(e.to_string()))?;
                if recorded != report {
                    return Err(diverged("final report differs on replay".into()));
                }
                if p["submission_sha256"].as_str() != Some(hex::encode(Sha256::digest(&bytes)).as_str()) {
                    return Err(diverged("submission bytes differ on replay".into()));
                }
                r.state.final_report = Some(report);
                r.finalized_version = Some(r.state.env.version);
                r.submission = Some(bytes);
            }
            _ => {}
        }
    }
    Ok(r)
}
