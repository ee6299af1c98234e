//! Reasoning and Coding agents.
//!
//! The Reasoning agent runs a ReAct loop over a small tool registry and
//! answers the user; its `delegate_code` tool hands a task description to the
//! Coding agent, which writes a pipeline script, runs it and repairs it from
//! diagnostics. Every observable step is reported through an event sink so
//! sessions can journal it.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::data::{self, Column, Table, Task, TransformRecord};
use crate::dsl::{self, Env, EvalRecord, Limits};
use crate::llm::{ChatBackend, CompletionRequest, LlmError};
use crate::ml::{self, MetricKind, ModelSpec};
use crate::react::{self, AgentTurn, ChatMessage, ReactStep, ToolSpec, Trace};
use crate::ErrorCode;

pub const TRAIN_TABLE: &str = "train";
pub const TEST_TABLE: &str = "test";
pub const SUBMISSION_ARTIFACT: &str = "submission.csv";

/// The canonical four-instruction sequence.
pub const CANONICAL_INSTRUCTIONS: [&str; 4] =
    ["Explore the dataset", "Process the dataset", "Select the model", "Fine tune the parameters"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("backend error {code}: {message}")]
    Backend { code: String, message: String },
    #[error("repair attempts exhausted; last diagnostics:\n{diagnostics}")]
    RepairExhausted { diagnostics: String },
    #[error("no model to finalize: {0}")]
    NoModel(String),
    #[error("no test table attached")]
    NoTestTable,
    #[error("finalize failed: {code}: {message}")]
    Finalize { code: String, message: String },
}

impl ErrorCode for AgentError {
    fn code(&self) -> &'static str {
        match self {
            AgentError::Backend { .. } => "E_BACKEND",
            AgentError::RepairExhausted { .. } => "E_REPAIR_EXHAUSTED",
            AgentError::NoModel(_) => "E_NO_MODEL",
            AgentError::NoTestTable => "E_NO_TEST_TABLE",
            AgentError::Finalize { .. } => "E_FINALIZE",
        }
    }
}

impl From<LlmError> for AgentError {
    fn from(e: LlmError) -> Self {
        AgentError::Backend { code: e.code().to_string(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Init,
    Explored,
    Processed,
    ModelSelected,
    Tuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intent {
    Explore,
    Process,
    Select,
    Tune,
}

impl Intent {
    pub fn stage(self) -> Stage {
        match self {
            Intent::Explore => Stage::Explored,
            Intent::Process => Stage::Processed,
            Intent::Select => Stage::ModelSelected,
            Intent::Tune => Stage::Tuned,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Intent::Explore => "explore",
            Intent::Process => "process",
            Intent::Select => "select",
            Intent::Tune => "tune",
        }
    }

    fn goal(self) -> &'static str {
        match self {
            Intent::Explore => "understand the data: set the target column and profile the tables",
            Intent::Process => "make every feature numeric without missing values, on both train and test",
            Intent::Select => "train candidate models on a holdout split, compare them and choose one",
            Intent::Tune => "tune the chosen family's hyperparameters and choose the tuned model",
        }
    }
}

/// Keyword rules: a word starting with a listed stem selects the intent;
/// tune/fine beat select/model beat process/clean beat explore.
pub fn classify_by_keywords(instruction: &str) -> Option<Intent> {
    let lower = instruction.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
    let has = |stems: &[&str]| words.iter().any(|w| stems.iter().any(|s| w.starts_with(s)));
    if has(&["tune", "tuning", "fine"]) {
        Some(Intent::Tune)
    } else if has(&["select", "model"]) {
        Some(Intent::Select)
    } else if has(&["process", "clean"]) {
        Some(Intent::Process)
    } else if has(&["explor"]) {
        Some(Intent::Explore)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub max_react_steps: usize,
    pub max_repair_attempts: usize,
    pub reasoning_temperature: f64,
    pub coding_temperature: f64,
    pub observation_max_chars: usize,
    pub history_window: usize,
    pub default_tune_strategy: String,
    pub max_script_seconds: f64,
    pub max_cells: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_react_steps: 12,
            max_repair_attempts: 3,
            reasoning_temperature: 0.0,
            coding_temperature: 0.0,
            observation_max_chars: 2000,
            history_window: 20,
            default_tune_strategy: "halving".into(),
            max_script_seconds: 300.0,
            max_cells: 10_000_000,
        }
    }
}

impl AgentConfig {
    pub fn limits(&self) -> Limits {
        Limits { max_seconds: self.max_script_seconds, max_cells: self.max_cells }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SessionCreated,
    DatasetAttached,
    UserInstruction,
    Thought,
    Action,
    Observation,
    ScriptAttempt,
    ExecResult,
    StageChange,
    UserReply,
    Error,
    Finalized,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::SessionCreated => "session_created",
            EventKind::DatasetAttached => "dataset_attached",
            EventKind::UserInstruction => "user_instruction",
            EventKind::Thought => "thought",
            EventKind::Action => "action",
            EventKind::Observation => "observation",
            EventKind::ScriptAttempt => "script_attempt",
            EventKind::ExecResult => "exec_result",
            EventKind::StageChange => "stage_change",
            EventKind::UserReply => "user_reply",
            EventKind::Error => "error",
            EventKind::Finalized => "finalized",
        }
    }
}

/// Receives events as they happen.
pub trait EventSink {
    fn emit(&mut self, kind: EventKind, payload: Value);
}

impl EventSink for Vec<(EventKind, Value)> {
    fn emit(&mut self, kind: EventKind, payload: Value) {
        self.push((kind, payload));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub instruction: String,
    pub reply: String,
}

/// Side effects a tool call has on session state beyond the env.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Effects {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub stage: Stage,
    pub env: Env,
    pub trace: Trace,
    pub transcript: Vec<Exchange>,
    pub config: AgentConfig,
    pub target_column: Option<String>,
    pub chosen_model: Option<String>,
    pub final_report: Option<FinalReport>,
}

impl SessionState {
    pub fn new(config: AgentConfig, seed: u64) -> Self {
        Self {
            stage: Stage::Init,
            env: Env::new(seed),
            trace: Trace::new(),
            transcript: Vec::new(),
            config,
            target_column: None,
            chosen_model: None,
            final_report: None,
        }
    }

    pub fn apply_effects(&mut self, effects: &Effects) {
        if let Some(t) = &effects.target_column {
            self.target_column = Some(t.clone());
        }
        if let Some(m) = &effects.chosen_model {
            self.chosen_model = Some(m.clone());
        }
    }

    fn profile_digest(&self) -> String {
        match self.env.tables.get(TRAIN_TABLE) {
            Some(t) => {
                let target = self.target_column.as_deref().filter(|c| t.has_column(c));
                data::profile(t, target).map(|p| p.digest()).unwrap_or_else(|e| format!("profile failed: {e}"))
            }
            None => "no train table attached\n".into(),
        }
    }

    fn context(&self, intent: Option<Intent>) -> String {
        let mut out = format!("Current stage: {:?}\n", self.stage);
        match intent {
            Some(i) => out.push_str(&format!("Instruction intent: {} (goal: {})\n", i.name(), i.goal())),
            None => out.push_str("Instruction intent: unclassified\n"),
        }
        out.push_str(&format!("Target column: {}\n", self.target_column.as_deref().unwrap_or("(not set; use set_target)")));
        out.push_str(&format!("Chosen model: {}\n", self.chosen_model.as_deref().unwrap_or("(none)")));
        out.push_str("Use delegate_code to have the Coding agent write and run pipeline scripts; it sees the same tables.\n");
        out.push_str("\nTrain profile:\n");
        out.push_str(&self.profile_digest());
        out.push_str("\nEnvironment:\n");
        out.push_str(&self.env.describe());
        out
    }
}

pub fn tools() -> Vec<ToolSpec> {
    vec![
        ToolSpec::new("inspect", "profile digest of the train table plus tables, models and metrics so far", "empty"),
        ToolSpec::new("delegate_code", "ask the Coding agent to write and run a pipeline script for a task", "task description in plain words"),
        ToolSpec::new("read_docs", "pipeline language reference, optionally one topic", "topic keyword or empty"),
        ToolSpec::new("set_target", "record the target column of the train table", "column name"),
        ToolSpec::new("choose_model", "pick the model used for the final predictions", "model name"),
    ]
}

// ---------------------------------------------------------------------------
// Coding agent

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub script: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodingRound {
    pub outcome: Result<dsl::ExecReport, AgentError>,
    pub attempts: Vec<Attempt>,
}

/// Contents of every ``` fenced block, in order. The info string after the
/// opening fence is dropped.
pub fn extract_code_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        let fence = line.trim_start().starts_with("```");
        match (&mut current, fence) {
            (None, true) => current = Some(Vec::new()),
            (Some(lines), true) => {
                blocks.push(lines.join("\n"));
                current = None;
            }
            (Some(lines), false) => lines.push(line),
            (None, false) => {}
        }
    }
    blocks
}

fn coding_system_prompt(state: &SessionState) -> String {
    format!(
        "You are the Coding agent. Write one script in the pipeline language below, inside a single ``` fenced block. \
         Write nothing else that looks like code.\n\n{}\n\nCurrent environment:\n{}",
        dsl::reference(""),
        state.env.describe()
    )
}

/// Up to `max_repair_attempts` generate → parse → validate → execute cycles;
/// the first success commits its env into `state`.
pub fn coding_round(task: &str, state: &mut SessionState, backend: &dyn ChatBackend, sink: &mut dyn EventSink) -> Result<CodingRound, AgentError> {
    let system = coding_system_prompt(state);
    let limits = state.config.limits();
    let max_chars = state.config.observation_max_chars;
    let mut attempts: Vec<Attempt> = Vec::new();
    let mut last_diag = String::new();
    for n in 1..=state.config.max_repair_attempts {
        let mut user = format!("Task: {task}\n");
        if let Some(t) = &state.target_column {
            user.push_str(&format!("Target column: {t}\n"));
        }
        for (i, a) in attempts.iter().enumerate() {
            user.push_str(&format!("\nAttempt {} failed.\n", i + 1));
            if let Some(s) = &a.script {
                user.push_str(&format!("```\n{s}\n```\n"));
            }
            user.push_str(a.error.as_deref().unwrap_or(""));
            user.push('\n');
        }
        if !attempts.is_empty() {
            user.push_str("\nFix the script. Nothing from the failed attempts was committed.\n");
        }
        let request = CompletionRequest::new(vec![ChatMessage::system(system.clone()), ChatMessage::user(user)])
            .with_temperature(state.config.coding_temperature);
        let completion = backend.complete(&request)?;
        let blocks = extract_code_blocks(&completion);
        if blocks.len() > 1 {
            sink.emit(
                EventKind::Error,
                json!({"severity": "warning", "code": "E_MULTIPLE_CODE_BLOCKS", "message": format!("{} code blocks; using the first", blocks.len())}),
            );
        }
        let Some(script) = blocks.into_iter().next() else {
            last_diag = "ERROR E_NO_CODE_BLOCK: no fenced code block found\nhint: put the script inside ``` fences".to_string();
            sink.emit(EventKind::ScriptAttempt, json!({"attempt": n, "script": null}));
            sink.emit(EventKind::ExecResult, json!({"attempt": n, "ok": false, "code": "E_NO_CODE_BLOCK", "observation": last_diag}));
            attempts.push(Attempt { script: None, error: Some(last_diag.clone()) });
            continue;
        };
        sink.emit(EventKind::ScriptAttempt, json!({"attempt": n, "script": script}));
        match dsl::run_script(&script, &state.env, &limits) {
            Ok((env, report)) => {
                state.env = env;
                let observation = dsl::render_observation(&report, max_chars);
                sink.emit(
                    EventKind::ExecResult,
                    json!({
                        "attempt": n,
                        "ok": true,
                        "script": script,
                        "report": report,
                        "observation": observation,
                    }),
                );
                attempts.push(Attempt { script: Some(script), error: None });
                return Ok(CodingRound { outcome: Ok(report), attempts });
            }
            Err((err, report)) => {
                last_diag = dsl::render_error(&err, report.as_ref(), max_chars);
                let code = match &err {
                    dsl::DslError::Runtime { code, .. } => code.clone(),
                    dsl::DslError::Static(errors) => errors[0].code.clone(),
                    other => other.code().to_string(),
                };
                sink.emit(
                    EventKind::ExecResult,
                    json!({"attempt": n, "ok": false, "script": script, "code": code, "report": report, "observation": last_diag}),
                );
                attempts.push(Attempt { script: Some(script), error: Some(last_diag.clone()) });
            }
        }
    }
    sink.emit(
        EventKind::Error,
        json!({"severity": "error", "code": "E_REPAIR_EXHAUSTED", "message": format!("{} attempts failed", attempts.len())}),
    );
    Ok(CodingRound { outcome: Err(AgentError::RepairExhausted { diagnostics: last_diag }), attempts })
}

// ---------------------------------------------------------------------------
// Reasoning agent

struct Dispatch {
    text: String,
    effects: Effects,
    coding_ok: Option<bool>,
}

fn clean_arg(input: &str) -> &str {
    input.trim().trim_matches(['"', '\'', '`']).trim()
}

fn dispatch(
    state: &mut SessionState,
    intent: Option<Intent>,
    step: &ReactStep,
    backend: &dyn ChatBackend,
    sink: &mut dyn EventSink,
) -> Result<Dispatch, AgentError> {
    let plain = |text: String| Dispatch { text, effects: Effects::default(), coding_ok: None };
    let out = match step.action.as_str() {
        "inspect" => plain(format!("{}\n{}", state.profile_digest(), state.env.describe())),
        "read_docs" => plain(dsl::reference(clean_arg(&step.action_input))),
        "set_target" => {
            let col = clean_arg(&step.action_input);
            match state.env.tables.get(TRAIN_TABLE) {
                Some(t) if t.has_column(col) => {
                    let effects = Effects { target_column: Some(col.to_string()), chosen_model: None };
                    let task = Task::of_column(t.column(col).expect("checked"));
                    state.apply_effects(&effects);
                    Dispatch { text: format!("target column set to {col} ({task})"), effects, coding_ok: None }
                }
                Some(t) => plain(format!("no column {col:?} in train; columns: {}", t.column_names().join(", "))),
                None => plain("no train table attached".into()),
            }
        }
        "choose_model" => {
            let name = clean_arg(&step.action_input);
            if state.env.models.contains_key(name) {
                let effects = Effects { target_column: None, chosen_model: Some(name.to_string()) };
                state.apply_effects(&effects);
                let m = &state.env.models[name].model;
                Dispatch { text: format!("chosen model: {name} = {}", m.spec), effects, coding_ok: None }
            } else {
                let known: Vec<&String> = state.env.models.keys().collect();
                plain(format!("unknown model {name:?}; models: {known:?}"))
            }
        }
        "delegate_code" => {
            let needs_target = matches!(intent, Some(Intent::Select | Intent::Tune));
            if needs_target && state.target_column.is_none() {
                plain("set the target column with set_target before training or tuning".into())
            } else {
                let round = coding_round(&step.action_input, state, backend, sink)?;
                let n = round.attempts.len();
                match round.outcome {
                    Ok(report) => Dispatch {
                        text: format!(
                            "script succeeded after {n} attempt(s)\n{}",
                            dsl::render_observation(&report, state.config.observation_max_chars)
                        ),
                        effects: Effects::default(),
                        coding_ok: Some(true),
                    },
                    Err(e) => Dispatch {
                        text: format!("{}: {e}", e.code()),
                        effects: Effects::default(),
                        coding_ok: Some(false),
                    },
                }
            }
        }
        other => plain(format!(
            "unknown tool {other}; available: {}",
            tools().iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(", ")
        )),
    };
    Ok(out)
}

fn base_messages(state: &SessionState, system: String, instruction: &str) -> Vec<ChatMessage> {
    let mut messages = vec![ChatMessage::system(system)];
    let window = state.config.history_window;
    let split = state.transcript.len().saturating_sub(window);
    if split > 0 {
        let mut summary = String::from("Earlier exchanges (summarized):\n");
        for ex in &state.transcript[..split] {
            let reply: String = ex.reply.chars().take(80).collect();
            summary.push_str(&format!("- {} -> {}\n", ex.instruction, reply));
        }
        messages.push(ChatMessage::user(summary));
        messages.push(ChatMessage::assistant(format!("{} noted.", react::FINAL_ANSWER)));
    }
    for ex in &state.transcript[split..] {
        messages.push(ChatMessage::user(ex.instruction.clone()));
        messages.push(ChatMessage::assistant(format!("{} {}", react::FINAL_ANSWER, ex.reply)));
    }
    messages.push(ChatMessage::user(instruction.to_string()));
    messages
}

const FORMAT_REMINDER: &str = "Your reply did not follow the required format. Reply with either\n\
Thought: ...\nAction: <tool>\nAction Input: ...\nor\nFinal Answer: ...";

fn classify_with_llm(instruction: &str, state: &SessionState, backend: &dyn ChatBackend) -> Result<Option<Intent>, AgentError> {
    let request = CompletionRequest::new(vec![
        ChatMessage::system(
            "Classify the user's instruction for an AutoML assistant. Answer with exactly one word: explore, process, select, tune or other.",
        ),
        ChatMessage::user(format!("Instruction: {instruction}")),
    ])
    .with_temperature(state.config.reasoning_temperature);
    let answer = backend.complete(&request)?.to_lowercase();
    let first = answer.split(|c: char| !c.is_alphabetic()).find(|w| !w.is_empty()).unwrap_or("");
    Ok(match first {
        "explore" => Some(Intent::Explore),
        "process" => Some(Intent::Process),
        "select" => Some(Intent::Select),
        "tune" => Some(Intent::Tune),
        _ => None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionOutcome {
    pub reply: String,
    pub intent: Option<Intent>,
    pub stage_before: Stage,
    pub stage_after: Stage,
    pub llm_calls_budgeted: usize,
}

/// Handles one user instruction end to end. Backend failures abort the
/// instruction; everything committed before the failure stays committed.
pub fn handle_instruction(
    state: &mut SessionState,
    instruction: &str,
    backend: &dyn ChatBackend,
    sink: &mut dyn EventSink,
) -> Result<InstructionOutcome, AgentError> {
    let stage_before = state.stage;
    sink.emit(EventKind::UserInstruction, json!({"text": instruction}));
    state.trace = Trace::new();

    if !state.env.tables.contains_key(TRAIN_TABLE) {
        let reply = "Please attach a training dataset first (role train); I need data before I can help.".to_string();
        finish_instruction(state, instruction, &reply, None, sink);
        return Ok(InstructionOutcome { reply, intent: None, stage_before, stage_after: state.stage, llm_calls_budgeted: 0 });
    }

    let mut steps_left = state.config.max_react_steps;
    let intent = match classify_by_keywords(instruction) {
        Some(i) => Some(i),
        None => {
            steps_left = steps_left.saturating_sub(1);
            let i = classify_with_llm(instruction, state, backend)?;
            sink.emit(
                EventKind::Thought,
                json!({"source": "intent_classifier", "text": format!("intent: {}", i.map_or("other", Intent::name))}),
            );
            i
        }
    };
    if let Some(i) = intent {
        let expected_next = match state.stage {
            Stage::Init => Stage::Explored,
            Stage::Explored => Stage::Processed,
            Stage::Processed => Stage::ModelSelected,
            Stage::ModelSelected | Stage::Tuned => Stage::Tuned,
        };
        if i.stage() > expected_next {
            sink.emit(
                EventKind::Error,
                json!({
                    "severity": "warning",
                    "code": "E_OUT_OF_ORDER",
                    "message": format!("{} requested at stage {:?}; earlier steps were skipped", i.name(), state.stage),
                }),
            );
        }
    }

    let system = react::render_system_prompt(&tools(), &state.context(intent)).expect("tool registry is non-empty");
    let mut messages = base_messages(state, system, instruction);
    let mut final_answer: Option<String> = None;
    let mut last_coding_ok: Option<bool> = None;
    let mut last_observation = String::new();

    for _ in 0..steps_left {
        let request = CompletionRequest::new(messages.clone()).with_temperature(state.config.reasoning_temperature);
        let completion = backend.complete(&request)?;
        match react::parse_turn(&completion) {
            Ok(AgentTurn::Final(answer)) => {
                state.trace.finish(answer.clone()).expect("fresh trace");
                final_answer = Some(answer);
                break;
            }
            Ok(AgentTurn::Step(step)) => {
                if !step.thought.is_empty() {
                    sink.emit(EventKind::Thought, json!({"text": step.thought}));
                }
                sink.emit(EventKind::Action, json!({"tool": step.action, "input": step.action_input}));
                let d = dispatch(state, intent, &step, backend, sink)?;
                if d.coding_ok.is_some() {
                    last_coding_ok = d.coding_ok;
                }
                let mut payload = json!({"tool": step.action, "text": d.text});
                if d.effects != Effects::default() {
                    payload["effects"] = serde_json::to_value(&d.effects).expect("serializable");
                }
                sink.emit(EventKind::Observation, payload);
                messages.push(ChatMessage::assistant(step.serialize()));
                messages.push(ChatMessage::user(format!("{} {}", react::OBSERVATION, d.text)));
                last_observation = d.text.clone();
                state.trace.push(step, d.text).expect("trace accepts steps before final");
            }
            Err(e) => {
                sink.emit(EventKind::Error, json!({"severity": "warning", "code": e.code(), "message": e.to_string()}));
                messages.push(ChatMessage::assistant(if completion.trim().is_empty() { "(empty)".into() } else { completion }));
                messages.push(ChatMessage::user(FORMAT_REMINDER));
            }
        }
    }

    let reply = match &final_answer {
        Some(a) => a.clone(),
        None => {
            sink.emit(
                EventKind::Error,
                json!({"severity": "soft", "code": "E_STEP_BUDGET", "message": format!("no final answer within {} steps", state.config.max_react_steps)}),
            );
            let progress: String = last_observation.lines().take(3).collect::<Vec<_>>().join(" | ");
            format!(
                "Sorry, I ran out of reasoning steps before finishing this instruction. Progress so far: {}",
                if progress.is_empty() { "nothing yet".into() } else { progress }
            )
        }
    };

    if let (Some(i), Some(_)) = (intent, &final_answer) {
        if last_coding_ok != Some(false) && i.stage() > state.stage {
            let from = state.stage;
            state.stage = i.stage();
            sink.emit(EventKind::StageChange, json!({"from": from, "to": state.stage}));
        }
    }
    finish_instruction(state, instruction, &reply, intent, sink);
    Ok(InstructionOutcome {
        reply,
        intent,
        stage_before,
        stage_after: state.stage,
        llm_calls_budgeted: state.config.max_react_steps * (1 + state.config.max_repair_attempts),
    })
}

fn finish_instruction(state: &mut SessionState, instruction: &str, reply: &str, intent: Option<Intent>, sink: &mut dyn EventSink) {
    sink.emit(
        EventKind::UserReply,
        json!({"text": reply, "intent": intent.map(Intent::name), "stage": state.stage}),
    );
    state.transcript.push(Exchange { instruction: instruction.to_string(), reply: reply.to_string() });
}

// ---------------------------------------------------------------------------
// Finalization

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSummary {
    pub metric: String,
    pub best_score: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub model: String,
    pub spec: ModelSpec,
    pub task: Task,
    pub target: String,
    pub trained_on: String,
    pub metrics: Vec<EvalRecord>,
    pub tune: Option<TuneSummary>,
    pub lineage: Vec<TransformRecord>,
    pub fallback_used: bool,
    pub artifact: String,
    pub rows: usize,
}

/// Best model by the most recent metric kind among evaluations (tie: earliest).
fn fallback_model(env: &Env) -> Option<String> {
    let kind = env.evaluations.iter().rev().find(|e| env.models.contains_key(&e.model))?.metric;
    let mut best: Option<&EvalRecord> = None;
    for e in env.evaluations.iter().filter(|e| e.metric == kind && env.models.contains_key(&e.model)) {
        if best.is_none_or(|b| kind.direction().better(e.score, b.score)) {
            best = Some(e);
        }
    }
    best.map(|e| e.model.clone())
}

fn finalize_error<E: ErrorCode + std::fmt::Display>(e: &E) -> AgentError {
    AgentError::Finalize { code: e.code().to_string(), message: e.to_string() }
}

/// Predicts `table` (projected onto the model's features) and returns the
/// `id` column (copied, or row indices) with the predictions.
pub fn predict_table(model: &ml::TrainedModel, table: &Table) -> Result<(Column, ml::Predictions), AgentError> {
    let mut cols: Vec<Column> = Vec::with_capacity(model.feature_schema.len());
    for f in &model.feature_schema {
        let c = table.column(&f.name).map_err(|e| AgentError::Finalize {
            code: e.code().to_string(),
            message: format!("{} lacks feature {:?}", table.name, f.name),
        })?;
        cols.push(c.clone());
    }
    let features = Table::new("features", cols).map_err(|e| finalize_error(&e))?;
    let preds = ml::predict(model, &features).map_err(|e| finalize_error(&e))?;
    let id = match table.column("id") {
        Ok(c) => Column { name: "id".into(), data: c.data.clone() },
        Err(_) => Column::numeric("id", (0..table.n_rows).map(|i| Some(i as f64)).collect()),
    };
    Ok((id, preds))
}

/// Predicts the test table with exactly one model; returns the report and
/// the submission CSV (`id,prediction`).
pub fn finalize(state: &SessionState) -> Result<(FinalReport, Vec<u8>), AgentError> {
    let test = state.env.tables.get(TEST_TABLE).ok_or(AgentError::NoTestTable)?;
    let (name, fallback_used) = match &state.chosen_model {
        Some(m) if state.env.models.contains_key(m) => (m.clone(), false),
        _ => (
            fallback_model(&state.env).ok_or_else(|| AgentError::NoModel("no chosen model and no evaluated models".into()))?,
            true,
        ),
    };
    let record = &state.env.models[&name];
    let model = &record.model;
    let (ids, preds) = predict_table(model, test)?;
    let submission = Table::new("submission", vec![ids, preds.export_column()]).map_err(|e| finalize_error(&e))?;

    let lineage = state.env.tables.get(&record.trained_on).map(|t| t.lineage.clone()).unwrap_or_default();
    let report = FinalReport {
        model: name.clone(),
        spec: model.spec.clone(),
        task: model.task,
        target: model.target.clone(),
        trained_on: record.trained_on.clone(),
        metrics: state.env.evaluations.iter().filter(|e| e.model == name).cloned().collect(),
        tune: record.tune.as_ref().map(|t| TuneSummary { metric: t.metric.clone(), best_score: t.best_score, trials: t.history.len() }),
        lineage,
        fallback_used,
        artifact: SUBMISSION_ARTIFACT.into(),
        rows: submission.n_rows,
    };
    Ok((report, submission.to_csv()))
}

/// Metric used to compare against the reference pool for a target column.
pub fn default_metric(task: Task) -> MetricKind {
    match task {
        Task::Regression => MetricKind::Rmse,
        Task::BinaryClassification => MetricKind::Auc,
        Task::MulticlassClassification => MetricKind::Accuracy,
    }
}
