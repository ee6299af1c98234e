//! ReAct trace grammar.
//!
//! An assistant completion is either a step
//!
//! ```text
//! Thought: <one line, optional>
//! Action: <tool name>
//! Action Input: <everything up to the end of the completion>
//! ```
//!
//! or a final answer (`Final Answer: <rest of the completion>`). Markers are
//! case-sensitive and must start a line. Text before the first marker is
//! ignored. Observations are fed back as user messages of the form
//! `Observation: <text>`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ErrorCode;

pub const THOUGHT: &str = "Thought:";
pub const ACTION: &str = "Action:";
pub const ACTION_INPUT: &str = "Action Input:";
pub const FINAL_ANSWER: &str = "Final Answer:";
pub const OBSERVATION: &str = "Observation:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReactError {
    #[error("malformed completion: {0}")]
    Malformed(String),
    #[error("no tools registered")]
    NoTools,
    #[error("trace already has a final answer")]
    TraceFinalized,
    #[error("previous step has no observation yet")]
    PendingObservation,
}

impl ErrorCode for ReactError {
    fn code(&self) -> &'static str {
        match self {
            ReactError::Malformed(_) => "E_REACT_MALFORMED",
            ReactError::NoTools => "E_NO_TOOLS",
            ReactError::TraceFinalized => "E_TRACE_FINALIZED",
            ReactError::PendingObservation => "E_PENDING_OBSERVATION",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }

    /// User and assistant messages must carry non-blank content.
    pub fn is_valid(&self) -> bool {
        self.role == Role::System || !self.content.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub input_hint: String,
}

impl ToolSpec {
    pub fn new(name: &str, description: &str, input_hint: &str) -> Self {
        Self { name: name.into(), description: description.into(), input_hint: input_hint.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReactStep {
    pub thought: String,
    pub action: String,
    pub action_input: String,
}

impl ReactStep {
    /// Marker form understood by [`parse_turn`].
    pub fn serialize(&self) -> String {
        format!(
            "{THOUGHT} {}\n{ACTION} {}\n{ACTION_INPUT} {}",
            self.thought, self.action, self.action_input
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentTurn {
    Step(ReactStep),
    Final(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: ReactStep,
    pub observation: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    entries: Vec<TraceEntry>,
    final_answer: Option<String>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.final_answer.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Starts an in-flight step. The previous step must already be observed.
    pub fn begin(&mut self, step: ReactStep) -> Result<(), ReactError> {
        if self.final_answer.is_some() {
            return Err(ReactError::TraceFinalized);
        }
        if self.entries.last().is_some_and(|e| e.observation.is_none()) {
            return Err(ReactError::PendingObservation);
        }
        self.entries.push(TraceEntry { step, observation: None });
        Ok(())
    }

    /// Attaches the observation to the in-flight step.
    pub fn observe(&mut self, observation: impl Into<String>) -> Result<(), ReactError> {
        if self.final_answer.is_some() {
            return Err(ReactError::TraceFinalized);
        }
        match self.entries.last_mut() {
            Some(e) if e.observation.is_none() => {
                e.observation = Some(observation.into());
                Ok(())
            }
            _ => Err(ReactError::Malformed("no in-flight step to observe".into())),
        }
    }

    pub fn push(&mut self, step: ReactStep, observation: impl Into<String>) -> Result<(), ReactError> {
        self.begin(step)?;
        self.observe(observation)
    }

    pub fn finish(&mut self, answer: impl Into<String>) -> Result<(), ReactError> {
        if self.final_answer.is_some() {
            return Err(ReactError::TraceFinalized);
        }
        self.final_answer = Some(answer.into());
        Ok(())
    }
}

/// Parses one assistant completion. Total: never panics on any input.
pub fn parse_turn(raw: &str) -> Result<AgentTurn, ReactError> {
    let mut thought = String::new();
    let mut action: Option<String> = None;
    let mut saw_input_without_action = false;
    let mut offset = 0usize;

    for line in raw.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let body = line.trim_end_matches(['\n', '\r']);

        if body.starts_with(FINAL_ANSWER) {
            let tail = &raw[start + FINAL_ANSWER.len()..];
            return Ok(AgentTurn::Final(tail.trim().to_string()));
        }
        if body.starts_with(ACTION_INPUT) {
            match &action {
                Some(a) => {
                    let tail = &raw[start + ACTION_INPUT.len()..];
                    return Ok(AgentTurn::Step(ReactStep {
                        thought,
                        action: a.clone(),
                        action_input: tail.trim().to_string(),
                    }));
                }
                None => {
                    saw_input_without_action = true;
                    continue;
                }
            }
        }
        if let Some(rest) = body.strip_prefix(ACTION) {
            let name = rest.trim();
            if name.is_empty() {
                return Err(ReactError::Malformed("empty Action".into()));
            }
            action = Some(name.to_string());
            continue;
        }
        if let Some(rest) = body.strip_prefix(THOUGHT) {
            thought = rest.trim().to_string();
        }
    }

    let diagnostic = match (&action, saw_input_without_action) {
        (Some(_), _) => "missing Action Input",
        (None, true) => "missing Action",
        (None, false) => "missing Action or Final Answer",
    };
    Err(ReactError::Malformed(diagnostic.into()))
}

/// Deterministic system prompt: tool list in registry order, the marker
/// grammar, then the stage context.
pub fn render_system_prompt(tools: &[ToolSpec], stage_context: &str) -> Result<String, ReactError> {
    if tools.is_empty() {
        return Err(ReactError::NoTools);
    }
    let mut out = String::new();
    out.push_str("You have access to the following tools:\n\n");
    for tool in tools {
        out.push_str(&format!("- {}: {} (input: {})\n", tool.name, tool.description, tool.input_hint));
    }
    out.push_str("\nRespond in exactly one of two forms.\n\nTo use a tool:\n");
    out.push_str(&format!("{THOUGHT} <your reasoning, one line>\n{ACTION} <one of: "));
    out.push_str(&tools.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(", "));
    out.push_str(&format!(">\n{ACTION_INPUT} <input for the tool, may span several lines>\n\n"));
    out.push_str(&format!("To reply to the user:\n{FINAL_ANSWER} <your reply>\n\n"));
    out.push_str(&format!(
        "After each tool call you will receive a message starting with \"{OBSERVATION}\". Never write observations yourself.\n\n"
    ));
    out.push_str("Context:\n");
    out.push_str(stage_context);
    if !stage_context.ends_with('\n') {
        out.push('\n');
    }
    Ok(out)
}

/// `base` followed by one assistant/observation pair per trace entry.
pub fn render_history(trace: &Trace, base: &[ChatMessage]) -> Vec<ChatMessage> {
    let mut messages = base.to_vec();
    for entry in trace.entries() {
        messages.push(ChatMessage::assistant(entry.step.serialize()));
        if let Some(obs) = &entry.observation {
            messages.push(ChatMessage::user(format!("{OBSERVATION} {obs}")));
        }
    }
    messages
}
