//! Coding-agent repair loop driven by scripted completions.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde_json::Value;
use tandem_core::agents::{coding_round, AgentConfig, EventKind, SessionState};
use tandem_core::data::read_csv;
use tandem_core::llm::{ChatBackend, CompletionRequest, FixtureEntry, LlmError, ScriptedBackend};
use tandem_core::ErrorCode;

struct Counting {
    inner: ScriptedBackend,
    calls: AtomicUsize,
}

impl Counting {
    fn new(responses: &[&str]) -> Self {
        let entries = responses.iter().map(|r| FixtureEntry { expect_substring: None, response: format!("```\n{r}\n```") }).collect();
        Self { inner: ScriptedBackend::new(entries), calls: AtomicUsize::new(0) }
    }
}

impl ChatBackend for Counting {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

fn state() -> SessionState {
    let mut state = SessionState::new(AgentConfig::default(), 1);
    let csv = "x,y\n1,2\n2,4.1\n3,5.9\n4,8.2\n,10\n";
    state.env.attach(read_csv(csv.as_bytes(), "train").unwrap());
    state
}

const BAD_SYNTAX: &str = "impute train.x mean";
const BAD_STATIC: &str = "impute train.nope with mean";
const BAD_RUNTIME: &str = "profile train\nsplit train into a, b ratio 1.5 seed 1";
const GOOD: &str = "impute train.x with median\ntrain linear on train target y as m";

pub fn third_attempt_succeeds_with_exactly_three_calls() {
    let mut state = state();
    let before = state.env.clone();
    let backend = Counting::new(&[BAD_SYNTAX, BAD_STATIC, GOOD]);
    let mut events: Vec<(EventKind, Value)> = Vec::new();
    let round = coding_round("Fit a linear model.", &mut state, &backend, &mut events).unwrap();

    assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    assert_eq!(round.attempts.len(), 3);
    assert!(round.attempts[..2].iter().all(|a| a.error.is_some()));
    assert!(round.attempts[2].error.is_none());
    let report = round.outcome.unwrap();
    assert!(report.succeeded());
    assert_eq!(report.version_before, before.version);
    assert!(state.env.models.contains_key("m"));

    let results: Vec<bool> = events.iter().filter(|e| e.0 == EventKind::ExecResult).map(|e| e.1["ok"].as_bool().unwrap()).collect();
    assert_eq!(results, vec![false, false, true]);
}

pub fn three_failures_exhaust_the_budget_and_keep_the_env() {
    let mut state = state();
    let before = state.env.clone();
    let backend = Counting::new(&[BAD_SYNTAX, BAD_RUNTIME, BAD_STATIC, GOOD]);
    let mut events: Vec<(EventKind, Value)> = Vec::new();
    let round = coding_round("Split the table.", &mut state, &backend, &mut events).unwrap();

    assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    assert_eq!(backend.inner.remaining(), 1);
    assert_eq!(round.attempts.len(), 3);
    assert_eq!(round.outcome.unwrap_err().code(), "E_REPAIR_EXHAUSTED");
    assert!(state.env == before);
}

pub fn repair_prompt_carries_previous_diagnostics() {
    struct Recording(std::sync::Mutex<Vec<String>>, ScriptedBackend);
    impl ChatBackend for Recording {
        fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
            let user = request.messages.last().map(|m| m.content.clone()).unwrap_or_default();
            self.0.lock().unwrap().push(user);
            self.1.complete(request)
        }
    }
    let entries = [BAD_STATIC, GOOD].iter().map(|r| FixtureEntry { expect_substring: None, response: format!("```\n{r}\n```") }).collect();
    let backend = Recording(Default::default(), ScriptedBackend::new(entries));
    let mut state = state();
    let round = coding_round("Fit.", &mut state, &backend, &mut Vec::new()).unwrap();
    assert!(round.outcome.is_ok());
    let prompts = backend.0.lock().unwrap();
    assert!(!prompts[0].contains("Attempt 1 failed"));
    assert!(prompts[1].contains("Attempt 1 failed") && prompts[1].contains("E_NO_SUCH_COLUMN"), "{}", prompts[1]);
}
