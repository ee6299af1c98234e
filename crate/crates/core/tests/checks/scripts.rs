//! Randomized script checks, one seed per case.

use tandem_core::dsl::{self, DslError, Limits, Outcome, Stmt, StmtKind};
use tandem_core::fuzz;
use tandem_core::rng::SplitMix64;

/// Runtime codes that mean the validator let through a reference or name
/// problem it could have caught.
const STRUCTURAL: &[&str] = &[
    "E_UNDEFINED_TABLE",
    "E_UNDEFINED_MODEL",
    "E_NO_SUCH_COLUMN",
    "E_UNKNOWN_FAMILY",
    "E_UNKNOWN_METRIC",
    "E_UNKNOWN_STRATEGY",
    "E_INVALID_PATH",
    "E_NAME_EXISTS",
];

fn renumber(kinds: impl IntoIterator<Item = StmtKind>) -> Vec<Stmt> {
    kinds.into_iter().enumerate().map(|(i, kind)| Stmt { line: i + 1, kind }).collect()
}

pub fn render_parse_round_trip(seed: u64) -> Result<(), String> {
    let statements = fuzz::random_statements(&mut SplitMix64::new(seed), 12);
    let source = dsl::render_source(&statements);
    let parsed = dsl::parse(&source).map_err(|e| format!("{e}\n{source}"))?;
    if parsed.statements != statements {
        return Err(format!("parse differs from the generated statements\n{source}"));
    }
    if dsl::render_source(&parsed.statements) != source {
        return Err(format!("rendering is not stable\n{source}"));
    }
    Ok(())
}

pub fn failing_statement_leaves_env_unchanged(seed: u64) -> Result<(), String> {
    let case = fuzz::failing_case(&mut SplitMix64::new(seed), 12);
    let source = &case.script.source;
    let (after, report) = dsl::execute(&case.script, &case.env, &Limits::default());
    if after != case.env {
        return Err(format!("env changed\n{source}"));
    }
    if !report.saved.is_empty() || report.version_after != report.version_before {
        return Err(format!("failed script saved files or bumped the version\n{source}"));
    }
    match report.error() {
        Some(DslError::Runtime { line, .. }) if line == case.failing_line => {}
        other => return Err(format!("expected a runtime error on line {}, got {other:?}\n{source}", case.failing_line)),
    }
    let (last, earlier) = report.entries.split_last().ok_or("no entries")?;
    if !earlier.iter().all(|e| matches!(e.outcome, Outcome::Ok { .. })) || !matches!(last.outcome, Outcome::Error { .. }) {
        return Err(format!("entries do not end at the failing statement\n{source}"));
    }
    Ok(())
}

/// `Ok(false)` when the case has no valid prefix to check.
pub fn validator_accepts_valid_prefix_and_is_sound(seed: u64) -> Result<bool, String> {
    let case = fuzz::failing_case(&mut SplitMix64::new(seed), 12);
    let summary = case.env.summary();

    // Without the injected statement the script is valid and runs.
    let kinds: Vec<_> = case.script.statements.iter().filter(|s| s.line != case.failing_line).map(|s| s.kind.clone()).collect();
    if kinds.is_empty() {
        return Ok(false);
    }
    let valid = dsl::parse(&dsl::render_source(&renumber(kinds))).map_err(|e| e.to_string())?;
    let errors = dsl::validate(&valid, &summary);
    if !errors.is_empty() {
        return Err(format!("{errors:?}\n{}", valid.source));
    }
    let (_, report) = dsl::execute(&valid, &case.env, &Limits::default());
    if !report.succeeded() {
        return Err(format!("{:?}\n{}", report.error(), valid.source));
    }

    // With it, anything the validator accepts fails only for data reasons.
    if dsl::validate(&case.script, &summary).is_empty() {
        let (_, report) = dsl::execute(&case.script, &case.env, &Limits::default());
        if let Some(DslError::Runtime { code, .. }) = report.error() {
            if STRUCTURAL.contains(&code.as_str()) {
                return Err(format!("validator missed {code}\n{}", case.script.source));
            }
        }
    }
    Ok(true)
}
