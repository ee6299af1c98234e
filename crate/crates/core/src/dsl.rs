//! The pipeline language written by the Coding agent.
//!
//! One statement per line, `#` starts a comment, keywords are case-sensitive.
//! Scripts are parsed, statically validated against a summary of the current
//! environment, then executed transactionally: either every statement
//! succeeds and the working copy replaces the environment, or the
//! environment is returned untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, CellValue, ClipMethod, Column, ColumnType, ImputeStrategy, ScaleKind, Table, Task};
use crate::ml::{self, Dim, Family, HyperValue, MetricKind, MlError, ModelSpec, Objective, SearchSpace, TrainedModel, TuneResult};
use crate::ErrorCode;

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticError {
    pub line: usize,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DslError {
    #[error("line {line}, column {col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("{} static error(s), first: line {}: {}", .0.len(), .0[0].line, .0[0].message)]
    Static(Vec<StaticError>),
    #[error("line {line}: {code}: {message}")]
    Runtime { line: usize, code: String, message: String },
    #[error("line {line}: {message}")]
    Budget { line: usize, message: String },
}

impl ErrorCode for DslError {
    fn code(&self) -> &'static str {
        match self {
            DslError::Syntax { .. } => "E_DSL_SYNTAX",
            DslError::Static(_) => "E_STATIC",
            DslError::Runtime { .. } => "E_RUNTIME",
            DslError::Budget { .. } => "E_BUDGET",
        }
    }
}

fn syntax(line: usize, col: usize, expected: &str, found: &str) -> DslError {
    DslError::Syntax { line, col, message: format!("expected {expected}, found {found}") }
}

// ---------------------------------------------------------------------------
// AST

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Literal {
    Int(i64),
    Float(f64),
    Str(String),
}

impl Literal {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Literal::Int(i) => Some(*i as f64),
            Literal::Float(x) => Some(*x),
            Literal::Str(_) => None,
        }
    }

    fn to_hyper(&self) -> HyperValue {
        match self {
            Literal::Int(i) => HyperValue::Int(*i),
            Literal::Float(x) => HyperValue::Real(*x),
            Literal::Str(s) => HyperValue::Text(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColRef {
    pub table: String,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ImputeWith {
    Mean,
    Median,
    Mode,
    Constant(Literal),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ClipSpec {
    Iqr(Option<Literal>),
    Zscore(Literal),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DimKind {
    Uniform,
    LogUniform,
    Int,
    Choice,
}

impl DimKind {
    fn keyword(self) -> &'static str {
        match self {
            DimKind::Uniform => "uniform",
            DimKind::LogUniform => "loguniform",
            DimKind::Int => "int",
            DimKind::Choice => "choice",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimSpec {
    pub name: String,
    pub kind: DimKind,
    pub args: Vec<Literal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StmtKind {
    Profile { table: String },
    Impute { col: ColRef, with: ImputeWith },
    Onehot { col: ColRef, max_card: Option<i64> },
    Scale { col: ColRef, kind: ScaleKind },
    ClipOutliers { col: ColRef, method: ClipSpec },
    Drop { col: ColRef },
    SelectFeatures { table: String, target: String, top: i64 },
    Split { table: String, first: String, second: String, ratio: Literal, seed: i64 },
    Train { family: String, table: String, target: String, params: Vec<(String, Literal)>, out: String },
    Evaluate { model: String, table: String, metric: String },
    Tune {
        family: String,
        table: String,
        target: String,
        metric: String,
        budget: i64,
        cv: Option<i64>,
        strategy: Option<String>,
        space: Vec<DimSpec>,
        out: String,
    },
    Predict { model: String, table: String, out: String },
    Save { table: String, path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stmt {
    pub line: usize,
    pub kind: StmtKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub statements: Vec<Stmt>,
    pub source: String,
}

// ---------------------------------------------------------------------------
// Lexer

const PUNCT: &[char] = &[',', '{', '}', '(', ')', ':'];

fn is_word_char(c: char) -> bool {
    !c.is_whitespace() && !c.is_control() && !PUNCT.contains(&c) && c != '"' && c != '#'
}

fn is_ident(s: &str) -> bool {
    data::is_identifier(s)
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Word(String),
    Str(String),
    Punct(char),
}

#[derive(Debug, Clone)]
struct Tok {
    kind: TokKind,
    col: usize,
    end: usize,
}

impl Tok {
    fn describe(&self) -> String {
        match &self.kind {
            TokKind::Word(w) => format!("{w:?}"),
            TokKind::Str(s) => format!("string {s:?}"),
            TokKind::Punct(c) => format!("\"{c}\""),
        }
    }
}

fn lex_line(line: usize, text: &str) -> Result<Vec<Tok>, DslError> {
    let chars: Vec<char> = text.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '#' {
            break;
        } else if PUNCT.contains(&c) {
            toks.push(Tok { kind: TokKind::Punct(c), col: i + 1, end: i + 2 });
            i += 1;
        } else if c == '"' {
            let start = i;
            let mut s = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None => return Err(syntax(line, start + 1, "closing '\"'", "end of line")),
                    Some('"') => break,
                    Some('\\') => {
                        let esc = match chars.get(i + 1) {
                            Some('"') => '"',
                            Some('\\') => '\\',
                            Some('n') => '\n',
                            Some('t') => '\t',
                            Some('r') => '\r',
                            other => {
                                let found = other.map_or("end of line".to_string(), |c| format!("\"\\{c}\""));
                                return Err(syntax(line, i + 1, "escape sequence", &found));
                            }
                        };
                        s.push(esc);
                        i += 2;
                    }
                    Some(&ch) => {
                        s.push(ch);
                        i += 1;
                    }
                }
            }
            i += 1;
            toks.push(Tok { kind: TokKind::Str(s), col: start + 1, end: i + 1 });
        } else if is_word_char(c) {
            let start = i;
            while i < chars.len() && is_word_char(chars[i]) {
                i += 1;
            }
            toks.push(Tok { kind: TokKind::Word(chars[start..i].iter().collect()), col: start + 1, end: i + 1 });
        } else {
            return Err(syntax(line, i + 1, "a token", &format!("{c:?}")));
        }
    }
    Ok(toks)
}

fn number_literal(w: &str) -> Option<Literal> {
    let first = w.chars().next()?;
    let numeric_chars = w.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '+' | '-'));
    if !(first.is_ascii_digit() || matches!(first, '-' | '+' | '.')) || !numeric_chars || !w.chars().any(|c| c.is_ascii_digit()) {
        return None;
    }
    if let Ok(i) = w.parse::<i64>() {
        return Some(Literal::Int(i));
    }
    w.parse::<f64>().ok().filter(|x| x.is_finite()).map(Literal::Float)
}

// ---------------------------------------------------------------------------
// Parser

struct Cursor {
    toks: Vec<Tok>,
    pos: usize,
    line: usize,
    eol: usize,
}

impl Cursor {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn fail<T>(&self, expected: &str) -> Result<T, DslError> {
        match self.peek() {
            Some(t) => Err(syntax(self.line, t.col, expected, &t.describe())),
            None => Err(syntax(self.line, self.eol, expected, "end of line")),
        }
    }

    fn peek_word(&self) -> Option<&str> {
        match self.peek() {
            Some(Tok { kind: TokKind::Word(w), .. }) => Some(w),
            _ => None,
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), DslError> {
        if self.peek_word() == Some(kw) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(&format!("\"{kw}\""))
        }
    }

    fn one_of(&mut self, options: &[&str]) -> Result<String, DslError> {
        match self.peek_word() {
            Some(w) if options.contains(&w) => {
                let w = w.to_string();
                self.pos += 1;
                Ok(w)
            }
            _ => self.fail(&options.iter().map(|o| format!("\"{o}\"")).collect::<Vec<_>>().join(" or ")),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, DslError> {
        match self.peek_word() {
            Some(w) if is_ident(w) => {
                let w = w.to_string();
                self.pos += 1;
                Ok(w)
            }
            _ => self.fail(what),
        }
    }

    fn punct(&mut self, c: char) -> Result<(), DslError> {
        match self.peek() {
            Some(Tok { kind: TokKind::Punct(p), .. }) if *p == c => {
                self.pos += 1;
                Ok(())
            }
            _ => self.fail(&format!("\"{c}\"")),
        }
    }

    fn is_punct(&self, c: char) -> bool {
        matches!(self.peek(), Some(Tok { kind: TokKind::Punct(p), .. }) if *p == c)
    }

    /// A string token starting exactly where the previous token ended.
    fn adjacent_str(&mut self) -> Option<String> {
        let prev_end = self.toks.get(self.pos.checked_sub(1)?)?.end;
        match self.peek() {
            Some(Tok { kind: TokKind::Str(s), col, .. }) if *col == prev_end => {
                let s = s.clone();
                self.pos += 1;
                Some(s)
            }
            _ => None,
        }
    }

    fn colref(&mut self) -> Result<ColRef, DslError> {
        let expected = "a column reference table.column";
        let Some(w) = self.peek_word().map(str::to_string) else {
            return self.fail(expected);
        };
        let Some((table, column)) = w.split_once('.') else {
            return self.fail(expected);
        };
        if !is_ident(table) {
            return self.fail(expected);
        }
        self.pos += 1;
        if column.is_empty() {
            return match self.adjacent_str() {
                Some(s) => Ok(ColRef { table: table.to_string(), column: s }),
                None => self.fail("a column name after \".\""),
            };
        }
        Ok(ColRef { table: table.to_string(), column: column.to_string() })
    }

    fn column(&mut self) -> Result<String, DslError> {
        match self.peek() {
            Some(Tok { kind: TokKind::Word(w), .. }) | Some(Tok { kind: TokKind::Str(w), .. }) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => self.fail("a column name"),
        }
    }

    fn literal(&mut self) -> Result<Literal, DslError> {
        match self.peek() {
            Some(Tok { kind: TokKind::Word(w), .. }) => {
                let lit = number_literal(w).unwrap_or_else(|| Literal::Str(w.clone()));
                self.pos += 1;
                Ok(lit)
            }
            Some(Tok { kind: TokKind::Str(s), .. }) => {
                let lit = Literal::Str(s.clone());
                self.pos += 1;
                Ok(lit)
            }
            _ => self.fail("a literal"),
        }
    }

    fn number(&mut self) -> Result<Literal, DslError> {
        match self.peek_word().and_then(number_literal) {
            Some(lit) => {
                self.pos += 1;
                Ok(lit)
            }
            None => self.fail("a number"),
        }
    }

    fn int(&mut self) -> Result<i64, DslError> {
        match self.peek_word().and_then(number_literal) {
            Some(Literal::Int(i)) => {
                self.pos += 1;
                Ok(i)
            }
            _ => self.fail("an integer"),
        }
    }

    fn end(&self) -> Result<(), DslError> {
        match self.peek() {
            None => Ok(()),
            Some(_) => self.fail("end of line"),
        }
    }
}

pub const STATEMENT_KEYWORDS: &[&str] = &[
    "profile",
    "impute",
    "onehot",
    "scale",
    "clip_outliers",
    "drop",
    "select_features",
    "split",
    "train",
    "evaluate",
    "tune",
    "predict",
    "save",
];

fn parse_params(c: &mut Cursor) -> Result<Vec<(String, Literal)>, DslError> {
    let mut params = Vec::new();
    while let Some(w) = c.peek_word() {
        if w == "as" {
            break;
        }
        let Some((key, value)) = w.split_once('=') else {
            return c.fail("key=value or \"as\"");
        };
        if !is_ident(key) {
            return c.fail("key=value or \"as\"");
        }
        let (key, value) = (key.to_string(), value.to_string());
        c.pos += 1;
        let lit = if value.is_empty() {
            match c.adjacent_str() {
                Some(s) => Literal::Str(s),
                None => return c.fail("a value after \"=\""),
            }
        } else {
            number_literal(&value).unwrap_or(Literal::Str(value))
        };
        params.push((key, lit));
    }
    Ok(params)
}

fn parse_space(c: &mut Cursor) -> Result<Vec<DimSpec>, DslError> {
    c.punct('{')?;
    let mut dims = Vec::new();
    if c.is_punct('}') {
        c.pos += 1;
        return Ok(dims);
    }
    loop {
        let name = c.ident("a hyperparameter name")?;
        c.punct(':')?;
        let kind = match c.one_of(&["uniform", "loguniform", "int", "choice"])?.as_str() {
            "uniform" => DimKind::Uniform,
            "loguniform" => DimKind::LogUniform,
            "int" => DimKind::Int,
            _ => DimKind::Choice,
        };
        c.punct('(')?;
        let mut args = vec![c.literal()?];
        while c.is_punct(',') {
            c.pos += 1;
            args.push(c.literal()?);
        }
        c.punct(')')?;
        dims.push(DimSpec { name, kind, args });
        if c.is_punct(',') {
            c.pos += 1;
        } else {
            c.punct('}')?;
            return Ok(dims);
        }
    }
}

fn parse_stmt(c: &mut Cursor) -> Result<StmtKind, DslError> {
    let kw = c.one_of(STATEMENT_KEYWORDS).or_else(|_| c.fail("a statement keyword (profile, impute, onehot, scale, clip_outliers, drop, select_features, split, train, evaluate, tune, predict, save)"))?;
    let kind = match kw.as_str() {
        "profile" => StmtKind::Profile { table: c.ident("a table name")? },
        "impute" => {
            let col = c.colref()?;
            c.keyword("with")?;
            let with = match c.one_of(&["mean", "median", "mode", "constant"])?.as_str() {
                "mean" => ImputeWith::Mean,
                "median" => ImputeWith::Median,
                "mode" => ImputeWith::Mode,
                _ => ImputeWith::Constant(c.literal()?),
            };
            StmtKind::Impute { col, with }
        }
        "onehot" => {
            let col = c.colref()?;
            let max_card = if c.peek_word() == Some("max") {
                c.pos += 1;
                Some(c.int()?)
            } else {
                None
            };
            StmtKind::Onehot { col, max_card }
        }
        "scale" => {
            let col = c.colref()?;
            let kind = if c.one_of(&["standard", "minmax"])? == "standard" { ScaleKind::Standard } else { ScaleKind::Minmax };
            StmtKind::Scale { col, kind }
        }
        "clip_outliers" => {
            let col = c.colref()?;
            let method = if c.one_of(&["iqr", "zscore"])? == "iqr" {
                ClipSpec::Iqr(if c.peek().is_some() { Some(c.number()?) } else { None })
            } else {
                ClipSpec::Zscore(c.number()?)
            };
            StmtKind::ClipOutliers { col, method }
        }
        "drop" => StmtKind::Drop { col: c.colref()? },
        "select_features" => {
            let table = c.ident("a table name")?;
            c.keyword("target")?;
            let target = c.column()?;
            c.keyword("top")?;
            StmtKind::SelectFeatures { table, target, top: c.int()? }
        }
        "split" => {
            let table = c.ident("a table name")?;
            c.keyword("into")?;
            let first = c.ident("a table name")?;
            c.punct(',')?;
            let second = c.ident("a table name")?;
            c.keyword("ratio")?;
            let ratio = c.number()?;
            c.keyword("seed")?;
            StmtKind::Split { table, first, second, ratio, seed: c.int()? }
        }
        "train" => {
            let family = c.ident("a model family")?;
            c.keyword("on")?;
            let table = c.ident("a table name")?;
            c.keyword("target")?;
            let target = c.column()?;
            let params = parse_params(c)?;
            c.keyword("as")?;
            StmtKind::Train { family, table, target, params, out: c.ident("a model name")? }
        }
        "evaluate" => {
            let model = c.ident("a model name")?;
            c.keyword("on")?;
            let table = c.ident("a table name")?;
            c.keyword("metric")?;
            StmtKind::Evaluate { model, table, metric: c.ident("a metric name")? }
        }
        "tune" => {
            let family = c.ident("a model family")?;
            c.keyword("on")?;
            let table = c.ident("a table name")?;
            c.keyword("target")?;
            let target = c.column()?;
            c.keyword("metric")?;
            let metric = c.ident("a metric name")?;
            c.keyword("budget")?;
            let budget = c.int()?;
            let cv = if c.peek_word() == Some("cv") {
                c.pos += 1;
                Some(c.int()?)
            } else {
                None
            };
            let strategy = if c.peek_word() == Some("strategy") {
                c.pos += 1;
                Some(c.ident("a strategy name")?)
            } else {
                None
            };
            c.keyword("space")?;
            let space = parse_space(c)?;
            c.keyword("as")?;
            StmtKind::Tune { family, table, target, metric, budget, cv, strategy, space, out: c.ident("a model name")? }
        }
        "predict" => {
            let model = c.ident("a model name")?;
            c.keyword("on")?;
            let table = c.ident("a table name")?;
            c.keyword("as")?;
            StmtKind::Predict { model, table, out: c.ident("a table name")? }
        }
        _ => {
            let table = c.ident("a table name")?;
            let path = match c.peek() {
                Some(Tok { kind: TokKind::Str(s), .. }) => s.clone(),
                _ => return c.fail("a quoted path"),
            };
            c.pos += 1;
            StmtKind::Save { table, path }
        }
    };
    c.end()?;
    Ok(kind)
}

pub fn parse(source: &str) -> Result<Script, DslError> {
    let mut statements = Vec::new();
    for (i, text) in source.lines().enumerate() {
        let line = i + 1;
        let toks = lex_line(line, text)?;
        if toks.is_empty() {
            continue;
        }
        let mut c = Cursor { toks, pos: 0, line, eol: text.chars().count() + 1 };
        statements.push(Stmt { line, kind: parse_stmt(&mut c)? });
    }
    if statements.is_empty() {
        return Err(syntax(source.lines().count().max(1), 1, "at least one statement", "end of input"));
    }
    Ok(Script { statements, source: source.to_string() })
}

// ---------------------------------------------------------------------------
// Canonical rendering

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn bare_ok(s: &str) -> bool {
    !s.is_empty() && s.chars().all(is_word_char)
}

fn render_column(s: &str) -> String {
    if bare_ok(s) { s.to_string() } else { quote(s) }
}

fn render_colref(c: &ColRef) -> String {
    if bare_ok(&c.column) { format!("{}.{}", c.table, c.column) } else { format!("{}.{}", c.table, quote(&c.column)) }
}

fn render_literal(l: &Literal) -> String {
    match l {
        Literal::Int(i) => i.to_string(),
        Literal::Float(x) => format!("{x:?}"),
        Literal::Str(s) => quote(s),
    }
}

pub fn render_stmt(kind: &StmtKind) -> String {
    match kind {
        StmtKind::Profile { table } => format!("profile {table}"),
        StmtKind::Impute { col, with } => {
            let w = match with {
                ImputeWith::Mean => "mean".to_string(),
                ImputeWith::Median => "median".to_string(),
                ImputeWith::Mode => "mode".to_string(),
                ImputeWith::Constant(l) => format!("constant {}", render_literal(l)),
            };
            format!("impute {} with {w}", render_colref(col))
        }
        StmtKind::Onehot { col, max_card } => match max_card {
            Some(k) => format!("onehot {} max {k}", render_colref(col)),
            None => format!("onehot {}", render_colref(col)),
        },
        StmtKind::Scale { col, kind } => {
            format!("scale {} {}", render_colref(col), if *kind == ScaleKind::Standard { "standard" } else { "minmax" })
        }
        StmtKind::ClipOutliers { col, method } => {
            let m = match method {
                ClipSpec::Iqr(None) => "iqr".to_string(),
                ClipSpec::Iqr(Some(k)) => format!("iqr {}", render_literal(k)),
                ClipSpec::Zscore(k) => format!("zscore {}", render_literal(k)),
            };
            format!("clip_outliers {} {m}", render_colref(col))
        }
        StmtKind::Drop { col } => format!("drop {}", render_colref(col)),
        StmtKind::SelectFeatures { table, target, top } => {
            format!("select_features {table} target {} top {top}", render_column(target))
        }
        StmtKind::Split { table, first, second, ratio, seed } => {
            format!("split {table} into {first}, {second} ratio {} seed {seed}", render_literal(ratio))
        }
        StmtKind::Train { family, table, target, params, out } => {
            let mut s = format!("train {family} on {table} target {}", render_column(target));
            for (k, v) in params {
                s.push_str(&format!(" {k}={}", render_literal(v)));
            }
            s.push_str(&format!(" as {out}"));
            s
        }
        StmtKind::Evaluate { model, table, metric } => format!("evaluate {model} on {table} metric {metric}"),
        StmtKind::Tune { family, table, target, metric, budget, cv, strategy, space, out } => {
            let mut s = format!("tune {family} on {table} target {} metric {metric} budget {budget}", render_column(target));
            if let Some(k) = cv {
                s.push_str(&format!(" cv {k}"));
            }
            if let Some(st) = strategy {
                s.push_str(&format!(" strategy {st}"));
            }
            let dims: Vec<String> = space
                .iter()
                .map(|d| {
                    let args: Vec<String> = d.args.iter().map(render_literal).collect();
                    format!("{}: {}({})", d.name, d.kind.keyword(), args.join(", "))
                })
                .collect();
            if dims.is_empty() {
                s.push_str(" space {}");
            } else {
                s.push_str(&format!(" space {{ {} }}", dims.join(", ")));
            }
            s.push_str(&format!(" as {out}"));
            s
        }
        StmtKind::Predict { model, table, out } => format!("predict {model} on {table} as {out}"),
        StmtKind::Save { table, path } => format!("save {table} {}", quote(path)),
    }
}

/// Canonical source: one rendered statement per line.
pub fn render_source(statements: &[Stmt]) -> String {
    let mut out = String::new();
    for s in statements {
        out.push_str(&render_stmt(&s.kind));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Environment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub table: String,
    pub metric: MetricKind,
    pub score: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    pub model: TrainedModel,
    pub trained_on: String,
    pub tune: Option<TuneResult>,
}

/// Named tables and models plus everything the interpreter produced.
#[derive(Debug, Clone)]
pub struct Env {
    pub tables: BTreeMap<String, Table>,
    pub models: BTreeMap<String, ModelRecord>,
    pub evaluations: Vec<EvalRecord>,
    pub last_results: Vec<String>,
    /// Bytes written by `save`, keyed by relative path.
    pub artifacts: BTreeMap<String, Vec<u8>>,
    pub seed: u64,
    pub version: u64,
    /// Seconds spent executing scripts; not part of equality.
    pub budget_used: f64,
}

impl PartialEq for Env {
    fn eq(&self, other: &Self) -> bool {
        self.tables == other.tables
            && self.models == other.models
            && self.evaluations == other.evaluations
            && self.last_results == other.last_results
            && self.artifacts == other.artifacts
            && self.seed == other.seed
            && self.version == other.version
    }
}

impl Env {
    pub fn new(seed: u64) -> Self {
        Self {
            tables: BTreeMap::new(),
            models: BTreeMap::new(),
            evaluations: Vec::new(),
            last_results: Vec::new(),
            artifacts: BTreeMap::new(),
            seed,
            version: 0,
            budget_used: 0.0,
        }
    }

    /// Adds an externally loaded table (dataset attachment).
    pub fn attach(&mut self, table: Table) {
        self.tables.insert(table.name.clone(), table);
        self.version += 1;
    }

    pub fn summary(&self) -> EnvSummary {
        EnvSummary {
            tables: self.tables.iter().map(|(k, t)| (k.clone(), TableSummary::of(t))).collect(),
            models: self
                .models
                .iter()
                .map(|(k, m)| {
                    let predicts = Some(m.model.task);
                    (k.clone(), ModelSummary { target: m.model.target.clone(), predicts })
                })
                .collect(),
        }
    }

    /// Human-readable overview for prompts and the `inspect` tool.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        if self.tables.is_empty() {
            out.push_str("tables: none\n");
        }
        for (name, t) in &self.tables {
            let cols: Vec<String> = t.columns.iter().map(|c| format!("{}:{}", c.name, c.ctype())).collect();
            let mut listing = cols.join(", ");
            if listing.chars().count() > 400 {
                listing = listing.chars().take(400).collect::<String>() + " ...";
            }
            out.push_str(&format!("table {name}: {} rows x {} columns [{listing}]\n", t.n_rows, t.columns.len()));
        }
        if self.models.is_empty() {
            out.push_str("models: none\n");
        }
        for (name, m) in &self.models {
            out.push_str(&format!(
                "model {name}: {} trained on {} target {} ({})",
                m.model.spec, m.trained_on, m.model.target, m.model.task
            ));
            if let Some(t) = &m.tune {
                out.push_str(&format!(", tuned {}={:.4}", t.metric, t.best_score));
            }
            out.push('\n');
        }
        for e in &self.evaluations {
            out.push_str(&format!("eval {} on {}: {}={:.4} n={}\n", e.model, e.table, e.metric, e.score, e.n));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Static validation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub name: String,
    pub ctype: ColumnType,
    /// Exact distinct count when known.
    pub distinct: Option<usize>,
    /// Exact category set when known.
    pub categories: Option<BTreeSet<String>>,
    pub missing: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    /// Columns known to exist, in order.
    pub columns: Vec<ColumnSummary>,
    /// Whether further columns of unknown name may exist.
    pub uncertain: bool,
}

impl TableSummary {
    pub fn of(t: &Table) -> Self {
        let columns = t
            .columns
            .iter()
            .map(|c| ColumnSummary {
                name: c.name.clone(),
                ctype: c.ctype(),
                distinct: Some(c.distinct_count()),
                categories: (c.ctype() != ColumnType::Numeric).then(|| c.distinct_values()),
                missing: Some(c.missing_count() > 0),
            })
            .collect();
        Self { columns, uncertain: false }
    }

    fn get(&self, name: &str) -> Option<&ColumnSummary> {
        self.columns.iter().find(|c| c.name == name)
    }

    fn get_mut(&mut self, name: &str) -> Option<&mut ColumnSummary> {
        self.columns.iter_mut().find(|c| c.name == name)
    }

    fn task_of(&self, target: &str) -> Option<Task> {
        let c = self.get(target)?;
        c.distinct.map(|d| Task::infer(c.ctype, d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub target: String,
    /// Kind of predictions the model emits, when known.
    pub predicts: Option<Task>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvSummary {
    pub tables: BTreeMap<String, TableSummary>,
    pub models: BTreeMap<String, ModelSummary>,
}

struct Validator {
    env: EnvSummary,
    errors: Vec<StaticError>,
    line: usize,
}

impl Validator {
    fn err(&mut self, code: &str, message: String) {
        self.errors.push(StaticError { line: self.line, code: code.to_string(), message });
    }

    fn table(&mut self, name: &str) -> Option<TableSummary> {
        let t = self.env.tables.get(name).cloned();
        if t.is_none() {
            let known: Vec<&String> = self.env.tables.keys().collect();
            self.err("E_UNDEFINED_TABLE", format!("table {name:?} is not defined (tables: {known:?})"));
        }
        t
    }

    fn model(&mut self, name: &str) -> Option<ModelSummary> {
        let m = self.env.models.get(name).cloned();
        if m.is_none() {
            let known: Vec<&String> = self.env.models.keys().collect();
            self.err("E_UNDEFINED_MODEL", format!("model {name:?} is not defined (models: {known:?})"));
        }
        m
    }

    fn column(&mut self, table_name: &str, t: &TableSummary, column: &str) -> Option<ColumnSummary> {
        if let Some(c) = t.get(column) {
            return Some(c.clone());
        }
        let mut names: Vec<&str> = t.columns.iter().map(|c| c.name.as_str()).collect();
        if names.len() > 30 {
            names.truncate(30);
            names.push("...");
        }
        let msg = if t.uncertain {
            format!("column {column:?} of {table_name} may not exist (onehot/select_features outputs depend on the data); known columns: {names:?}")
        } else {
            format!("table {table_name} has no column {column:?}; columns: {names:?}")
        };
        self.err("E_NO_SUCH_COLUMN", msg);
        None
    }

    fn colref(&mut self, c: &ColRef) -> Option<(TableSummary, ColumnSummary)> {
        let t = self.table(&c.table)?;
        let col = self.column(&c.table, &t, &c.column)?;
        Some((t, col))
    }

    fn update(&mut self, table: &str, f: impl FnOnce(&mut TableSummary)) {
        if let Some(t) = self.env.tables.get_mut(table) {
            f(t);
        }
    }

    fn family(&mut self, name: &str) -> Option<Family> {
        let f = Family::parse(name);
        if f.is_none() {
            self.err("E_UNKNOWN_FAMILY", format!("unknown family {name:?}; use baseline, linear, logistic or tree"));
        }
        f
    }

    fn metric(&mut self, name: &str) -> Option<MetricKind> {
        let m = MetricKind::parse(name);
        if m.is_none() {
            self.err("E_UNKNOWN_METRIC", format!("unknown metric {name:?}; use rmse, mae, accuracy, logloss or auc"));
        }
        m
    }

    fn fresh_name(&mut self, name: &str) {
        if self.env.tables.contains_key(name) {
            self.err("E_NAME_EXISTS", format!("table {name:?} already exists; pick a new name"));
        }
    }

    fn check_metric(&mut self, metric: MetricKind, predicts: Option<Task>, truth: Option<Task>) {
        let reason = match metric {
            MetricKind::Rmse | MetricKind::Mae => {
                predicts.filter(|t| t.is_classification()).map(|t| format!("{metric} needs a regression model, this one is {t}"))
            }
            MetricKind::Accuracy => {
                (predicts == Some(Task::Regression)).then(|| format!("{metric} needs a classification model"))
            }
            MetricKind::Auc | MetricKind::Logloss => match (truth, predicts) {
                (Some(t), _) if t != Task::BinaryClassification => Some(format!("{metric} needs a binary target, target is {t}")),
                (_, Some(Task::MulticlassClassification)) => Some(format!("{metric} needs a binary model")),
                _ => None,
            },
        };
        if let Some(r) = reason {
            self.err("E_METRIC_TASK_MISMATCH", r);
        }
    }

    fn predicts(family: Family, t: &TableSummary, target: &str) -> Option<Task> {
        match family {
            Family::Linear => Some(Task::Regression),
            Family::Logistic => t.task_of(target).filter(|k| k.is_classification()),
            Family::Baseline | Family::Tree => t.task_of(target),
        }
    }

    fn params(&mut self, family: Option<Family>, keys: &[&str]) {
        let mut seen = BTreeSet::new();
        for k in keys {
            if !seen.insert(*k) {
                self.err("E_DUPLICATE_PARAM", format!("hyperparameter {k} given twice"));
            }
            if let Some(f) = family {
                if !f.hyperparams().contains(k) {
                    self.err(
                        "E_UNKNOWN_HYPERPARAM",
                        format!("{f} has no hyperparameter {k}; valid: {}", f.hyperparams().join(", ")),
                    );
                }
            }
        }
    }

    fn range(&mut self, ok: bool, message: String) {
        if !ok {
            self.err("E_INVALID_LITERAL", message);
        }
    }

    fn dim(&mut self, d: &DimSpec) {
        let nums: Vec<Option<f64>> = d.args.iter().map(Literal::as_f64).collect();
        match d.kind {
            DimKind::Uniform | DimKind::LogUniform => match nums.as_slice() {
                [Some(lo), Some(hi)] if lo < hi && (d.kind == DimKind::Uniform || *lo > 0.0) => {}
                _ => self.err(
                    "E_INVALID_LITERAL",
                    format!("{}: {}(lo, hi) needs two numbers with {}lo < hi", d.name, d.kind.keyword(), if d.kind == DimKind::LogUniform { "0 < " } else { "" }),
                ),
            },
            DimKind::Int => match d.args.as_slice() {
                [Literal::Int(lo), Literal::Int(hi)] if lo < hi => {}
                _ => self.err("E_INVALID_LITERAL", format!("{}: int(lo, hi) needs two integers with lo < hi", d.name)),
            },
            DimKind::Choice => {}
        }
    }

    fn stmt(&mut self, kind: &StmtKind) {
        match kind {
            StmtKind::Profile { table } => {
                self.table(table);
            }
            StmtKind::Impute { col, with } => {
                if let Some((_, c)) = self.colref(col) {
                    let constant = match with {
                        ImputeWith::Constant(l) => Some(match l {
                            Literal::Str(s) => s.clone(),
                            other => data::format_number(other.as_f64().expect("numeric")),
                        }),
                        _ => None,
                    };
                    self.update(&col.table, |t| {
                        let s = t.get_mut(&c.name).expect("checked");
                        if s.missing != Some(false) {
                            s.distinct = None;
                        }
                        if let Some(v) = constant {
                            s.categories = match (s.missing, s.categories.take()) {
                                (Some(false), cats) => cats,
                                (Some(true), Some(mut cats)) => {
                                    cats.insert(v);
                                    Some(cats)
                                }
                                _ => None,
                            };
                        }
                        s.missing = Some(false);
                    });
                }
            }
            StmtKind::Onehot { col, max_card } => {
                let k = max_card.unwrap_or(data::DEFAULT_MAX_CARD as i64);
                self.range(k >= 1, format!("onehot max must be >= 1, got {k}"));
                if let Some((_, c)) = self.colref(col) {
                    self.update(&col.table, |t| {
                        let idx = t.columns.iter().position(|x| x.name == c.name).expect("checked");
                        t.columns.remove(idx);
                        match &c.categories {
                            Some(cats) if cats.len() as i64 <= k => {
                                let new = cats.iter().map(|v| ColumnSummary {
                                    name: format!("{}={v}", c.name),
                                    ctype: ColumnType::Numeric,
                                    distinct: None,
                                    categories: None,
                                    missing: Some(false),
                                });
                                t.columns.splice(idx..idx, new);
                            }
                            _ => t.uncertain = true,
                        }
                    });
                }
            }
            StmtKind::Scale { col, .. } => {
                self.colref(col);
            }
            StmtKind::ClipOutliers { col, method } => {
                let k = match method {
                    ClipSpec::Iqr(k) => k.as_ref().and_then(Literal::as_f64).unwrap_or(data::DEFAULT_IQR_K),
                    ClipSpec::Zscore(k) => k.as_f64().unwrap_or(f64::NAN),
                };
                self.range(k >= 0.0, format!("clip factor must be >= 0, got {k}"));
                if self.colref(col).is_some() {
                    self.update(&col.table, |t| t.get_mut(&col.column).expect("checked").distinct = None);
                }
            }
            StmtKind::Drop { col } => {
                if self.colref(col).is_some() {
                    self.update(&col.table, |t| t.columns.retain(|c| c.name != col.column));
                }
            }
            StmtKind::SelectFeatures { table, target, top } => {
                self.range(*top >= 1, format!("top must be >= 1, got {top}"));
                if let Some(t) = self.table(table) {
                    if self.column(table, &t, target).is_some() {
                        let numeric = t.columns.iter().filter(|c| c.name != *target && c.ctype == ColumnType::Numeric).count();
                        if t.uncertain || numeric as i64 > *top {
                            self.update(table, |t| {
                                t.columns.retain(|c| c.name == *target || c.ctype != ColumnType::Numeric);
                                t.uncertain = true;
                            });
                        }
                    }
                }
            }
            StmtKind::Split { table, first, second, ratio, seed } => {
                let r = ratio.as_f64().unwrap_or(f64::NAN);
                self.range(r > 0.0 && r < 1.0, format!("ratio must be in (0, 1), got {r}"));
                self.range(*seed >= 0, format!("seed must be >= 0, got {seed}"));
                if first == second {
                    self.err("E_NAME_EXISTS", format!("split outputs must differ, both are {first:?}"));
                }
                self.fresh_name(first);
                self.fresh_name(second);
                if let Some(mut t) = self.table(table) {
                    for c in &mut t.columns {
                        c.distinct = None;
                        c.categories = None;
                        c.missing = c.missing.filter(|m| !m);
                    }
                    self.env.tables.insert(first.clone(), t.clone());
                    self.env.tables.insert(second.clone(), t);
                }
            }
            StmtKind::Train { family, table, target, params, out } => {
                let f = self.family(family);
                let keys: Vec<&str> = params.iter().map(|p| p.0.as_str()).collect();
                self.params(f, &keys);
                let mut predicts = None;
                if let Some(t) = self.table(table) {
                    if self.column(table, &t, target).is_some() {
                        predicts = f.and_then(|f| Self::predicts(f, &t, target));
                    }
                }
                self.env.models.insert(out.clone(), ModelSummary { target: target.clone(), predicts });
            }
            StmtKind::Evaluate { model, table, metric } => {
                let m = self.model(model);
                let k = self.metric(metric);
                if let (Some(t), Some(m)) = (self.table(table), m) {
                    if self.column(table, &t, &m.target).is_some() {
                        if let Some(k) = k {
                            self.check_metric(k, m.predicts, t.task_of(&m.target));
                        }
                    }
                }
            }
            StmtKind::Tune { family, table, target, metric, budget, cv, strategy, space, out } => {
                let f = self.family(family);
                let k = self.metric(metric);
                self.range(*budget >= 1, format!("budget must be >= 1, got {budget}"));
                if let Some(cv) = cv {
                    self.range(*cv >= 2, format!("cv must be >= 2, got {cv}"));
                }
                match strategy.as_deref() {
                    None | Some("halving") => self.range(*budget >= 2, format!("strategy halving needs budget >= 2, got {budget}")),
                    Some("random") => {}
                    Some(other) => self.err("E_UNKNOWN_STRATEGY", format!("unknown strategy {other:?}; use random or halving")),
                }
                let keys: Vec<&str> = space.iter().map(|d| d.name.as_str()).collect();
                self.params(f, &keys);
                for d in space {
                    self.dim(d);
                }
                let mut predicts = None;
                if let Some(t) = self.table(table) {
                    if self.column(table, &t, target).is_some() {
                        predicts = f.and_then(|f| Self::predicts(f, &t, target));
                        if let Some(k) = k {
                            self.check_metric(k, predicts, t.task_of(target));
                        }
                    }
                }
                self.env.models.insert(out.clone(), ModelSummary { target: target.clone(), predicts });
            }
            StmtKind::Predict { model, table, out } => {
                let m = self.model(model);
                if let Some(t) = self.table(table) {
                    let id = t.get("id").map(|c| c.ctype).unwrap_or(ColumnType::Numeric);
                    let pred = match m.and_then(|m| m.predicts) {
                        Some(Task::MulticlassClassification) => ColumnType::Categorical,
                        _ => ColumnType::Numeric,
                    };
                    let col = |name: &str, ctype| ColumnSummary { name: name.into(), ctype, distinct: None, categories: None, missing: None };
                    self.env.tables.insert(out.clone(), TableSummary { columns: vec![col("id", id), col("prediction", pred)], uncertain: false });
                }
            }
            StmtKind::Save { table, path } => {
                self.table(table);
                if let Err(reason) = check_save_path(path) {
                    self.err("E_INVALID_PATH", reason);
                }
            }
        }
    }
}

/// Save paths are relative, non-empty and never climb out of the artifact directory.
pub fn check_save_path(path: &str) -> Result<(), String> {
    if path.is_empty() {
        return Err("save path is empty".into());
    }
    if path.starts_with('/') || path.starts_with('\\') || path.contains(':') {
        return Err(format!("save path {path:?} must be relative"));
    }
    if path.split(['/', '\\']).any(|seg| seg == ".." || seg.is_empty()) {
        return Err(format!("save path {path:?} must not contain \"..\" or empty segments"));
    }
    Ok(())
}

/// Static errors in statement order; empty means the script may run.
pub fn validate(script: &Script, summary: &EnvSummary) -> Vec<StaticError> {
    let mut v = Validator { env: summary.clone(), errors: Vec::new(), line: 0 };
    for s in &script.statements {
        v.line = s.line;
        v.stmt(&s.kind);
    }
    v.errors
}

// ---------------------------------------------------------------------------
// Execution

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Limits {
    pub max_seconds: f64,
    pub max_cells: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_seconds: 300.0, max_cells: 10_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum Outcome {
    Ok { result: String },
    Error { code: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecEntry {
    pub line: usize,
    pub statement: String,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    pub entries: Vec<ExecEntry>,
    pub version_before: u64,
    pub version_after: u64,
    /// Artifact paths written by `save`.
    pub saved: Vec<String>,
    #[serde(skip)]
    pub elapsed: f64,
}

impl ExecReport {
    pub fn succeeded(&self) -> bool {
        self.error().is_none()
    }

    pub fn error(&self) -> Option<DslError> {
        self.entries.last().and_then(|e| match &e.outcome {
            Outcome::Error { code, message } if code == "E_BUDGET" => Some(DslError::Budget { line: e.line, message: message.clone() }),
            Outcome::Error { code, message } => Some(DslError::Runtime { line: e.line, code: code.clone(), message: message.clone() }),
            Outcome::Ok { .. } => None,
        })
    }
}

struct Failure {
    code: String,
    message: String,
}

impl<E: ErrorCode + std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: e.code().to_string(), message: e.to_string() }
    }
}

fn missing(kind: &str, name: &str) -> Failure {
    let code = if kind == "model" { "E_UNDEFINED_MODEL" } else { "E_UNDEFINED_TABLE" };
    Failure { code: code.into(), message: format!("{kind} {name:?} is not defined") }
}

struct Interp<'a> {
    env: Env,
    deadline: Instant,
    limits: &'a Limits,
    saved: Vec<String>,
}

impl Interp<'_> {
    fn table(&self, name: &str) -> Result<&Table, Failure> {
        self.env.tables.get(name).ok_or_else(|| missing("table", name))
    }

    fn model(&self, name: &str) -> Result<&ModelRecord, Failure> {
        self.env.models.get(name).ok_or_else(|| missing("model", name))
    }

    fn transform(&mut self, table: &str, f: impl FnOnce(&Table) -> Result<Table, data::DataError>) -> Result<&Table, Failure> {
        let t = f(self.table(table)?)?;
        self.env.tables.insert(table.to_string(), t);
        Ok(&self.env.tables[table])
    }

    fn run(&mut self, kind: &StmtKind) -> Result<String, Failure> {
        match kind {
            StmtKind::Profile { table } => {
                let p = data::profile(self.table(table)?, None)?;
                Ok(p.digest().trim_end().lines().map(str::trim).collect::<Vec<_>>().join("; "))
            }
            StmtKind::Impute { col, with } => {
                let strategy = match with {
                    ImputeWith::Mean => ImputeStrategy::Mean,
                    ImputeWith::Median => ImputeStrategy::Median,
                    ImputeWith::Mode => ImputeStrategy::Mode,
                    ImputeWith::Constant(Literal::Str(s)) => ImputeStrategy::Constant(CellValue::Text(s.clone())),
                    ImputeWith::Constant(l) => ImputeStrategy::Constant(CellValue::Number(l.as_f64().expect("numeric"))),
                };
                let before = self.table(&col.table)?.column(&col.column)?;
                let filled = before.missing_count();
                let value = data::impute_value(before, &strategy)?;
                self.transform(&col.table, |t| data::impute(t, &col.column, &strategy))?;
                Ok(format!("{}.{}: filled {filled} missing with {value}", col.table, col.column))
            }
            StmtKind::Onehot { col, max_card } => {
                let k = max_card.unwrap_or(data::DEFAULT_MAX_CARD as i64);
                let k = usize::try_from(k).map_err(|_| Failure { code: "E_INVALID_ARGUMENT".into(), message: format!("max {k} must be positive") })?;
                let before: BTreeSet<String> = self.table(&col.table)?.column_names().into_iter().map(String::from).collect();
                let t = self.transform(&col.table, |t| data::onehot(t, &col.column, k))?;
                let added: Vec<&str> = t.column_names().into_iter().filter(|n| !before.contains(*n)).collect();
                Ok(format!("{}.{} -> {} columns: {}", col.table, col.column, added.len(), added.join(", ")))
            }
            StmtKind::Scale { col, kind } => {
                self.transform(&col.table, |t| data::scale(t, &col.column, *kind))?;
                let name = if *kind == ScaleKind::Standard { "standard" } else { "minmax" };
                Ok(format!("{}.{} scaled ({name})", col.table, col.column))
            }
            StmtKind::ClipOutliers { col, method } => {
                let method = match method {
                    ClipSpec::Iqr(k) => ClipMethod::Iqr(k.as_ref().and_then(Literal::as_f64).unwrap_or(data::DEFAULT_IQR_K)),
                    ClipSpec::Zscore(k) => ClipMethod::Zscore(k.as_f64().expect("numeric")),
                };
                let before = self.table(&col.table)?.column(&col.column)?.clone();
                let t = self.transform(&col.table, |t| data::clip_outliers(t, &col.column, method))?;
                let after = t.column(&col.column)?;
                let changed = (0..after.len()).filter(|&r| after.cell_text(r) != before.cell_text(r)).count();
                Ok(format!("{}.{}: clipped {changed} values", col.table, col.column))
            }
            StmtKind::Drop { col } => {
                self.transform(&col.table, |t| data::drop_column(t, &col.column))?;
                Ok(format!("{}.{} dropped", col.table, col.column))
            }
            StmtKind::SelectFeatures { table, target, top } => {
                let k = usize::try_from(*top).unwrap_or(0);
                let t = self.transform(table, |t| data::select_features(t, target, k))?;
                let dropped = &t.lineage.last().expect("transform recorded").affected_columns;
                let kept: Vec<&str> = t.column_names().into_iter().filter(|c| c != target).collect();
                Ok(format!("{table}: kept {}; dropped {}", kept.join(", "), if dropped.is_empty() { "none".into() } else { dropped.join(", ") }))
            }
            StmtKind::Split { table, first, second, ratio, seed } => {
                for name in [first, second] {
                    if self.env.tables.contains_key(name) {
                        return Err(Failure { code: "E_NAME_EXISTS".into(), message: format!("table {name:?} already exists") });
                    }
                }
                let (a, b) = data::split(self.table(table)?, ratio.as_f64().unwrap_or(f64::NAN), *seed as u64, first, second)?;
                let msg = format!("{first}: {} rows, {second}: {} rows", a.n_rows, b.n_rows);
                self.env.tables.insert(first.clone(), a);
                self.env.tables.insert(second.clone(), b);
                Ok(msg)
            }
            StmtKind::Train { family, table, target, params, out } => {
                let family = Family::parse(family).ok_or_else(|| Failure { code: "E_UNKNOWN_FAMILY".into(), message: family.clone() })?;
                let mut spec = ModelSpec::new(family);
                for (k, v) in params {
                    spec.hyperparams.insert(k.clone(), v.to_hyper());
                }
                let model = ml::train(&spec, self.table(table)?, target)?;
                let msg = format!(
                    "{out} = {spec} on {table} target {target} ({}, {} rows, {} features)",
                    model.task,
                    model.train_rows,
                    model.feature_schema.len()
                );
                self.env.models.insert(out.clone(), ModelRecord { model, trained_on: table.clone(), tune: None });
                Ok(msg)
            }
            StmtKind::Evaluate { model, table, metric } => {
                let kind = MetricKind::parse(metric).ok_or_else(|| Failure { code: "E_UNKNOWN_METRIC".into(), message: metric.clone() })?;
                let t = self.table(table)?;
                let score = ml::evaluate(&self.model(model)?.model, t, kind)?;
                let n = t.n_rows;
                self.env.evaluations.push(EvalRecord { model: model.clone(), table: table.clone(), metric: kind, score, n });
                Ok(format!("{metric}={score:.4} n={n}"))
            }
            StmtKind::Tune { family, table, target, metric, budget, cv, strategy, space, out } => self.tune(TuneArgs {
                family,
                table,
                target,
                metric,
                budget: *budget,
                cv: *cv,
                strategy: strategy.as_deref().unwrap_or("halving"),
                space,
                out,
            }),
            StmtKind::Predict { model, table, out } => {
                let t = self.table(table)?;
                let record = self.model(model)?;
                let preds = ml::predict(&record.model, t)?;
                let id = match t.column("id") {
                    Ok(c) => Column { name: "id".into(), data: c.data.clone() },
                    Err(_) => Column::numeric("id", (0..t.n_rows).map(|i| Some(i as f64)).collect()),
                };
                let n = preds.len();
                let p = Table::new(out, vec![id, preds.export_column()])?;
                self.env.tables.insert(out.clone(), p);
                Ok(format!("{out}: {n} predictions from {model}"))
            }
            StmtKind::Save { table, path } => {
                check_save_path(path).map_err(|m| Failure { code: "E_INVALID_PATH".into(), message: m })?;
                let bytes = self.table(table)?.to_csv();
                let n = bytes.len();
                self.env.artifacts.insert(path.clone(), bytes);
                self.saved.push(path.clone());
                Ok(format!("saved {table} to {path:?} ({n} bytes)"))
            }
        }
    }

    fn tune(&mut self, a: TuneArgs<'_>) -> Result<String, Failure> {
        let family = Family::parse(a.family).ok_or_else(|| Failure { code: "E_UNKNOWN_FAMILY".into(), message: a.family.into() })?;
        let metric = MetricKind::parse(a.metric).ok_or_else(|| Failure { code: "E_UNKNOWN_METRIC".into(), message: a.metric.into() })?;
        let mut dims = BTreeMap::new();
        for d in a.space {
            let num = |i: usize| d.args.get(i).and_then(Literal::as_f64).unwrap_or(f64::NAN);
            let dim = match d.kind {
                DimKind::Uniform => Dim::Uniform(num(0), num(1)),
                DimKind::LogUniform => Dim::LogUniform(num(0), num(1)),
                DimKind::Int => Dim::IntRange(num(0) as i64, num(1) as i64),
                DimKind::Choice => Dim::Choice(d.args.iter().map(Literal::to_hyper).collect()),
            };
            dims.insert(d.name.clone(), dim);
        }
        let space = SearchSpace { dims };
        let base = ModelSpec::new(family);
        let table = self.table(a.table)?.clone();
        let seed = self.env.seed;
        let objective = Objective::from_metric(metric);
        let deadline = self.deadline;
        let holdout = if a.cv.is_none() { Some(data::split(&table, 0.8, seed, "tune_train", "tune_valid")?) } else { None };
        let evaluate = |spec: &ModelSpec, fraction: f64| -> Result<f64, MlError> {
            if Instant::now() > deadline {
                return Err(MlError::Budget("script time limit reached during tune".into()));
            }
            match (&holdout, a.cv) {
                (_, Some(k)) => ml::kfold_cv_at(spec, &table, a.target, k.max(0) as usize, metric, seed, fraction).map(|r| r.mean),
                (Some((tr, va)), None) => {
                    let rows: Vec<usize> = (0..ml::resource_rows(tr.n_rows, fraction)).collect();
                    let sub = tr.take_rows("tune_train", &rows)?;
                    let m = ml::train(spec, &sub, a.target)?;
                    ml::evaluate(&m, va, metric)
                }
                (None, None) => unreachable!(),
            }
        };
        let budget = a.budget.max(0) as usize;
        let result = match a.strategy {
            "random" => ml::random_search(&base, &space, budget, seed, &objective, |s| evaluate(s, 1.0))?,
            "halving" => ml::successive_halving(&base, &space, budget, 2, seed, &objective, evaluate)?,
            other => return Err(Failure { code: "E_UNKNOWN_STRATEGY".into(), message: other.into() }),
        };
        let model = ml::train(&result.best, &table, a.target)?;
        let msg = format!(
            "{} = {} best {}={:.4} over {} trials ({})",
            a.out,
            result.best,
            result.metric,
            result.best_score,
            result.history.len(),
            a.strategy
        );
        self.env.models.insert(a.out.to_string(), ModelRecord { model, trained_on: a.table.to_string(), tune: Some(result) });
        Ok(msg)
    }

    fn check_limits(&self) -> Result<(), Failure> {
        if let Some(t) = self.env.tables.values().find(|t| t.cells() > self.limits.max_cells) {
            return Err(Failure {
                code: "E_BUDGET".into(),
                message: format!("table {} has {} cells, limit {}", t.name, t.cells(), self.limits.max_cells),
            });
        }
        if Instant::now() > self.deadline {
            return Err(Failure { code: "E_BUDGET".into(), message: format!("script exceeded {} s", self.limits.max_seconds) });
        }
        Ok(())
    }
}

struct TuneArgs<'a> {
    family: &'a str,
    table: &'a str,
    target: &'a str,
    metric: &'a str,
    budget: i64,
    cv: Option<i64>,
    strategy: &'a str,
    space: &'a [DimSpec],
    out: &'a str,
}

/// Runs a validated script against a working copy of `env`. On failure the
/// returned env equals the input (apart from `budget_used`).
pub fn execute(script: &Script, env: &Env, limits: &Limits) -> (Env, ExecReport) {
    let start = Instant::now();
    let deadline = start + std::time::Duration::from_secs_f64(limits.max_seconds.clamp(0.0, 1e9));
    let mut it = Interp { env: env.clone(), deadline, limits, saved: Vec::new() };
    let mut entries = Vec::with_capacity(script.statements.len());
    let mut results = Vec::new();
    let mut failed = false;
    for s in &script.statements {
        let statement = render_stmt(&s.kind);
        let outcome = it.run(&s.kind).and_then(|r| it.check_limits().map(|_| r));
        match outcome {
            Ok(result) => {
                if !matches!(s.kind, StmtKind::Profile { .. }) {
                    it.env.version += 1;
                }
                results.push(result.clone());
                entries.push(ExecEntry { line: s.line, statement, outcome: Outcome::Ok { result } });
            }
            Err(f) => {
                entries.push(ExecEntry { line: s.line, statement, outcome: Outcome::Error { code: f.code, message: f.message } });
                failed = true;
                break;
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let mut out = if failed {
        it.saved.clear();
        env.clone()
    } else {
        it.env.last_results = results;
        it.env
    };
    out.budget_used = env.budget_used + elapsed;
    let report = ExecReport { entries, version_before: env.version, version_after: out.version, saved: it.saved, elapsed };
    (out, report)
}

/// parse, validate against `env`, execute.
pub fn run_script(source: &str, env: &Env, limits: &Limits) -> Result<(Env, ExecReport), (DslError, Option<ExecReport>)> {
    let script = parse(source).map_err(|e| (e, None))?;
    let errors = validate(&script, &env.summary());
    if !errors.is_empty() {
        return Err((DslError::Static(errors), None));
    }
    let (next, report) = execute(&script, env, limits);
    match report.error() {
        Some(e) => Err((e, Some(report))),
        None => Ok((next, report)),
    }
}

// ---------------------------------------------------------------------------
// Observations

/// One-line repair hint per error code.
pub fn hint(code: &str) -> &'static str {
    match code {
        "E_DSL_SYNTAX" => "check the statement against the grammar (read_docs); one statement per line",
        "E_UNDEFINED_TABLE" => "use a table listed by inspect, or create it earlier in the script with split/predict",
        "E_UNDEFINED_MODEL" => "train or tune the model (… as <name>) before using it",
        "E_NO_SUCH_COLUMN" => "column names are case-sensitive; onehot replaces C with C=<value> columns; profile the table to list columns",
        "E_UNPREPARED" => "impute missing values and onehot or drop non-numeric columns before training",
        "E_HAS_MISSING" => "impute the column first",
        "E_TYPE_MISMATCH" => "this operation needs a different column type; check profile output",
        "E_ALL_MISSING" => "the column has no values; drop it",
        "E_SINGULAR" => "add regularisation, e.g. l2=0.01, or drop duplicated columns",
        "E_METRIC_TASK_MISMATCH" => "use rmse/mae for regression, accuracy for classes, auc/logloss for binary targets",
        "E_UNKNOWN_HYPERPARAM" => "linear: l2; logistic: lr, epochs, l2; tree: max_depth, min_samples_leaf",
        "E_INVALID_HYPERPARAM" => "hyperparameters must be non-negative numbers (integers for epochs/depth/leaf size)",
        "E_UNKNOWN_FAMILY" => "families: baseline, linear, logistic, tree",
        "E_UNKNOWN_METRIC" => "metrics: rmse, mae, accuracy, logloss, auc",
        "E_UNKNOWN_STRATEGY" => "strategies: random, halving",
        "E_INVALID_LITERAL" => "check numeric ranges: ratio in (0,1), budget >= 1, cv >= 2, lo < hi",
        "E_INVALID_PATH" => "save paths are relative file names like \"preds.csv\"",
        "E_NAME_EXISTS" => "choose a new table name",
        "E_SCHEMA_MISMATCH" => "apply the same transforms to the prediction table as to the training table",
        "E_BUDGET" => "reduce the tune budget or the data size",
        "E_TOO_FEW_ROWS" => "use a larger table or fewer folds",
        "E_DEGENERATE" => "the evaluation table needs both classes",
        "E_DUP_HEADER" => "a column with that name already exists; drop or rename first",
        _ => "read the message and adjust the statement",
    }
}

fn middle_truncate(text: &str, max_chars: usize) -> String {
    let total = text.chars().count();
    if total <= max_chars {
        return text.to_string();
    }
    let head = max_chars / 2;
    let tail = max_chars - head;
    let chars: Vec<char> = text.chars().collect();
    let mut out: String = chars[..head].iter().collect();
    out.push_str(&elision_marker(total - max_chars));
    out.extend(&chars[total - tail..]);
    out
}

pub fn elision_marker(n: usize) -> String {
    format!("\n[... {n} chars elided ...]\n")
}

fn error_line(line: usize, code: &str, message: &str) -> String {
    format!("ERROR line {line} {code}: {message}\nhint: {}", hint(code))
}

/// Line-per-statement summary of a report, middle-truncated to `max_chars`.
pub fn render_observation(report: &ExecReport, max_chars: usize) -> String {
    let mut out = String::new();
    for e in &report.entries {
        match &e.outcome {
            Outcome::Ok { result } => out.push_str(&format!("ok line {}: {} -> {result}\n", e.line, e.statement)),
            Outcome::Error { code, message } => {
                out.push_str(&format!("failed line {}: {}\n", e.line, e.statement));
                out.push_str(&error_line(e.line, code, message));
                out.push('\n');
            }
        }
    }
    if report.succeeded() {
        out.push_str(&format!("env version {} -> {}\n", report.version_before, report.version_after));
    } else {
        out.push_str("no changes committed\n");
    }
    middle_truncate(out.trim_end(), max_chars)
}

/// Diagnostics for a script that failed before or during execution.
pub fn render_error(err: &DslError, report: Option<&ExecReport>, max_chars: usize) -> String {
    if let Some(r) = report {
        return render_observation(r, max_chars);
    }
    let text = match err {
        DslError::Syntax { line, col, message } => error_line(*line, "E_DSL_SYNTAX", &format!("column {col}: {message}")),
        DslError::Static(errors) => errors.iter().map(|e| error_line(e.line, &e.code, &e.message)).collect::<Vec<_>>().join("\n"),
        DslError::Runtime { line, code, message } => error_line(*line, code, message),
        DslError::Budget { line, message } => error_line(*line, "E_BUDGET", message),
    };
    middle_truncate(&text, max_chars)
}

// ---------------------------------------------------------------------------
// Reference text served to the agents

const REFERENCE_SECTIONS: &[(&str, &str)] = &[
    (
        "overview",
        "Pipeline language: one statement per line; `#` starts a comment; keywords are case-sensitive.\n\
         T, A, B, M, P are names matching [a-z_][a-z0-9_]*; T.C references column C of table T\n\
         (quote unusual names: T.\"my col\"). A script runs all-or-nothing: on any error nothing is committed.",
    ),
    ("profile", "profile T\n  one-line summary per column: type, missing rate, mean/std/min/max or top values."),
    ("impute", "impute T.C with (mean|median|mode|constant <lit>)\n  fills missing cells; mean/median need a numeric column."),
    (
        "onehot",
        "onehot T.C [max <int>]\n  replaces categorical C with 0/1 columns named C=<value> (default max 32; rarer values go to C=__other__).",
    ),
    ("scale", "scale T.C (standard|minmax)"),
    ("clip_outliers", "clip_outliers T.C (iqr [<num>] | zscore <num>)\n  iqr default factor 1.5."),
    ("drop", "drop T.C"),
    (
        "select_features",
        "select_features T target C top <int>\n  keeps the <int> numeric features with the largest |correlation| with C; other columns kept.",
    ),
    ("split", "split T into A, B ratio <num> seed <int>\n  seeded shuffle; A gets ceil(ratio*n) rows. A and B must be new names."),
    (
        "train",
        "train (baseline|linear|logistic|tree) on T target C [key=value ...] as M\n  \
         linear: l2 (default 1e-6); logistic: lr (0.1), epochs (500), l2 (0); tree: max_depth (6), min_samples_leaf (5).\n  \
         every column except C is a feature and must be numeric without missing values.",
    ),
    ("evaluate", "evaluate M on T metric (rmse|mae|accuracy|logloss|auc)\n  T must contain M's target column."),
    (
        "tune",
        "tune <family> on T target C metric <metric> budget <int> [cv <int>] [strategy (random|halving)] space { key: (uniform|loguniform|int|choice)(args), ... } as M\n  \
         default strategy halving (budget = initial configurations, eta 2); without cv a seeded 80/20 holdout is used.\n  \
         the best configuration is retrained on all of T.\n  \
         example: tune logistic on tr target y metric auc budget 8 space { lr: loguniform(0.01, 1), l2: loguniform(0.0001, 0.1) } as m",
    ),
    ("predict", "predict M on T as P\n  P has columns id, prediction (probability of the positive class for binary models)."),
    ("save", "save P \"<path>\"\n  writes P as CSV under the session artifact directory; relative paths only."),
];

/// The full language reference, or only sections mentioning `topic`.
pub fn reference(topic: &str) -> String {
    let topic = topic.trim();
    let sections: Vec<&str> = if topic.is_empty() {
        REFERENCE_SECTIONS.iter().map(|s| s.1).collect()
    } else {
        let hits: Vec<&str> = REFERENCE_SECTIONS.iter().filter(|(k, body)| *k == topic || body.contains(topic)).map(|s| s.1).collect();
        if hits.is_empty() { REFERENCE_SECTIONS.iter().map(|s| s.1).collect() } else { hits }
    };
    sections.join("\n\n")
}
