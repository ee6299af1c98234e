//! Seeded generators of pipeline scripts for property tests.
//!
//! [`random_statement`] draws arbitrary well-formed ASTs (round-trip
//! testing); [`failing_case`] draws a script that runs cleanly against
//! [`base_env`] up to one injected statement that fails at run time.

use std::collections::BTreeSet;

use crate::data::{Column, ScaleKind, Table};
use crate::dsl::{self, ClipSpec, ColRef, DimKind, DimSpec, Env, ImputeWith, Literal, Script, Stmt, StmtKind};
use crate::rng::SplitMix64;

const KEYWORD_NAMES: &[&str] = &[
    "as", "on", "into", "target", "metric", "budget", "cv", "strategy", "space", "with", "max", "top", "ratio", "seed", "train",
    "profile", "save", "iqr", "zscore", "mean", "median",
];

const COLUMN_CHARS: &[char] = &[
    'a', 'b', 'x', 'Y', 'Z', '0', '7', '_', '-', '.', '=', '+', '/', ' ', ',', '{', '}', '(', ')', ':', '"', '#', '\\', '\n', '\t',
    '\r', '\'', '!', '%', 'é', 'λ', '中',
];

fn pick<'a, T>(rng: &mut SplitMix64, items: &'a [T]) -> &'a T {
    &items[rng.below(items.len() as u64) as usize]
}

fn chance(rng: &mut SplitMix64, p: f64) -> bool {
    rng.next_f64() < p
}

/// A name accepted by the identifier rule; sometimes a grammar keyword.
pub fn random_identifier(rng: &mut SplitMix64) -> String {
    if chance(rng, 0.2) {
        return pick(rng, KEYWORD_NAMES).to_string();
    }
    let first = b"abcdefghijklmnopqrstuvwxyz_";
    let rest = b"abcdefghijklmnopqrstuvwxyz0123456789_";
    let len = 1 + rng.below(8) as usize;
    let mut s = String::with_capacity(len);
    s.push(*pick(rng, first) as char);
    for _ in 1..len {
        s.push(*pick(rng, rest) as char);
    }
    s
}

/// Printable text mixed with characters that need quoting or escaping.
pub fn random_column_name(rng: &mut SplitMix64) -> String {
    match rng.below(4) {
        0 => random_identifier(rng),
        _ => {
            let len = 1 + rng.below(10) as usize;
            (0..len).map(|_| *pick(rng, COLUMN_CHARS)).collect()
        }
    }
}

fn random_float(rng: &mut SplitMix64) -> f64 {
    match rng.below(5) {
        0 => 0.0,
        1 => rng.next_f64(),
        2 => (rng.next_f64() - 0.5) * 1e6,
        3 => rng.next_gaussian() * 10f64.powi(rng.below(40) as i32 - 20),
        _ => (rng.below(1000) as f64) / 8.0 - 60.0,
    }
}

fn random_int(rng: &mut SplitMix64) -> i64 {
    match rng.below(4) {
        0 => rng.below(10) as i64,
        1 => rng.below(2000) as i64 - 1000,
        2 => rng.next_u64() as i64,
        _ => *pick(rng, &[i64::MIN, i64::MAX, -1, 0]),
    }
}

/// Numeric literal: an integer or a finite float.
pub fn random_number(rng: &mut SplitMix64) -> Literal {
    if chance(rng, 0.5) { Literal::Int(random_int(rng)) } else { Literal::Float(random_float(rng)) }
}

pub fn random_literal(rng: &mut SplitMix64) -> Literal {
    match rng.below(3) {
        0 => Literal::Str(random_column_name(rng)),
        _ => random_number(rng),
    }
}

fn random_colref(rng: &mut SplitMix64) -> ColRef {
    ColRef { table: random_identifier(rng), column: random_column_name(rng) }
}

fn random_dim(rng: &mut SplitMix64) -> DimSpec {
    let kind = *pick(rng, &[DimKind::Uniform, DimKind::LogUniform, DimKind::Int, DimKind::Choice]);
    let n = 1 + rng.below(3) as usize;
    DimSpec { name: random_identifier(rng), kind, args: (0..n).map(|_| random_literal(rng)).collect() }
}

/// Any statement the grammar can express. Semantics are ignored.
pub fn random_statement(rng: &mut SplitMix64) -> StmtKind {
    let id = |rng: &mut SplitMix64| random_identifier(rng);
    match rng.below(13) {
        0 => StmtKind::Profile { table: id(rng) },
        1 => {
            let with = match rng.below(4) {
                0 => ImputeWith::Mean,
                1 => ImputeWith::Median,
                2 => ImputeWith::Mode,
                _ => ImputeWith::Constant(random_literal(rng)),
            };
            StmtKind::Impute { col: random_colref(rng), with }
        }
        2 => StmtKind::Onehot { col: random_colref(rng), max_card: chance(rng, 0.5).then(|| random_int(rng)) },
        3 => StmtKind::Scale { col: random_colref(rng), kind: *pick(rng, &[ScaleKind::Standard, ScaleKind::Minmax]) },
        4 => {
            let method = match rng.below(3) {
                0 => ClipSpec::Iqr(None),
                1 => ClipSpec::Iqr(Some(random_number(rng))),
                _ => ClipSpec::Zscore(random_number(rng)),
            };
            StmtKind::ClipOutliers { col: random_colref(rng), method }
        }
        5 => StmtKind::Drop { col: random_colref(rng) },
        6 => StmtKind::SelectFeatures { table: id(rng), target: random_column_name(rng), top: random_int(rng) },
        7 => StmtKind::Split { table: id(rng), first: id(rng), second: id(rng), ratio: random_number(rng), seed: random_int(rng) },
        8 => {
            let n = rng.below(4) as usize;
            let params = (0..n).map(|_| (id(rng), random_literal(rng))).collect();
            StmtKind::Train { family: id(rng), table: id(rng), target: random_column_name(rng), params, out: id(rng) }
        }
        9 => StmtKind::Evaluate { model: id(rng), table: id(rng), metric: id(rng) },
        10 => {
            let n = rng.below(4) as usize;
            StmtKind::Tune {
                family: id(rng),
                table: id(rng),
                target: random_column_name(rng),
                metric: id(rng),
                budget: random_int(rng),
                cv: chance(rng, 0.5).then(|| random_int(rng)),
                strategy: chance(rng, 0.5).then(|| id(rng)),
                space: (0..n).map(|_| random_dim(rng)).collect(),
                out: id(rng),
            }
        }
        11 => StmtKind::Predict { model: id(rng), table: id(rng), out: id(rng) },
        _ => StmtKind::Save { table: id(rng), path: random_column_name(rng) },
    }
}

/// One to `max_len` random statements numbered from line 1.
pub fn random_statements(rng: &mut SplitMix64, max_len: usize) -> Vec<Stmt> {
    let n = 1 + rng.below(max_len.max(1) as u64) as usize;
    (0..n).map(|i| Stmt { line: i + 1, kind: random_statement(rng) }).collect()
}

// ---------------------------------------------------------------------------
// Executable scripts

pub const BASE_TABLE: &str = "t";
const FEATURES: [&str; 3] = ["x1", "x2", "x3"];

/// A single table `t` with numeric `x1..x3` (x3 partly missing), a
/// categorical `cat` and a numeric target `y`.
pub fn base_env(rng: &mut SplitMix64) -> Env {
    let n = 40 + rng.below(40) as usize;
    let mut cols: Vec<Vec<Option<f64>>> = (0..3).map(|_| Vec::with_capacity(n)).collect();
    let mut cat = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let x: Vec<f64> = (0..3).map(|_| rng.next_gaussian()).collect();
        for (j, v) in x.iter().enumerate() {
            // x3 keeps its first value so at least one cell is present.
            let missing = j == 2 && i > 0 && chance(rng, 0.15);
            cols[j].push((!missing).then_some(*v));
        }
        cat.push(Some(pick(rng, &["a", "b", "c"]).to_string()));
        y.push(Some(x[0] - 2.0 * x[1] + 0.1 * rng.next_gaussian()));
    }
    let mut columns: Vec<Column> = FEATURES.iter().zip(cols).map(|(name, v)| Column::numeric(name, v)).collect();
    columns.push(Column::categorical("cat", cat));
    columns.push(Column::numeric("y", y));
    let mut env = Env::new(rng.next_u64());
    env.attach(Table::new(BASE_TABLE, columns).expect("base table"));
    env
}

#[derive(Debug, Clone)]
struct TableState {
    name: String,
    /// Lower bound on the row count.
    rows: usize,
    /// Columns that may still hold missing cells.
    missing: BTreeSet<&'static str>,
    has_cat: bool,
    /// Prediction tables only support profile and save.
    derived: bool,
}

impl TableState {
    /// Tables of 10 rows or fewer would make `y` look like a class label.
    fn trainable(&self) -> bool {
        !self.derived && !self.has_cat && self.missing.is_empty() && self.rows > 10
    }
}

struct Planner {
    tables: Vec<TableState>,
    /// (model, table it was trained on)
    models: Vec<(String, usize)>,
    counter: usize,
}

impl Planner {
    fn fresh(&mut self, prefix: &str) -> String {
        self.counter += 1;
        format!("{prefix}{}", self.counter)
    }

    fn valid(&mut self, rng: &mut SplitMix64) -> StmtKind {
        loop {
            let ti = rng.below(self.tables.len() as u64) as usize;
            let t = self.tables[ti].clone();
            let feature = *pick(rng, &FEATURES);
            let col = ColRef { table: t.name.clone(), column: feature.to_string() };
            let present = !t.missing.contains(feature);
            match rng.below(10) {
                0 => return StmtKind::Profile { table: t.name },
                1 if !t.derived => {
                    let with = match rng.below(3) {
                        0 => ImputeWith::Mean,
                        1 => ImputeWith::Median,
                        _ => ImputeWith::Constant(Literal::Int(rng.below(5) as i64)),
                    };
                    self.tables[ti].missing.remove(feature);
                    return StmtKind::Impute { col, with };
                }
                2 if !t.derived && present => {
                    return StmtKind::Scale { col, kind: *pick(rng, &[ScaleKind::Standard, ScaleKind::Minmax]) };
                }
                3 if !t.derived && present => {
                    let method = if chance(rng, 0.5) { ClipSpec::Iqr(None) } else { ClipSpec::Zscore(Literal::Float(3.0)) };
                    return StmtKind::ClipOutliers { col, method };
                }
                4 if t.has_cat => {
                    self.tables[ti].has_cat = false;
                    return StmtKind::Onehot { col: ColRef { table: t.name, column: "cat".into() }, max_card: None };
                }
                5 if !t.derived && t.rows >= 24 => {
                    let ratio = 0.6 + 0.2 * rng.next_f64();
                    let (a, b) = (self.fresh("s"), self.fresh("s"));
                    let smaller = (t.rows as f64 * (1.0 - ratio)).floor() as usize;
                    for name in [&a, &b] {
                        self.tables.push(TableState { name: name.clone(), rows: smaller.saturating_sub(1), ..t.clone() });
                    }
                    let ratio = Literal::Float((ratio * 100.0).round() / 100.0);
                    return StmtKind::Split { table: t.name, first: a, second: b, ratio, seed: rng.below(1000) as i64 };
                }
                6 if t.trainable() => {
                    let family = pick(rng, &["linear", "tree", "baseline"]).to_string();
                    let params = if family == "tree" { vec![("max_depth".to_string(), Literal::Int(1 + rng.below(3) as i64))] } else { Vec::new() };
                    let out = self.fresh("m");
                    self.models.push((out.clone(), ti));
                    return StmtKind::Train { family, table: t.name, target: "y".into(), params, out };
                }
                7 if !self.models.is_empty() => {
                    let (model, mt) = pick(rng, &self.models).clone();
                    let table = self.tables[mt].name.clone();
                    return StmtKind::Evaluate { model, table, metric: pick(rng, &["rmse", "mae"]).to_string() };
                }
                8 if !self.models.is_empty() => {
                    let (model, mt) = pick(rng, &self.models).clone();
                    let table = self.tables[mt].name.clone();
                    let out = self.fresh("p");
                    self.tables.push(TableState { name: out.clone(), rows: 0, missing: BTreeSet::new(), has_cat: false, derived: true });
                    return StmtKind::Predict { model, table, out };
                }
                9 => {
                    let path = format!("fuzz/{}.csv", self.fresh("out"));
                    return StmtKind::Save { table: t.name, path };
                }
                _ => {}
            }
        }
    }

    /// A statement that passes parsing but fails when run in this state.
    fn failing(&mut self, rng: &mut SplitMix64) -> StmtKind {
        let t = pick(rng, &self.tables).clone();
        loop {
            match rng.below(8) {
                0 => return StmtKind::Drop { col: ColRef { table: t.name, column: "no_such_column".into() } },
                1 => {
                    return StmtKind::Train { family: "no_such_family".into(), table: t.name, target: "y".into(), params: Vec::new(), out: "m_bad".into() };
                }
                2 => return StmtKind::Evaluate { model: "no_such_model".into(), table: t.name, metric: "rmse".into() },
                3 => {
                    return StmtKind::Split { table: t.name.clone(), first: t.name, second: "s_bad".into(), ratio: Literal::Float(0.5), seed: 1 };
                }
                4 => return StmtKind::Save { table: t.name, path: "../escape.csv".into() },
                5 => return StmtKind::Impute { col: ColRef { table: t.name, column: "no_such_column".into() }, with: ImputeWith::Mean },
                6 => return StmtKind::Profile { table: "no_such_table".into() },
                // `missing` only means possibly missing after a split, so rely
                // on the categorical column to make training fail.
                _ if !t.derived && t.has_cat => {
                    return StmtKind::Train { family: "linear".into(), table: t.name, target: "y".into(), params: Vec::new(), out: "m_bad".into() };
                }
                _ => {}
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FailingCase {
    pub env: Env,
    pub script: Script,
    /// 1-based line of the injected statement; every earlier line succeeds.
    pub failing_line: usize,
}

/// Up to `max_valid` valid statements with one failing statement inserted
/// at a random position.
pub fn failing_case(rng: &mut SplitMix64, max_valid: usize) -> FailingCase {
    let env = base_env(rng);
    let rows = env.tables[BASE_TABLE].n_rows;
    let base = TableState { name: BASE_TABLE.into(), rows, missing: BTreeSet::from(["x3"]), has_cat: true, derived: false };
    let mut planner = Planner { tables: vec![base], models: Vec::new(), counter: 0 };
    let n = rng.below(max_valid as u64 + 1) as usize;
    let at = rng.below(n as u64 + 1) as usize;
    let mut kinds = Vec::with_capacity(n + 1);
    for i in 0..=n {
        kinds.push(if i == at { planner.failing(rng) } else { planner.valid(rng) });
    }
    let statements: Vec<Stmt> = kinds.into_iter().enumerate().map(|(i, kind)| Stmt { line: i + 1, kind }).collect();
    let source = dsl::render_source(&statements);
    let script = dsl::parse(&source).expect("generated scripts parse");
    FailingCase { env, script, failing_line: at + 1 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        let a = random_statements(&mut SplitMix64::new(3), 20);
        let b = random_statements(&mut SplitMix64::new(3), 20);
        assert_eq!(a, b);
        let c = failing_case(&mut SplitMix64::new(3), 10);
        let d = failing_case(&mut SplitMix64::new(3), 10);
        assert_eq!((c.script, c.failing_line), (d.script, d.failing_line));
    }
}
