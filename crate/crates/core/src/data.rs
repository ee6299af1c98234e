//! Tabular data: CSV ingestion with type inference, profiling, and the
//! preprocessing transforms the Coding agent can apply.
//!
//! Tables are immutable values. Every transform returns a new table whose
//! `version` is one higher and whose lineage gains one [`TransformRecord`];
//! the input is left untouched.
//!
//! Conventions used throughout: standard deviation is the population one,
//! quantiles use linear interpolation between order statistics, and constant
//! columns scale to zeros instead of failing.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::ErrorCode;

const MISSING_TOKENS: [&str; 6] = ["", "na", "n/a", "nan", "null", "none"];
const TOP_VALUES: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("csv syntax error at line {line}: {message}")]
    CsvSyntax { line: u64, message: String },
    #[error("line {line} has {got} fields, expected {expected}")]
    RaggedRow { line: u64, expected: usize, got: usize },
    #[error("no data rows")]
    Empty,
    #[error("duplicate column {0:?}")]
    DupHeader(String),
    #[error("no such column {0:?}")]
    NoSuchColumn(String),
    #[error("column {column:?} is {found}, expected {expected}")]
    TypeMismatch { column: String, expected: String, found: ColumnType },
    #[error("column {0:?} has no non-missing values")]
    AllMissing(String),
    #[error("column {0:?} has missing values")]
    HasMissing(String),
    #[error("need at least {needed} rows, table has {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("table has no numeric feature columns")]
    NoNumericFeatures,
    #[error("invalid identifier {0:?}")]
    InvalidName(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl ErrorCode for DataError {
    fn code(&self) -> &'static str {
        match self {
            DataError::CsvSyntax { .. } => "E_CSV_SYNTAX",
            DataError::RaggedRow { .. } => "E_RAGGED_ROW",
            DataError::Empty => "E_EMPTY",
            DataError::DupHeader(_) => "E_DUP_HEADER",
            DataError::NoSuchColumn(_) => "E_NO_SUCH_COLUMN",
            DataError::TypeMismatch { .. } => "E_TYPE_MISMATCH",
            DataError::AllMissing(_) => "E_ALL_MISSING",
            DataError::HasMissing(_) => "E_HAS_MISSING",
            DataError::TooFewRows { .. } => "E_TOO_FEW_ROWS",
            DataError::NoNumericFeatures => "E_NO_NUMERIC_FEATURES",
            DataError::InvalidName(_) => "E_INVALID_NAME",
            DataError::InvalidArgument(_) => "E_INVALID_ARGUMENT",
        }
    }
}

/// `[a-z_][a-z0-9_]*`
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Numeric,
    Categorical,
    Text,
}

impl std::fmt::Display for ColumnType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ColumnType::Numeric => "numeric",
            ColumnType::Categorical => "categorical",
            ColumnType::Text => "text",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnData {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
    Text(Vec<Option<String>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
}

impl Column {
    pub fn numeric(name: &str, values: Vec<Option<f64>>) -> Self {
        Self { name: name.into(), data: ColumnData::Numeric(values) }
    }

    pub fn categorical(name: &str, values: Vec<Option<String>>) -> Self {
        Self { name: name.into(), data: ColumnData::Categorical(values) }
    }

    pub fn ctype(&self) -> ColumnType {
        match self.data {
            ColumnData::Numeric(_) => ColumnType::Numeric,
            ColumnData::Categorical(_) => ColumnType::Categorical,
            ColumnData::Text(_) => ColumnType::Text,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) | ColumnData::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn missing_count(&self) -> usize {
        match &self.data {
            ColumnData::Numeric(v) => v.iter().filter(|x| x.is_none()).count(),
            ColumnData::Categorical(v) | ColumnData::Text(v) => v.iter().filter(|x| x.is_none()).count(),
        }
    }

    pub fn as_numeric(&self) -> Option<&[Option<f64>]> {
        match &self.data {
            ColumnData::Numeric(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_strings(&self) -> Option<&[Option<String>]> {
        match &self.data {
            ColumnData::Categorical(v) | ColumnData::Text(v) => Some(v),
            _ => None,
        }
    }

    fn numeric_or_mismatch(&self) -> Result<&[Option<f64>], DataError> {
        self.as_numeric().ok_or_else(|| DataError::TypeMismatch {
            column: self.name.clone(),
            expected: "numeric".into(),
            found: self.ctype(),
        })
    }

    /// Numeric column with no missing values, as a dense vector.
    pub fn dense_numeric(&self) -> Result<Vec<f64>, DataError> {
        self.numeric_or_mismatch()?
            .iter()
            .map(|v| v.ok_or_else(|| DataError::HasMissing(self.name.clone())))
            .collect()
    }

    /// Cell rendered as text (numbers via [`format_number`]); `None` when missing.
    pub fn cell_text(&self, row: usize) -> Option<String> {
        match &self.data {
            ColumnData::Numeric(v) => v[row].map(format_number),
            ColumnData::Categorical(v) | ColumnData::Text(v) => v[row].clone(),
        }
    }

    /// Distinct non-missing values rendered as text.
    pub fn distinct_values(&self) -> BTreeSet<String> {
        (0..self.len()).filter_map(|i| self.cell_text(i)).collect()
    }

    pub fn distinct_count(&self) -> usize {
        match &self.data {
            ColumnData::Numeric(v) => {
                let mut bits: Vec<u64> = v.iter().flatten().map(|x| canonical_bits(*x)).collect();
                bits.sort_unstable();
                bits.dedup();
                bits.len()
            }
            ColumnData::Categorical(v) | ColumnData::Text(v) => {
                v.iter().flatten().collect::<std::collections::HashSet<_>>().len()
            }
        }
    }

    /// Non-missing value counts in order of first appearance.
    pub fn value_counts(&self) -> Vec<(String, usize)> {
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for i in 0..self.len() {
            if let Some(v) = self.cell_text(i) {
                let c = counts.entry(v.clone()).or_insert(0);
                if *c == 0 {
                    order.push(v);
                }
                *c += 1;
            }
        }
        order.into_iter().map(|v| { let c = counts[&v]; (v, c) }).collect()
    }

    fn take(&self, rows: &[usize]) -> Column {
        let data = match &self.data {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&i| v[i]).collect()),
            ColumnData::Categorical(v) => ColumnData::Categorical(rows.iter().map(|&i| v[i].clone()).collect()),
            ColumnData::Text(v) => ColumnData::Text(rows.iter().map(|&i| v[i].clone()).collect()),
        };
        Column { name: self.name.clone(), data }
    }
}

fn canonical_bits(x: f64) -> u64 {
    if x == 0.0 { 0 } else { x.to_bits() }
}

/// Shortest text that parses back to the same `f64`.
pub fn format_number(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    format!("{x}")
}

/// A decimal or scientific real: `[+-]? (digits [. digits?] | . digits) ([eE] [+-]? digits)?`
pub fn is_decimal(s: &str) -> bool {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        digits += i - frac_start;
    }
    if digits == 0 {
        return false;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return false;
        }
    }
    i == b.len()
}

pub fn is_missing_token(raw: &str) -> bool {
    let t = raw.trim();
    MISSING_TOKENS.iter().any(|m| t.eq_ignore_ascii_case(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    BinaryClassification,
    MulticlassClassification,
}

impl Task {
    pub fn is_classification(self) -> bool {
        self != Task::Regression
    }

    /// Numeric with more than 10 distinct values: regression; exactly 2: binary; else multiclass.
    pub fn infer(ctype: ColumnType, distinct: usize) -> Task {
        if ctype == ColumnType::Numeric && distinct > 10 {
            Task::Regression
        } else if distinct == 2 {
            Task::BinaryClassification
        } else {
            Task::MulticlassClassification
        }
    }

    pub fn of_column(column: &Column) -> Task {
        Task::infer(column.ctype(), column.distinct_count())
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Regression => "regression",
            Task::BinaryClassification => "binary_classification",
            Task::MulticlassClassification => "multiclass_classification",
        })
    }
}

// ---------------------------------------------------------------------------
// Transform parameters and lineage

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellValue {
    Number(f64),
    Text(String),
}

impl std::fmt::Display for CellValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellValue::Number(x) => f.write_str(&format_number(*x)),
            CellValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeStrategy {
    Mean,
    Median,
    Mode,
    Constant(CellValue),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleKind {
    Standard,
    Minmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMethod {
    Iqr(f64),
    Zscore(f64),
}

pub const DEFAULT_IQR_K: f64 = 1.5;
pub const DEFAULT_MAX_CARD: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum TransformOp {
    Impute { column: String, strategy: ImputeStrategy },
    Scale { column: String, kind: ScaleKind },
    Onehot { column: String, max_card: usize },
    ClipOutliers { column: String, method: ClipMethod },
    Drop { column: String },
    SelectFeatures { target: String, top_k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub op: TransformOp,
    pub input_version: u64,
    pub output_version: u64,
    pub affected_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<Column>,
    pub n_rows: usize,
    pub version: u64,
    pub lineage: Vec<TransformRecord>,
}

impl Table {
    /// Validates name, equal column lengths and unique column names.
    pub fn new(name: &str, columns: Vec<Column>) -> Result<Self, DataError> {
        if !is_identifier(name) {
            return Err(DataError::InvalidName(name.to_string()));
        }
        let n_rows = columns.first().map_or(0, Column::len);
        let mut seen = BTreeSet::new();
        for c in &columns {
            if c.len() != n_rows {
                return Err(DataError::InvalidArgument(format!(
                    "column {:?} has {} values, expected {n_rows}",
                    c.name,
                    c.len()
                )));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(DataError::DupHeader(c.name.clone()));
            }
        }
        Ok(Self { name: name.to_string(), columns, n_rows, version: 1, lineage: Vec::new() })
    }

    pub fn column_index(&self, name: &str) -> Result<usize, DataError> {
        self.columns.iter().position(|c| c.name == name).ok_or_else(|| DataError::NoSuchColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<&Column, DataError> {
        Ok(&self.columns[self.column_index(name)?])
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c.name == name)
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn cells(&self) -> usize {
        self.n_rows * self.columns.len()
    }

    pub fn renamed(&self, name: &str) -> Result<Table, DataError> {
        if !is_identifier(name) {
            return Err(DataError::InvalidName(name.to_string()));
        }
        let mut t = self.clone();
        t.name = name.to_string();
        Ok(t)
    }

    /// Rows in the given order, as a fresh table (version 1, empty lineage).
    pub fn take_rows(&self, name: &str, rows: &[usize]) -> Result<Table, DataError> {
        let cols = self.columns.iter().map(|c| c.take(rows)).collect();
        let mut t = Table::new(name, cols)?;
        t.n_rows = rows.len();
        Ok(t)
    }

    fn derive(&self, columns: Vec<Column>, op: TransformOp, affected: Vec<String>) -> Table {
        let mut lineage = self.lineage.clone();
        lineage.push(TransformRecord {
            op,
            input_version: self.version,
            output_version: self.version + 1,
            affected_columns: affected,
        });
        Table { name: self.name.clone(), columns, n_rows: self.n_rows, version: self.version + 1, lineage }
    }

    fn replace_column(&self, idx: usize, replacement: Vec<Column>, op: TransformOp) -> Table {
        let affected = vec![self.columns[idx].name.clone()];
        let mut cols = Vec::with_capacity(self.columns.len() + replacement.len());
        cols.extend_from_slice(&self.columns[..idx]);
        cols.extend(replacement);
        cols.extend_from_slice(&self.columns[idx + 1..]);
        self.derive(cols, op, affected)
    }

    pub fn apply(&self, op: &TransformOp) -> Result<Table, DataError> {
        match op {
            TransformOp::Impute { column, strategy } => impute(self, column, strategy),
            TransformOp::Scale { column, kind } => scale(self, column, *kind),
            TransformOp::Onehot { column, max_card } => onehot(self, column, *max_card),
            TransformOp::ClipOutliers { column, method } => clip_outliers(self, column, *method),
            TransformOp::Drop { column } => drop_column(self, column),
            TransformOp::SelectFeatures { target, top_k } => select_features(self, target, *top_k),
        }
    }

    /// Re-applies `lineage` to `base`, which must be at the lineage's starting version.
    pub fn replay(base: &Table, lineage: &[TransformRecord]) -> Result<Table, DataError> {
        let mut t = base.clone();
        for rec in lineage {
            if rec.input_version != t.version {
                return Err(DataError::InvalidArgument(format!(
                    "lineage expects version {}, table is at {}",
                    rec.input_version, t.version
                )));
            }
            t = t.apply(&rec.op)?;
        }
        Ok(t)
    }

    /// RFC 4180 CSV with a header row; missing cells are empty.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.columns.iter().map(|c| c.name.as_str())).expect("in-memory write");
        for r in 0..self.n_rows {
            w.write_record(self.columns.iter().map(|c| c.cell_text(r).unwrap_or_default()))
                .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion

fn csv_error(e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::UnequalLengths { pos, expected_len, len } => DataError::RaggedRow {
            line: pos.as_ref().map_or(line, |p| p.line()),
            expected: *expected_len as usize,
            got: *len as usize,
        },
        _ => DataError::CsvSyntax { line, message: e.to_string() },
    }
}

/// Parses UTF-8 CSV (header row required) and infers column types.
pub fn read_csv(bytes: &[u8], name: &str) -> Result<Table, DataError> {
    if !is_identifier(name) {
        return Err(DataError::InvalidName(name.to_string()));
    }
    if std::str::from_utf8(bytes).is_err() {
        let valid = std::str::from_utf8(bytes).unwrap_err().valid_up_to();
        let line = bytes[..valid].iter().filter(|&&b| b == b'\n').count() as u64 + 1;
        return Err(DataError::CsvSyntax { line, message: "input is not valid UTF-8".into() });
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(bytes);
    let headers: Vec<String> = reader.headers().map_err(csv_error)?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(DataError::Empty);
    }
    let mut seen = BTreeSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(DataError::DupHeader(h.clone()));
        }
    }
    let mut raw: Vec<Vec<Option<String>>> = vec![Vec::new(); headers.len()];
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        for (col, cell) in raw.iter_mut().zip(record.iter()) {
            col.push(if is_missing_token(cell) { None } else { Some(cell.trim().to_string()) });
        }
    }
    let n_rows = raw[0].len();
    if n_rows == 0 {
        return Err(DataError::Empty);
    }
    let columns = headers.iter().zip(raw).map(|(h, values)| infer_column(h, values, n_rows)).collect();
    Table::new(name, columns)
}

fn infer_column(name: &str, values: Vec<Option<String>>, n_rows: usize) -> Column {
    if values.iter().flatten().all(|v| is_decimal(v)) {
        let nums = values.iter().map(|v| v.as_ref().map(|s| s.parse::<f64>().expect("checked decimal"))).collect();
        if let Some(col) = Some(Column::numeric(name, nums)).filter(|c| {
            c.as_numeric().expect("numeric").iter().flatten().all(|x| x.is_finite())
        }) {
            return col;
        }
    }
    let distinct = values.iter().flatten().collect::<BTreeSet<_>>().len();
    let limit = 20usize.max(n_rows / 2);
    let data = if distinct <= limit && distinct <= 1000 {
        ColumnData::Categorical(values)
    } else {
        ColumnData::Text(values)
    };
    Column { name: name.to_string(), data }
}

// ---------------------------------------------------------------------------
// Statistics

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_pop(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Quantile of sorted data by linear interpolation at position `q·(n−1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median; even counts average the two middle values.
pub fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 }
}

/// Pearson correlation over rows where both values are present.
/// Returns `(0.0, true)` when undefined (fewer than two pairs or zero variance).
pub fn pearson(x: &[Option<f64>], y: &[Option<f64>]) -> (f64, bool) {
    let pairs: Vec<(f64, f64)> = x.iter().zip(y).filter_map(|(a, b)| Some(((*a)?, (*b)?))).collect();
    if pairs.len() < 2 {
        return (0.0, true);
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return (0.0, true);
    }
    ((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0), false)
}

/// Target as numbers for correlation: numeric targets as-is, two-class
/// targets as 0/1 with the lexicographically larger class as 1. `None` for
/// other (multiclass categorical) targets.
pub fn encode_target(column: &Column) -> Option<Vec<Option<f64>>> {
    match &column.data {
        ColumnData::Numeric(v) => Some(v.clone()),
        ColumnData::Categorical(v) | ColumnData::Text(v) => {
            let classes: BTreeSet<&String> = v.iter().flatten().collect();
            if classes.len() != 2 {
                return None;
            }
            let positive = *classes.iter().next_back().expect("two classes");
            Some(v.iter().map(|x| x.as_ref().map(|s| if s == positive { 1.0 } else { 0.0 })).collect())
        }
    }
}

// ---------------------------------------------------------------------------
// Profiling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueCount {
    pub value: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnProfile {
    pub name: String,
    pub ctype: ColumnType,
    pub missing_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub top_values: Vec<ValueCount>,
    /// Pearson r against the target; `None` for the target itself and non-numeric columns.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<f64>,
    /// Correlation was undefined (constant column or too few pairs) and reported as 0.
    #[serde(default)]
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub table: String,
    pub row_count: usize,
    pub column_count: usize,
    pub columns: Vec<ColumnProfile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    /// Absent when there is no target or the target is multiclass categorical.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_correlations: Option<BTreeMap<String, f64>>,
}

impl Profile {
    pub fn column(&self, name: &str) -> Option<&ColumnProfile> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Compact multi-line text for agent prompts.
    pub fn digest(&self) -> String {
        let mut out = format!("table {}: {} rows x {} columns", self.table, self.row_count, self.column_count);
        if let (Some(t), Some(task)) = (&self.target, self.task) {
            out.push_str(&format!(", target {t} ({task})"));
        }
        out.push('\n');
        for c in &self.columns {
            out.push_str(&format!("  {} [{}] missing={:.3}", c.name, c.ctype, c.missing_rate));
            if let (Some(m), Some(s), Some(lo), Some(hi)) = (c.mean, c.std, c.min, c.max) {
                out.push_str(&format!(" mean={m:.4} std={s:.4} min={lo:.4} max={hi:.4}"));
            }
            if let Some(card) = c.cardinality {
                let top: Vec<String> = c.top_values.iter().map(|v| format!("{}:{}", v.value, v.count)).collect();
                out.push_str(&format!(" distinct={card} top=[{}]", top.join(", ")));
            }
            if let Some(r) = c.correlation {
                out.push_str(&format!(" r={r:.4}"));
                if c.degenerate {
                    out.push_str(" (degenerate)");
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn profile(table: &Table, target: Option<&str>) -> Result<Profile, DataError> {
    let target_col = target.map(|t| table.column(t)).transpose()?;
    let encoded = target_col.and_then(encode_target);
    let n = table.n_rows.max(1) as f64;
    let mut columns = Vec::with_capacity(table.columns.len());
    let mut correlations = BTreeMap::new();
    for col in &table.columns {
        let mut p = ColumnProfile {
            name: col.name.clone(),
            ctype: col.ctype(),
            missing_rate: col.missing_count() as f64 / n,
            mean: None,
            std: None,
            min: None,
            max: None,
            q1: None,
            median: None,
            q3: None,
            cardinality: None,
            top_values: Vec::new(),
            correlation: None,
            degenerate: false,
        };
        match &col.data {
            ColumnData::Numeric(v) => {
                let mut present: Vec<f64> = v.iter().flatten().copied().collect();
                if !present.is_empty() {
                    p.mean = Some(mean(&present));
                    p.std = Some(std_pop(&present));
                    present.sort_by(f64::total_cmp);
                    p.min = present.first().copied();
                    p.max = present.last().copied();
                    p.q1 = Some(quantile_sorted(&present, 0.25));
                    p.median = Some(quantile_sorted(&present, 0.5));
                    p.q3 = Some(quantile_sorted(&present, 0.75));
                }
                if let Some(y) = &encoded {
                    if Some(col.name.as_str()) != target {
                        let (r, degenerate) = pearson(v, y);
                        p.correlation = Some(r);
                        p.degenerate = degenerate;
                        correlations.insert(col.name.clone(), r);
                    }
                }
            }
            ColumnData::Categorical(_) | ColumnData::Text(_) => {
                let mut counts = col.value_counts();
                p.cardinality = Some(counts.len());
                counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                p.top_values = counts
                    .into_iter()
                    .take(TOP_VALUES)
                    .map(|(value, count)| ValueCount { value, count })
                    .collect();
            }
        }
        columns.push(p);
    }
    Ok(Profile {
        table: table.name.clone(),
        row_count: table.n_rows,
        column_count: table.columns.len(),
        columns,
        target: target.map(str::to_string),
        task: target_col.map(Task::of_column),
        target_correlations: encoded.map(|_| correlations),
    })
}

// ---------------------------------------------------------------------------
// Transforms

/// The value `impute` would fill with, computed from non-missing cells.
pub fn impute_value(column: &Column, strategy: &ImputeStrategy) -> Result<CellValue, DataError> {
    let mismatch = |expected: &str| DataError::TypeMismatch {
        column: column.name.clone(),
        expected: expected.into(),
        found: column.ctype(),
    };
    match strategy {
        ImputeStrategy::Constant(v) => match (&column.data, v) {
            (ColumnData::Numeric(_), CellValue::Number(_)) => Ok(v.clone()),
            (ColumnData::Numeric(_), CellValue::Text(s)) => {
                if is_decimal(s.trim()) {
                    Ok(CellValue::Number(s.trim().parse().expect("checked decimal")))
                } else {
                    Err(mismatch("a text column for a text constant"))
                }
            }
            (_, CellValue::Number(x)) => Ok(CellValue::Text(format_number(*x))),
            (_, CellValue::Text(_)) => Ok(v.clone()),
        },
        ImputeStrategy::Mean | ImputeStrategy::Median => {
            let v = column.as_numeric().ok_or_else(|| mismatch("numeric"))?;
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            if present.is_empty() {
                return Err(DataError::AllMissing(column.name.clone()));
            }
            Ok(CellValue::Number(if *strategy == ImputeStrategy::Mean { mean(&present) } else { median(&present) }))
        }
        ImputeStrategy::Mode => {
            // value_counts is in first-appearance order, so max_by keeping the first max breaks ties by appearance.
            let counts = column.value_counts();
            let mut best: Option<&(String, usize)> = None;
            for vc in &counts {
                if best.is_none_or(|b| vc.1 > b.1) {
                    best = Some(vc);
                }
            }
            let (value, _) = best.ok_or_else(|| DataError::AllMissing(column.name.clone()))?;
            Ok(match &column.data {
                ColumnData::Numeric(v) => {
                    let x = v.iter().flatten().find(|x| format_number(**x) == *value).copied().expect("value present");
                    CellValue::Number(x)
                }
                _ => CellValue::Text(value.clone()),
            })
        }
    }
}

pub fn impute(table: &Table, column: &str, strategy: &ImputeStrategy) -> Result<Table, DataError> {
    let idx = table.column_index(column)?;
    let col = &table.columns[idx];
    let fill = impute_value(col, strategy)?;
    let data = match (&col.data, &fill) {
        (ColumnData::Numeric(v), CellValue::Number(x)) => ColumnData::Numeric(v.iter().map(|c| Some(c.unwrap_or(*x))).collect()),
        (ColumnData::Categorical(v), CellValue::Text(s)) => {
            ColumnData::Categorical(v.iter().map(|c| Some(c.clone().unwrap_or_else(|| s.clone()))).collect())
        }
        (ColumnData::Text(v), CellValue::Text(s)) => {
            ColumnData::Text(v.iter().map(|c| Some(c.clone().unwrap_or_else(|| s.clone()))).collect())
        }
        _ => unreachable!("impute_value returns a value of the column's kind"),
    };
    let op = TransformOp::Impute { column: column.to_string(), strategy: strategy.clone() };
    Ok(table.replace_column(idx, vec![Column { name: col.name.clone(), data }], op))
}

pub fn scale(table: &Table, column: &str, kind: ScaleKind) -> Result<Table, DataError> {
    let idx = table.column_index(column)?;
    let xs = table.columns[idx].dense_numeric()?;
    let out: Vec<Option<f64>> = match kind {
        ScaleKind::Standard => {
            let (m, s) = (mean(&xs), std_pop(&xs));
            xs.iter().map(|x| Some(if s > 0.0 { (x - m) / s } else { 0.0 })).collect()
        }
        ScaleKind::Minmax => {
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            xs.iter().map(|x| Some(if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })).collect()
        }
    };
    let op = TransformOp::Scale { column: column.to_string(), kind };
    Ok(table.replace_column(idx, vec![Column::numeric(column, out)], op))
}

pub const OTHER_CATEGORY: &str = "__other__";

/// Output column names `onehot` would produce for these value counts.
pub fn onehot_categories(counts: &[(String, usize)], max_card: usize) -> (Vec<String>, bool) {
    if counts.len() <= max_card {
        let mut cats: Vec<String> = counts.iter().map(|c| c.0.clone()).collect();
        cats.sort();
        return (cats, false);
    }
    let mut by_freq: Vec<&(String, usize)> = counts.iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut kept: Vec<String> = by_freq.into_iter().take(max_card).map(|c| c.0.clone()).collect();
    kept.sort();
    (kept, true)
}

pub fn onehot(table: &Table, column: &str, max_card: usize) -> Result<Table, DataError> {
    if max_card == 0 {
        return Err(DataError::InvalidArgument("max_card must be positive".into()));
    }
    let idx = table.column_index(column)?;
    let col = &table.columns[idx];
    let values = match &col.data {
        ColumnData::Categorical(v) => v,
        _ => {
            return Err(DataError::TypeMismatch {
                column: column.into(),
                expected: "categorical".into(),
                found: col.ctype(),
            })
        }
    };
    let (cats, has_other) = onehot_categories(&col.value_counts(), max_card);
    let mut out: Vec<Column> = cats
        .iter()
        .map(|cat| {
            Column::numeric(
                &format!("{column}={cat}"),
                values.iter().map(|v| Some(if v.as_deref() == Some(cat.as_str()) { 1.0 } else { 0.0 })).collect(),
            )
        })
        .collect();
    if has_other {
        let kept: BTreeSet<&str> = cats.iter().map(String::as_str).collect();
        out.push(Column::numeric(
            &format!("{column}={OTHER_CATEGORY}"),
            values.iter().map(|v| Some(if v.as_deref().is_some_and(|s| !kept.contains(s)) { 1.0 } else { 0.0 })).collect(),
        ));
    }
    for c in &out {
        if table.columns.iter().enumerate().any(|(i, other)| i != idx && other.name == c.name) {
            return Err(DataError::DupHeader(c.name.clone()));
        }
    }
    let op = TransformOp::Onehot { column: column.to_string(), max_card };
    Ok(table.replace_column(idx, out, op))
}

/// Clipping bounds for the given method.
pub fn clip_bounds(xs: &[f64], method: ClipMethod) -> (f64, f64) {
    match method {
        ClipMethod::Iqr(k) => {
            let mut s = xs.to_vec();
            s.sort_by(f64::total_cmp);
            let q1 = quantile_sorted(&s, 0.25);
            let q3 = quantile_sorted(&s, 0.75);
            let iqr = q3 - q1;
            (q1 - k * iqr, q3 + k * iqr)
        }
        ClipMethod::Zscore(k) => {
            let (m, sd) = (mean(xs), std_pop(xs));
            (m - k * sd, m + k * sd)
        }
    }
}

pub fn clip_outliers(table: &Table, column: &str, method: ClipMethod) -> Result<Table, DataError> {
    let k = match method {
        ClipMethod::Iqr(k) | ClipMethod::Zscore(k) => k,
    };
    if !(k >= 0.0 && k.is_finite()) {
        return Err(DataError::InvalidArgument("clip factor must be a finite value >= 0".into()));
    }
    let idx = table.column_index(column)?;
    let xs = table.columns[idx].dense_numeric()?;
    let (lo, hi) = clip_bounds(&xs, method);
    let out = xs.iter().map(|x| Some(x.clamp(lo, hi))).collect();
    let op = TransformOp::ClipOutliers { column: column.to_string(), method };
    Ok(table.replace_column(idx, vec![Column::numeric(column, out)], op))
}

pub fn drop_column(table: &Table, column: &str) -> Result<Table, DataError> {
    let idx = table.column_index(column)?;
    Ok(table.replace_column(idx, Vec::new(), TransformOp::Drop { column: column.to_string() }))
}

/// Seeded shuffle, then the first ⌈ratio·n⌉ rows (kept within `1..n`) go to the first table.
pub fn split(table: &Table, ratio: f64, seed: u64, first: &str, second: &str) -> Result<(Table, Table), DataError> {
    if table.n_rows < 2 {
        return Err(DataError::TooFewRows { needed: 2, got: table.n_rows });
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::InvalidArgument(format!("ratio {ratio} not in (0, 1)")));
    }
    let perm = SplitMix64::new(seed).permutation(table.n_rows);
    let cut = split_point(table.n_rows, ratio);
    Ok((table.take_rows(first, &perm[..cut])?, table.take_rows(second, &perm[cut..])?))
}

pub fn split_point(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).ceil() as usize).clamp(1, n - 1)
}

pub fn select_features(table: &Table, target: &str, top_k: usize) -> Result<Table, DataError> {
    if top_k == 0 {
        return Err(DataError::InvalidArgument("top_k must be positive".into()));
    }
    let target_col = table.column(target)?;
    let y = encode_target(target_col).ok_or_else(|| DataError::TypeMismatch {
        column: target.into(),
        expected: "numeric or binary target".into(),
        found: target_col.ctype(),
    })?;
    let mut scored: Vec<(usize, f64)> = table
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.name != target)
        .filter_map(|(i, c)| c.as_numeric().map(|x| (i, pearson(x, &y).0.abs())))
        .collect();
    if scored.is_empty() {
        return Err(DataError::NoNumericFeatures);
    }
    // stable sort keeps column order among ties
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    let dropped: BTreeSet<usize> = scored.iter().skip(top_k).map(|s| s.0).collect();
    let affected = dropped.iter().map(|&i| table.columns[i].name.clone()).collect();
    let cols = table.columns.iter().enumerate().filter(|(i, _)| !dropped.contains(i)).map(|(_, c)| c.clone()).collect();
    let op = TransformOp::SelectFeatures { target: target.to_string(), top_k };
    Ok(table.derive(cols, op, affected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(csv: &str) -> Table {
        read_csv(csv.as_bytes(), "t").unwrap()
    }

    fn nums(table: &Table, col: &str) -> Vec<Option<f64>> {
        table.column(col).unwrap().as_numeric().unwrap().to_vec()
    }

    #[test]
    fn infers_numeric_and_categorical() {
        let table = t("a,b\n1,x\n2,y\n");
        assert_eq!(table.n_rows, 2);
        assert_eq!(table.column("a").unwrap().ctype(), ColumnType::Numeric);
        assert_eq!(table.column("b").unwrap().ctype(), ColumnType::Categorical);
    }

    #[test]
    fn missing_tokens_and_rate() {
        let table = t("a,b\n1,x\n,x\n3,x\nn/a,x\n");
        assert_eq!(nums(&table, "a"), vec![Some(1.0), None, Some(3.0), None]);
        let p = profile(&table, None).unwrap();
        assert_eq!(p.column("a").unwrap().missing_rate, 0.5);
        for token in ["NA", "null", " None ", "NaN", "N/A"] {
            assert!(is_missing_token(token), "{token}");
        }
    }

    #[test]
    fn csv_errors() {
        assert_eq!(read_csv(b"a,b\n1,2,3\n", "t").unwrap_err().code(), "E_RAGGED_ROW");
        match read_csv(b"a,b\n1,2\n1,2,3\n", "t").unwrap_err() {
            DataError::RaggedRow { line, expected, got } => assert_eq!((line, expected, got), (3, 2, 3)),
            e => panic!("{e:?}"),
        }
        assert_eq!(read_csv(b"a,b\n", "t").unwrap_err(), DataError::Empty);
        assert_eq!(read_csv(b"a,a\n1,2\n", "t").unwrap_err(), DataError::DupHeader("a".into()));
        assert_eq!(read_csv(b"a\n\xff\n", "t").unwrap_err().code(), "E_CSV_SYNTAX");
    }

    #[test]
    fn quoted_fields_and_embedded_newlines() {
        let table = t("name,note\n\"Smith, J\",\"said \"\"hi\"\"\nthen left\"\nx,y\n");
        let names = table.column("name").unwrap().as_strings().unwrap();
        assert_eq!(names[0].as_deref(), Some("Smith, J"));
        let notes = table.column("note").unwrap().as_strings().unwrap();
        assert_eq!(notes[0].as_deref(), Some("said \"hi\"\nthen left"));
    }

    #[test]
    fn text_when_high_cardinality() {
        let mut csv = String::from("id\n");
        for i in 0..50 {
            csv.push_str(&format!("u{i}\n"));
        }
        assert_eq!(t(&csv).column("id").unwrap().ctype(), ColumnType::Text);
    }

    #[test]
    fn decimal_grammar() {
        for ok in ["1", "-2.5", "+.5", "3.", "1e10", "2.5E-3"] {
            assert!(is_decimal(ok), "{ok}");
        }
        for bad in ["", ".", "e5", "1e", "inf", "nan", "1.2.3", "0x10", "1 2"] {
            assert!(!is_decimal(bad), "{bad}");
        }
    }

    #[test]
    fn pearson_examples() {
        let x = [Some(1.0), Some(2.0), Some(3.0)];
        let y = [Some(2.0), Some(4.0), Some(6.0)];
        assert!((pearson(&x, &y).0 - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[Some(5.0); 3], &y), (0.0, true));
        let x = [Some(1.0), Some(2.0), Some(3.0), Some(4.0)];
        let y = [Some(2.0), Some(1.0), Some(4.0), Some(3.0)];
        // sum (x-2.5)(y-2.5) = (-1.5)(-0.5)+(-0.5)(-1.5)+(0.5)(1.5)+(1.5)(0.5) = 3.0; sxx = syy = 5.0
        assert!((pearson(&x, &y).0 - 0.6).abs() < 1e-12);
    }

    #[test]
    fn profile_constant_column_degenerate() {
        let table = t("c,y\n5,1\n5,2\n5,3\n");
        let p = profile(&table, Some("y")).unwrap();
        let c = p.column("c").unwrap();
        assert_eq!(c.correlation, Some(0.0));
        assert!(c.degenerate);
        assert_eq!(p.task, Some(Task::MulticlassClassification));
        assert_eq!(profile(&table, Some("nope")).unwrap_err().code(), "E_NO_SUCH_COLUMN");
    }

    #[test]
    fn task_rules() {
        assert_eq!(Task::infer(ColumnType::Numeric, 11), Task::Regression);
        assert_eq!(Task::infer(ColumnType::Numeric, 2), Task::BinaryClassification);
        assert_eq!(Task::infer(ColumnType::Numeric, 5), Task::MulticlassClassification);
        assert_eq!(Task::infer(ColumnType::Categorical, 2), Task::BinaryClassification);
    }

    #[test]
    fn multiclass_categorical_target_has_no_correlations() {
        let table = t("x,y\n1,a\n2,b\n3,c\n");
        let p = profile(&table, Some("y")).unwrap();
        assert_eq!(p.target_correlations, None);
    }

    #[test]
    fn impute_examples() {
        let table = t("a,c\n1,a\n,a\n3,b\n4,\n");
        let out = impute(&table, "a", &ImputeStrategy::Mean).unwrap();
        assert_eq!(nums(&out, "a"), vec![Some(1.0), Some(8.0 / 3.0), Some(3.0), Some(4.0)]);
        let out = impute(&table, "c", &ImputeStrategy::Mode).unwrap();
        let c = out.column("c").unwrap().as_strings().unwrap().to_vec();
        assert_eq!(c, ["a", "a", "b", "a"].map(|s| Some(s.to_string())).to_vec());
        assert_eq!(impute(&table, "c", &ImputeStrategy::Mean).unwrap_err().code(), "E_TYPE_MISMATCH");

        let table = Table::new("t", vec![Column::numeric("a", vec![Some(1.0), None, Some(3.0)])]).unwrap();
        assert_eq!(nums(&impute(&table, "a", &ImputeStrategy::Mean).unwrap(), "a"), vec![Some(1.0), Some(2.0), Some(3.0)]);

        let table = Table::new("t", vec![Column::numeric("a", vec![None])]).unwrap();
        let out = impute(&table, "a", &ImputeStrategy::Constant(CellValue::Number(0.0))).unwrap();
        assert_eq!(nums(&out, "a"), vec![Some(0.0)]);
        assert_eq!(impute(&table, "a", &ImputeStrategy::Median).unwrap_err().code(), "E_ALL_MISSING");
    }

    #[test]
    fn median_even_count() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn mode_tie_goes_to_first_seen() {
        let table = Table::new("t", vec![Column::categorical("c", ["b", "a", "a", "b"].map(|s| Some(s.into())).to_vec())]).unwrap();
        assert_eq!(impute_value(&table.columns[0], &ImputeStrategy::Mode).unwrap(), CellValue::Text("b".into()));
    }

    #[test]
    fn scale_examples() {
        let table = Table::new("t", vec![Column::numeric("a", vec![Some(0.0), Some(10.0)])]).unwrap();
        assert_eq!(nums(&scale(&table, "a", ScaleKind::Minmax).unwrap(), "a"), vec![Some(0.0), Some(1.0)]);
        let table = Table::new("t", vec![Column::numeric("a", vec![Some(5.0); 3])]).unwrap();
        assert_eq!(nums(&scale(&table, "a", ScaleKind::Standard).unwrap(), "a"), vec![Some(0.0); 3]);
        let table = Table::new("t", vec![Column::numeric("a", vec![Some(1.0), Some(2.0), Some(3.0)])]).unwrap();
        let out = nums(&scale(&table, "a", ScaleKind::Standard).unwrap(), "a");
        // sigma = sqrt(2/3): (1-2)/sigma = -1.224744871...
        let expect = [-1.2247, 0.0, 1.2247];
        for (o, e) in out.iter().zip(expect) {
            assert!((o.unwrap() - e).abs() < 1e-4);
        }
        let with_missing = Table::new("t", vec![Column::numeric("a", vec![Some(1.0), None])]).unwrap();
        assert_eq!(scale(&with_missing, "a", ScaleKind::Minmax).unwrap_err().code(), "E_HAS_MISSING");
    }

    #[test]
    fn onehot_examples() {
        let table = Table::new("t", vec![Column::categorical("c", vec![Some("a".into()), Some("b".into()), Some("a".into()), None])]).unwrap();
        let out = onehot(&table, "c", 32).unwrap();
        assert_eq!(out.column_names(), vec!["c=a", "c=b"]);
        assert_eq!(nums(&out, "c=a"), vec![Some(1.0), Some(0.0), Some(1.0), Some(0.0)]);
        assert_eq!(nums(&out, "c=b"), vec![Some(0.0), Some(1.0), Some(0.0), Some(0.0)]);

        let vals: Vec<Option<String>> = (0..40).map(|i| Some(format!("v{i:02}"))).collect();
        let table = Table::new("t", vec![Column::categorical("c", vals)]).unwrap();
        let out = onehot(&table, "c", 32).unwrap();
        assert_eq!(out.columns.len(), 33);
        assert_eq!(out.columns[32].name, "c=__other__");
        assert_eq!(nums(&out, "c=__other__").iter().flatten().sum::<f64>(), 8.0);
        let numeric = Table::new("t", vec![Column::numeric("x", vec![Some(1.0)])]).unwrap();
        assert_eq!(onehot(&numeric, "x", 32).unwrap_err().code(), "E_TYPE_MISMATCH");
    }

    #[test]
    fn clip_examples() {
        let table = Table::new("t", vec![Column::numeric("a", [0.0, 0.0, 0.0, 0.0, 100.0].map(Some).to_vec())]).unwrap();
        let out = clip_outliers(&table, "a", ClipMethod::Zscore(1.0)).unwrap();
        // mean 20, population sd 40
        assert_eq!(nums(&out, "a")[4], Some(60.0));

        let skewed = Table::new("t", vec![Column::numeric("a", [1.0, 2.0, 3.0, 4.0, 50.0, -40.0].map(Some).to_vec())]).unwrap();
        let once = clip_outliers(&skewed, "a", ClipMethod::Iqr(1.5)).unwrap();
        let twice = clip_outliers(&once, "a", ClipMethod::Iqr(1.5)).unwrap();
        assert_ne!(once.columns, skewed.columns);
        assert_eq!(twice.columns, once.columns);

        let inside = Table::new("t", vec![Column::numeric("a", [1.0, 2.0, 3.0, 4.0].map(Some).to_vec())]).unwrap();
        let out = clip_outliers(&inside, "a", ClipMethod::Iqr(1.5)).unwrap();
        assert_eq!(out.columns, inside.columns);
    }

    #[test]
    fn split_examples() {
        let vals = (0..10).map(|i| Some(i as f64)).collect();
        let table = Table::new("t", vec![Column::numeric("a", vals)]).unwrap();
        let (a, b) = split(&table, 0.8, 42, "a", "b").unwrap();
        assert_eq!((a.n_rows, b.n_rows), (8, 2));
        let (a2, b2) = split(&table, 0.8, 42, "a", "b").unwrap();
        assert_eq!((a.clone(), b.clone()), (a2, b2));
        let mut all: Vec<f64> = nums(&a, "a").into_iter().chain(nums(&b, "a")).flatten().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(|i| i as f64).collect::<Vec<_>>());
        let one = Table::new("t", vec![Column::numeric("a", vec![Some(1.0)])]).unwrap();
        assert_eq!(split(&one, 0.5, 1, "a", "b").unwrap_err().code(), "E_TOO_FEW_ROWS");
    }

    #[test]
    fn select_features_examples() {
        let mut rng = SplitMix64::new(11);
        let y: Vec<Option<f64>> = (0..100).map(|_| Some(rng.next_gaussian())).collect();
        let noise: Vec<Option<f64>> = (0..100).map(|_| Some(rng.next_gaussian())).collect();
        let table = Table::new(
            "t",
            vec![
                Column::numeric("noise", noise),
                Column::numeric("copy", y.clone()),
                Column::categorical("g", vec![Some("a".into()); 100]),
                Column::numeric("y", y),
            ],
        )
        .unwrap();
        let out = select_features(&table, "y", 1).unwrap();
        assert_eq!(out.column_names(), vec!["copy", "g", "y"]);
        let same = select_features(&table, "y", 5).unwrap();
        assert_eq!(same.columns, table.columns);
        let only_cat = Table::new("t", vec![Column::categorical("g", vec![Some("a".into())]), Column::numeric("y", vec![Some(1.0)])]).unwrap();
        assert_eq!(select_features(&only_cat, "y", 1).unwrap_err(), DataError::NoNumericFeatures);
    }

    #[test]
    fn lineage_replays_and_input_untouched() {
        let table = t("a,c\n1,x\n,y\n3,x\n10,y\n");
        let before = table.clone();
        let t1 = impute(&table, "a", &ImputeStrategy::Median).unwrap();
        let t2 = onehot(&t1, "c", 32).unwrap();
        let t3 = scale(&t2, "a", ScaleKind::Standard).unwrap();
        assert_eq!(table, before);
        assert_eq!((t1.version, t2.version, t3.version), (2, 3, 4));
        assert_eq!(Table::replay(&table, &t3.lineage).unwrap(), t3);
    }

    #[test]
    fn csv_roundtrip_of_values() {
        let table = t("a,b\n1.5,\"x,y\"\n,z\n");
        let again = read_csv(&table.to_csv(), "t").unwrap();
        assert_eq!(again.columns, table.columns);
    }
}
