//! Learners, metrics, cross-validation and hyperparameter search.
//!
//! Four model families cover regression and binary/multiclass classification:
//!
//! - `baseline`: target mean, or class frequencies with the mode as label
//! - `linear`: ridge regression solved from the normal equations by Cholesky
//! - `logistic`: full-batch gradient descent on standardized features,
//!   one-vs-rest for more than two classes
//! - `tree`: CART with Gini (classification) or variance (regression) splits
//!
//! Every learner consumes a fully numeric table without missing values;
//! preparing the data is the pipeline's job.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, Column, ColumnType, DataError, Table, Task};
use crate::rng::SplitMix64;
use crate::ErrorCode;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MlError {
    #[error("no such column {0:?}")]
    NoSuchColumn(String),
    #[error("column {column:?} is not ready for training: {reason}")]
    Unprepared { column: String, reason: String },
    #[error("unknown hyperparameter {name:?} for {family}")]
    UnknownHyperparam { family: Family, name: String },
    #[error("invalid hyperparameter {name}: {reason}")]
    InvalidHyperparam { name: String, reason: String },
    #[error("normal equations are singular; use l2 > 0")]
    Singular,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("length mismatch: {truth} truth values vs {predictions} predictions")]
    LengthMismatch { truth: usize, predictions: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("metric {metric} does not apply: {reason}")]
    MetricTaskMismatch { metric: MetricKind, reason: String },
    #[error("need at least {needed} rows, have {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("time budget exhausted: {0}")]
    Budget(String),
    #[error("evaluating {spec}: {source}")]
    Evaluation { spec: String, source: Box<MlError> },
    #[error(transparent)]
    Data(#[from] DataError),
}

impl ErrorCode for MlError {
    fn code(&self) -> &'static str {
        match self {
            MlError::NoSuchColumn(_) => "E_NO_SUCH_COLUMN",
            MlError::Unprepared { .. } => "E_UNPREPARED",
            MlError::UnknownHyperparam { .. } => "E_UNKNOWN_HYPERPARAM",
            MlError::InvalidHyperparam { .. } => "E_INVALID_HYPERPARAM",
            MlError::Singular => "E_SINGULAR",
            MlError::SchemaMismatch(_) => "E_SCHEMA_MISMATCH",
            MlError::LengthMismatch { .. } => "E_LENGTH_MISMATCH",
            MlError::Degenerate(_) => "E_DEGENERATE",
            MlError::MetricTaskMismatch { .. } => "E_METRIC_TASK_MISMATCH",
            MlError::TooFewRows { .. } => "E_TOO_FEW_ROWS",
            MlError::BadConfig(_) => "E_BAD_CONFIG",
            MlError::Budget(_) => "E_BUDGET",
            MlError::Evaluation { source, .. } => source.code(),
            MlError::Data(e) => e.code(),
        }
    }
}

// ---------------------------------------------------------------------------
// Specs

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Baseline,
    Linear,
    Logistic,
    Tree,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Baseline, Family::Linear, Family::Logistic, Family::Tree];

    pub fn parse(name: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Baseline => "baseline",
            Family::Linear => "linear",
            Family::Logistic => "logistic",
            Family::Tree => "tree",
        }
    }

    pub fn hyperparams(self) -> &'static [&'static str] {
        match self {
            Family::Baseline => &[],
            Family::Linear => &["l2"],
            Family::Logistic => &["lr", "epochs", "l2"],
            Family::Tree => &["max_depth", "min_samples_leaf"],
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HyperValue {
    Int(i64),
    Real(f64),
    Text(String),
}

impl std::fmt::Display for HyperValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HyperValue::Int(i) => write!(f, "{i}"),
            HyperValue::Real(x) => write!(f, "{}", fmt_real(*x)),
            HyperValue::Text(s) => write!(f, "{s}"),
        }
    }
}

fn fmt_real(x: f64) -> String {
    if x != 0.0 && (x.abs() < 1e-3 || x.abs() >= 1e6) {
        format!("{x:.4e}")
    } else {
        let s = format!("{x:.6}");
        let s = s.trim_end_matches('0');
        s.strip_suffix('.').map_or_else(|| s.to_string(), |t| format!("{t}.0"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    #[serde(default)]
    pub hyperparams: BTreeMap<String, HyperValue>,
}

impl ModelSpec {
    pub fn new(family: Family) -> Self {
        Self { family, hyperparams: BTreeMap::new() }
    }

    pub fn with(mut self, name: &str, value: HyperValue) -> Self {
        self.hyperparams.insert(name.to_string(), value);
        self
    }

    fn check_names(&self) -> Result<(), MlError> {
        let allowed = self.family.hyperparams();
        match self.hyperparams.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(MlError::UnknownHyperparam { family: self.family, name: k.clone() }),
            None => Ok(()),
        }
    }

    fn real(&self, name: &str, default: f64, min: f64) -> Result<f64, MlError> {
        let v = match self.hyperparams.get(name) {
            None => default,
            Some(HyperValue::Real(x)) => *x,
            Some(HyperValue::Int(i)) => *i as f64,
            Some(HyperValue::Text(t)) => {
                return Err(MlError::InvalidHyperparam { name: name.into(), reason: format!("{t:?} is not a number") })
            }
        };
        if !(v.is_finite() && v >= min) {
            return Err(MlError::InvalidHyperparam { name: name.into(), reason: format!("{v} must be >= {min}") });
        }
        Ok(v)
    }

    fn int(&self, name: &str, default: i64, min: i64) -> Result<usize, MlError> {
        let v = match self.hyperparams.get(name) {
            None => default,
            Some(HyperValue::Int(i)) => *i,
            Some(HyperValue::Real(x)) if x.fract() == 0.0 && x.is_finite() => *x as i64,
            Some(other) => {
                return Err(MlError::InvalidHyperparam { name: name.into(), reason: format!("{other} is not an integer") })
            }
        };
        if v < min {
            return Err(MlError::InvalidHyperparam { name: name.into(), reason: format!("{v} must be >= {min}") });
        }
        Ok(v as usize)
    }
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.family)?;
        if !self.hyperparams.is_empty() {
            let parts: Vec<String> = self.hyperparams.iter().map(|(k, v)| format!("{k}={v}")).collect();
            write!(f, "({})", parts.join(", "))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Fitted models

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub ctype: ColumnType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub intercept: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "node")]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64, probabilities: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FittedParams {
    Constant { value: f64 },
    Prior { probabilities: Vec<f64> },
    Linear(LinearHead),
    /// Binary: one head scoring `classes[1]`. Multiclass: one head per class.
    Logistic { means: Vec<f64>, stds: Vec<f64>, heads: Vec<LinearHead>, epochs_run: usize },
    Tree { nodes: Vec<TreeNode> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub task: Task,
    pub target: String,
    pub feature_schema: Vec<FeatureSpec>,
    /// Sorted class labels; empty for regression.
    pub classes: Vec<String>,
    pub params: FittedParams,
    pub train_rows: usize,
}

impl TrainedModel {
    /// Versioned JSON artifact.
    pub fn to_artifact_json(&self) -> serde_json::Value {
        serde_json::json!({
            "format_version": MODEL_FORMAT_VERSION,
            "family": self.spec.family,
            "hyperparams": self.spec.hyperparams,
            "task": self.task,
            "target": self.target,
            "schema": self.feature_schema,
            "classes": self.classes,
            "parameters": self.params,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Predictions {
    Regression { values: Vec<f64> },
    Classification { classes: Vec<String>, probabilities: Vec<Vec<f64>>, labels: Vec<String> },
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Regression { values } => values.len(),
            Predictions::Classification { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One value per row for export: the regression value, the positive-class
    /// probability for two classes, or the predicted label otherwise.
    pub fn export_column(&self) -> Column {
        match self {
            Predictions::Regression { values } => Column::numeric("prediction", values.iter().map(|v| Some(*v)).collect()),
            Predictions::Classification { classes, probabilities, labels } => {
                if classes.len() == 2 {
                    Column::numeric("prediction", probabilities.iter().map(|p| Some(p[1])).collect())
                } else {
                    Column::categorical("prediction", labels.iter().map(|l| Some(l.clone())).collect())
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training

struct Design {
    features: Vec<FeatureSpec>,
    rows: Vec<Vec<f64>>,
}

fn unprepared(column: &str, reason: impl Into<String>) -> MlError {
    MlError::Unprepared { column: column.to_string(), reason: reason.into() }
}

fn design(table: &Table, features: &[FeatureSpec]) -> Result<Design, MlError> {
    let mut cols = Vec::with_capacity(features.len());
    for f in features {
        let c = table.column(&f.name).map_err(|_| MlError::NoSuchColumn(f.name.clone()))?;
        let v = c.as_numeric().ok_or_else(|| unprepared(&f.name, format!("{} feature; encode it first", c.ctype())))?;
        if c.missing_count() > 0 {
            return Err(unprepared(&f.name, format!("{} missing values; impute first", c.missing_count())));
        }
        cols.push(v);
    }
    let rows = (0..table.n_rows).map(|r| cols.iter().map(|c| c[r].expect("checked")).collect()).collect();
    Ok(Design { features: features.to_vec(), rows })
}

fn training_features(table: &Table, target: &str) -> Vec<FeatureSpec> {
    table
        .columns
        .iter()
        .filter(|c| c.name != target)
        .map(|c| FeatureSpec { name: c.name.clone(), ctype: c.ctype() })
        .collect()
}

fn label_of(column: &Column, row: usize) -> Option<String> {
    column.cell_text(row)
}

fn resolve_task(family: Family, target: &Column) -> Result<Task, MlError> {
    if target.missing_count() > 0 {
        return Err(unprepared(&target.name, format!("target has {} missing values", target.missing_count())));
    }
    let inferred = Task::of_column(target);
    let task = match family {
        Family::Linear => {
            if target.ctype() != ColumnType::Numeric {
                return Err(unprepared(&target.name, "linear regression needs a numeric target"));
            }
            Task::Regression
        }
        Family::Logistic => {
            if !inferred.is_classification() {
                return Err(unprepared(&target.name, "logistic regression needs a classification target"));
            }
            inferred
        }
        Family::Baseline | Family::Tree => inferred,
    };
    if task.is_classification() {
        if let Some(v) = target.as_numeric() {
            if v.iter().flatten().any(|x| x.fract() != 0.0) {
                return Err(unprepared(&target.name, "classification target must be categorical or integer-coded"));
            }
        }
    }
    Ok(task)
}

pub fn train(spec: &ModelSpec, table: &Table, target: &str) -> Result<TrainedModel, MlError> {
    spec.check_names()?;
    let target_col = table.column(target).map_err(|_| MlError::NoSuchColumn(target.to_string()))?;
    let task = resolve_task(spec.family, target_col)?;
    let features = training_features(table, target);
    let x = design(table, &features)?;
    if table.n_rows == 0 {
        return Err(MlError::TooFewRows { needed: 1, got: 0 });
    }

    let (classes, y): (Vec<String>, Vec<f64>) = if task.is_classification() {
        let labels: Vec<String> = (0..table.n_rows).map(|r| label_of(target_col, r).expect("no missing")).collect();
        let mut classes = labels.clone();
        classes.sort();
        classes.dedup();
        let y = labels.iter().map(|l| classes.binary_search(l).expect("class present") as f64).collect();
        (classes, y)
    } else {
        (Vec::new(), target_col.dense_numeric()?)
    };

    let params = match spec.family {
        Family::Baseline => fit_baseline(&y, classes.len()),
        Family::Linear => FittedParams::Linear(fit_ridge(&x.rows, &y, spec.real("l2", 1e-6, 0.0)?)?),
        Family::Logistic => fit_logistic(
            &x.rows,
            &y,
            classes.len(),
            LogisticOptions {
                lr: spec.real("lr", 0.1, 0.0)?,
                epochs: spec.int("epochs", 500, 0)?,
                l2: spec.real("l2", 0.0, 0.0)?,
            },
        ),
        Family::Tree => FittedParams::Tree {
            nodes: fit_tree(
                &x.rows,
                &y,
                classes.len(),
                spec.int("max_depth", 6, 0)?,
                spec.int("min_samples_leaf", 5, 1)?,
            ),
        },
    };
    Ok(TrainedModel {
        spec: spec.clone(),
        task,
        target: target.to_string(),
        feature_schema: x.features,
        classes,
        params,
        train_rows: table.n_rows,
    })
}

fn fit_baseline(y: &[f64], n_classes: usize) -> FittedParams {
    if n_classes == 0 {
        FittedParams::Constant { value: data::mean(y) }
    } else {
        let mut counts = vec![0.0; n_classes];
        for &c in y {
            counts[c as usize] += 1.0;
        }
        let n = y.len() as f64;
        FittedParams::Prior { probabilities: counts.into_iter().map(|c| c / n).collect() }
    }
}

/// Ridge with an unpenalized intercept: solves `(XᵀX + λI')w = Xᵀy` where
/// `I'` has a zero in the intercept position.
pub fn fit_ridge(rows: &[Vec<f64>], y: &[f64], l2: f64) -> Result<LinearHead, MlError> {
    let d = rows.first().map_or(0, Vec::len) + 1;
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    let mut xi = vec![0.0; d];
    for (row, &yi) in rows.iter().zip(y) {
        xi[0] = 1.0;
        xi[1..].copy_from_slice(row);
        for i in 0..d {
            b[i] += xi[i] * yi;
            for j in 0..=i {
                a[i][j] += xi[i] * xi[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            a[j][i] = a[i][j];
        }
        if i > 0 {
            a[i][i] += l2;
        }
    }
    let w = cholesky_solve(a, b).ok_or(MlError::Singular)?;
    Ok(LinearHead { intercept: w[0], weights: w[1..].to_vec() })
}

/// Solves a symmetric positive-definite system; `None` when a pivot vanishes.
fn cholesky_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(1.0);
    let tol = f64::EPSILON * scale * n as f64;
    for j in 0..n {
        let mut diag = a[j][j];
        for k in 0..j {
            diag -= a[j][k] * a[j][k];
        }
        if diag <= tol {
            return None;
        }
        let diag = diag.sqrt();
        a[j][j] = diag;
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            a[i][j] = s / diag;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i][k] * b[k];
        }
        b[i] = s / a[i][i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k][i] * b[k];
        }
        b[i] = s / a[i][i];
    }
    Some(b)
}

#[derive(Debug, Clone, Copy)]
pub struct LogisticOptions {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
}

const EARLY_STOP_DELTA: f64 = 1e-9;
const EARLY_STOP_PATIENCE: usize = 10;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() }
}

/// Mean log-loss plus `(λ/2)‖w‖²` and its gradient `(∂w, ∂b)`; intercept unpenalized.
pub fn logistic_loss_grad(rows: &[Vec<f64>], y: &[f64], head: &LinearHead, l2: f64) -> (f64, Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; head.weights.len()];
    let mut gb = 0.0;
    for (row, &yi) in rows.iter().zip(y) {
        let z = head.intercept + row.iter().zip(&head.weights).map(|(a, b)| a * b).sum::<f64>();
        loss += softplus(z) - yi * z;
        let r = sigmoid(z) - yi;
        gb += r;
        for (g, x) in gw.iter_mut().zip(row) {
            *g += r * x;
        }
    }
    loss /= n;
    gb /= n;
    for (g, w) in gw.iter_mut().zip(&head.weights) {
        *g = *g / n + l2 * w;
    }
    loss += 0.5 * l2 * head.weights.iter().map(|w| w * w).sum::<f64>();
    (loss, gw, gb)
}

/// Gradient descent for one binary head; returns the head and epochs run.
pub fn fit_logistic_head(rows: &[Vec<f64>], y: &[f64], opts: LogisticOptions) -> (LinearHead, usize) {
    let d = rows.first().map_or(0, Vec::len);
    let mut head = LinearHead { intercept: 0.0, weights: vec![0.0; d] };
    let mut prev = f64::INFINITY;
    let mut stalled = 0;
    for epoch in 0..opts.epochs {
        let (loss, gw, gb) = logistic_loss_grad(rows, y, &head, opts.l2);
        if prev - loss < EARLY_STOP_DELTA {
            stalled += 1;
            if stalled >= EARLY_STOP_PATIENCE {
                return (head, epoch);
            }
        } else {
            stalled = 0;
        }
        prev = loss;
        head.intercept -= opts.lr * gb;
        for (w, g) in head.weights.iter_mut().zip(&gw) {
            *w -= opts.lr * g;
        }
    }
    (head, opts.epochs)
}

fn standardize(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let d = rows.first().map_or(0, Vec::len);
    let mut means = Vec::with_capacity(d);
    let mut stds = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        means.push(data::mean(&col));
        let s = data::std_pop(&col);
        stds.push(if s > 0.0 { s } else { 1.0 });
    }
    let z = rows.iter().map(|r| apply_standardize(r, &means, &stds)).collect();
    (means, stds, z)
}

fn apply_standardize(row: &[f64], means: &[f64], stds: &[f64]) -> Vec<f64> {
    row.iter().zip(means).zip(stds).map(|((x, m), s)| (x - m) / s).collect()
}

fn fit_logistic(rows: &[Vec<f64>], y: &[f64], n_classes: usize, opts: LogisticOptions) -> FittedParams {
    let (means, stds, z) = standardize(rows);
    let targets: Vec<usize> = if n_classes <= 2 { vec![1] } else { (0..n_classes).collect() };
    let mut epochs_run = 0;
    let heads = targets
        .into_iter()
        .map(|k| {
            let yk: Vec<f64> = y.iter().map(|&c| if c as usize == k { 1.0 } else { 0.0 }).collect();
            let (head, epochs) = fit_logistic_head(&z, &yk, opts);
            epochs_run = epochs_run.max(epochs);
            head
        })
        .collect();
    FittedParams::Logistic { means, stds, heads, epochs_run }
}

fn gini_sum(counts: &[f64], n: f64) -> f64 {
    // n · Gini = n − Σ c² / n
    if n == 0.0 { 0.0 } else { n - counts.iter().map(|c| c * c).sum::<f64>() / n }
}

struct TreeBuilder<'a> {
    rows: &'a [Vec<f64>],
    y: &'a [f64],
    n_classes: usize,
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn leaf(&self, idx: &[usize]) -> TreeNode {
        let n = idx.len() as f64;
        if self.n_classes == 0 {
            TreeNode::Leaf { value: idx.iter().map(|&i| self.y[i]).sum::<f64>() / n, probabilities: Vec::new() }
        } else {
            let mut p = vec![0.0; self.n_classes];
            for &i in idx {
                p[self.y[i] as usize] += 1.0;
            }
            for v in &mut p {
                *v /= n;
            }
            let best = p.iter().enumerate().fold(0, |b, (k, v)| if *v > p[b] { k } else { b });
            TreeNode::Leaf { value: best as f64, probabilities: p }
        }
    }

    /// n · impurity (Gini for classes, variance otherwise).
    fn impurity(&self, idx: &[usize]) -> f64 {
        let n = idx.len() as f64;
        if self.n_classes == 0 {
            let s: f64 = idx.iter().map(|&i| self.y[i]).sum();
            let ss: f64 = idx.iter().map(|&i| self.y[i] * self.y[i]).sum();
            (ss - s * s / n).max(0.0)
        } else {
            let mut c = vec![0.0; self.n_classes];
            for &i in idx {
                c[self.y[i] as usize] += 1.0;
            }
            gini_sum(&c, n)
        }
    }

    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64, f64)> {
        let n = idx.len();
        let d = self.rows.first().map_or(0, Vec::len);
        let mut best: Option<(usize, f64, f64)> = None;
        let mut order = idx.to_vec();
        for f in 0..d {
            order.sort_by(|&a, &b| self.rows[a][f].total_cmp(&self.rows[b][f]));
            let total_c = self.n_classes;
            let mut left_c = vec![0.0; total_c];
            let mut right_c = vec![0.0; total_c];
            let (mut ls, mut lss, mut rs, mut rss) = (0.0, 0.0, 0.0, 0.0);
            for &i in &order {
                let yi = self.y[i];
                if total_c > 0 {
                    right_c[yi as usize] += 1.0;
                } else {
                    rs += yi;
                    rss += yi * yi;
                }
            }
            for pos in 1..n {
                let i = order[pos - 1];
                let yi = self.y[i];
                if total_c > 0 {
                    left_c[yi as usize] += 1.0;
                    right_c[yi as usize] -= 1.0;
                } else {
                    ls += yi;
                    lss += yi * yi;
                    rs -= yi;
                    rss -= yi * yi;
                }
                let (lo, hi) = (self.rows[i][f], self.rows[order[pos]][f]);
                if pos < self.min_leaf || n - pos < self.min_leaf || lo >= hi {
                    continue;
                }
                let (nl, nr) = (pos as f64, (n - pos) as f64);
                let score = if total_c > 0 {
                    gini_sum(&left_c, nl) + gini_sum(&right_c, nr)
                } else {
                    (lss - ls * ls / nl).max(0.0) + (rss - rs * rs / nr).max(0.0)
                };
                let threshold = lo + (hi - lo) / 2.0;
                if best.is_none_or(|b| score < b.2) {
                    best = Some((f, threshold, score));
                }
            }
        }
        best
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(self.leaf(&idx));
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return id;
        }
        let parent = self.impurity(&idx);
        if parent <= 0.0 {
            return id;
        }
        let Some((feature, threshold, score)) = self.best_split(&idx) else {
            return id;
        };
        if score >= parent {
            return id;
        }
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.rows[i][feature] <= threshold);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id] = TreeNode::Split { feature, threshold, left, right };
        id
    }
}

fn fit_tree(rows: &[Vec<f64>], y: &[f64], n_classes: usize, max_depth: usize, min_leaf: usize) -> Vec<TreeNode> {
    let mut b = TreeBuilder { rows, y, n_classes, max_depth, min_leaf, nodes: Vec::new() };
    b.build((0..rows.len()).collect(), 0);
    b.nodes
}

fn tree_leaf<'a>(nodes: &'a [TreeNode], row: &[f64]) -> &'a TreeNode {
    let mut at = 0;
    loop {
        match &nodes[at] {
            TreeNode::Split { feature, threshold, left, right } => {
                at = if row[*feature] <= *threshold { *left } else { *right };
            }
            leaf => return leaf,
        }
    }
}

// ---------------------------------------------------------------------------
// Prediction

fn check_schema(model: &TrainedModel, table: &Table) -> Result<(), MlError> {
    let mut problems = Vec::new();
    for f in &model.feature_schema {
        match table.column(&f.name) {
            Err(_) => problems.push(format!("missing column {:?}", f.name)),
            Ok(c) if c.ctype() != f.ctype => problems.push(format!("column {:?} is {}, was {}", f.name, c.ctype(), f.ctype)),
            Ok(_) => {}
        }
    }
    for c in &table.columns {
        let known = model.feature_schema.iter().any(|f| f.name == c.name);
        if !known && c.name != model.target && c.name != "id" {
            problems.push(format!("extra column {:?}", c.name));
        }
    }
    if problems.is_empty() { Ok(()) } else { Err(MlError::SchemaMismatch(problems.join("; "))) }
}

pub fn predict(model: &TrainedModel, table: &Table) -> Result<Predictions, MlError> {
    check_schema(model, table)?;
    let x = design(table, &model.feature_schema)?;
    if model.task == Task::Regression {
        let values = x
            .rows
            .iter()
            .map(|row| match &model.params {
                FittedParams::Constant { value } => *value,
                FittedParams::Linear(h) => h.intercept + row.iter().zip(&h.weights).map(|(a, b)| a * b).sum::<f64>(),
                FittedParams::Tree { nodes } => match tree_leaf(nodes, row) {
                    TreeNode::Leaf { value, .. } => *value,
                    TreeNode::Split { .. } => unreachable!(),
                },
                other => unreachable!("regression model with {other:?}"),
            })
            .collect();
        return Ok(Predictions::Regression { values });
    }

    let k = model.classes.len();
    let probabilities: Vec<Vec<f64>> = x
        .rows
        .iter()
        .map(|row| match &model.params {
            FittedParams::Prior { probabilities } => probabilities.clone(),
            FittedParams::Tree { nodes } => match tree_leaf(nodes, row) {
                TreeNode::Leaf { probabilities, .. } => probabilities.clone(),
                TreeNode::Split { .. } => unreachable!(),
            },
            FittedParams::Logistic { means, stds, heads, .. } => {
                let z = apply_standardize(row, means, stds);
                let score = |h: &LinearHead| sigmoid(h.intercept + z.iter().zip(&h.weights).map(|(a, b)| a * b).sum::<f64>());
                if k <= 2 {
                    let p = score(&heads[0]);
                    if k == 2 { vec![1.0 - p, p] } else { vec![1.0] }
                } else {
                    let raw: Vec<f64> = heads.iter().map(score).collect();
                    let total: f64 = raw.iter().sum();
                    if total > 0.0 { raw.iter().map(|p| p / total).collect() } else { vec![1.0 / k as f64; k] }
                }
            }
            other => unreachable!("classification model with {other:?}"),
        })
        .collect();
    let labels = probabilities
        .iter()
        .map(|p| {
            // first maximum = lexicographically smallest class among ties
            let best = p.iter().enumerate().fold(0, |b, (i, v)| if *v > p[b] { i } else { b });
            model.classes[best].clone()
        })
        .collect();
    Ok(Predictions::Classification { classes: model.classes.clone(), probabilities, labels })
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Rmse,
    Mae,
    Accuracy,
    Logloss,
    Auc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    /// `a` strictly better than `b`. NaN is never better than a number.
    pub fn better(self, a: f64, b: f64) -> bool {
        if a.is_nan() {
            return false;
        }
        if b.is_nan() {
            return true;
        }
        match self {
            Direction::Minimize => a < b,
            Direction::Maximize => a > b,
        }
    }
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [MetricKind::Rmse, MetricKind::Mae, MetricKind::Accuracy, MetricKind::Logloss, MetricKind::Auc];

    pub fn parse(name: &str) -> Option<MetricKind> {
        MetricKind::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Rmse => "rmse",
            MetricKind::Mae => "mae",
            MetricKind::Accuracy => "accuracy",
            MetricKind::Logloss => "logloss",
            MetricKind::Auc => "auc",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            MetricKind::Rmse | MetricKind::Mae | MetricKind::Logloss => Direction::Minimize,
            MetricKind::Accuracy | MetricKind::Auc => Direction::Maximize,
        }
    }

    /// Whether the metric is defined for predictions of this task.
    pub fn supports(self, task: Task) -> bool {
        match self {
            MetricKind::Rmse | MetricKind::Mae => task == Task::Regression,
            MetricKind::Accuracy => task.is_classification(),
            MetricKind::Logloss | MetricKind::Auc => task == Task::BinaryClassification,
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_lengths(a: usize, b: usize) -> Result<(), MlError> {
    if a != b || a == 0 {
        return Err(MlError::LengthMismatch { truth: a, predictions: b });
    }
    Ok(())
}

pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64, MlError> {
    check_lengths(truth.len(), pred.len())?;
    Ok((truth.iter().zip(pred).map(|(y, p)| (p - y) * (p - y)).sum::<f64>() / truth.len() as f64).sqrt())
}

pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64, MlError> {
    check_lengths(truth.len(), pred.len())?;
    Ok(truth.iter().zip(pred).map(|(y, p)| (p - y).abs()).sum::<f64>() / truth.len() as f64)
}

pub fn accuracy<T: PartialEq>(truth: &[T], pred: &[T]) -> Result<f64, MlError> {
    check_lengths(truth.len(), pred.len())?;
    Ok(truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
}

pub fn logloss(truth01: &[f64], prob: &[f64]) -> Result<f64, MlError> {
    check_lengths(truth01.len(), prob.len())?;
    let total: f64 = truth01
        .iter()
        .zip(prob)
        .map(|(y, p)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / truth01.len() as f64)
}

/// Pairwise AUC: (concordant + ½·tied) / (n₊·n₋), computed by sorting scores
/// and counting negatives below each group of equal scores.
pub fn auc(scores: &[f64], truth01: &[f64]) -> Result<f64, MlError> {
    check_lengths(truth01.len(), scores.len())?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut neg_below, mut concordant2) = (0u64, 0u64);
    let (mut n_pos, mut n_neg) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if truth01[order[j]] > 0.5 { gp += 1 } else { gn += 1 }
            j += 1;
        }
        concordant2 += 2 * gp * neg_below + gp * gn;
        neg_below += gn;
        n_pos += gp;
        n_neg += gn;
        i = j;
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(MlError::Degenerate(format!("auc needs both classes (positives={n_pos}, negatives={n_neg})")));
    }
    Ok(concordant2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Scores predictions against the truth column of the evaluation table.
pub fn score(kind: MetricKind, truth: &Column, predictions: &Predictions) -> Result<f64, MlError> {
    if truth.missing_count() > 0 {
        return Err(unprepared(&truth.name, "truth column has missing values"));
    }
    let mismatch = |reason: &str| MlError::MetricTaskMismatch { metric: kind, reason: reason.to_string() };
    match (kind, predictions) {
        (MetricKind::Rmse | MetricKind::Mae, Predictions::Regression { values }) => {
            let y = truth.dense_numeric().map_err(|_| mismatch("truth is not numeric"))?;
            if kind == MetricKind::Rmse { rmse(&y, values) } else { mae(&y, values) }
        }
        (MetricKind::Rmse | MetricKind::Mae, _) => Err(mismatch("needs regression predictions")),
        (MetricKind::Accuracy, Predictions::Classification { labels, .. }) => {
            let t: Vec<String> = (0..truth.len()).map(|r| truth.cell_text(r).expect("no missing")).collect();
            accuracy(&t, labels)
        }
        (MetricKind::Accuracy, _) => Err(mismatch("needs class predictions")),
        (MetricKind::Auc | MetricKind::Logloss, preds) => {
            let y = data::encode_target(truth).ok_or_else(|| mismatch("truth is not binary"))?;
            let y: Vec<f64> = y.into_iter().map(|v| v.expect("no missing")).collect();
            let scores: Vec<f64> = match preds {
                Predictions::Regression { values } => values.clone(),
                Predictions::Classification { classes, probabilities, .. } => {
                    if classes.len() != 2 {
                        return Err(mismatch("needs a binary model"));
                    }
                    probabilities.iter().map(|p| p[1]).collect()
                }
            };
            if truth.ctype() == ColumnType::Numeric && y.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(mismatch("numeric truth must be 0/1"));
            }
            if kind == MetricKind::Auc { auc(&scores, &y) } else { logloss(&y, &scores) }
        }
    }
}

/// Trains nothing: predicts `table` with `model` and scores against its target column.
pub fn evaluate(model: &TrainedModel, table: &Table, kind: MetricKind) -> Result<f64, MlError> {
    let truth = table.column(&model.target).map_err(|_| MlError::NoSuchColumn(model.target.clone()))?;
    let preds = predict(model, table)?;
    score(kind, truth, &preds)
}

// ---------------------------------------------------------------------------
// Cross-validation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub mean: f64,
    pub std: f64,
    pub fold_scores: Vec<f64>,
}

/// Fold sizes for `n` rows in `k` folds: the first `n % k` folds get one extra row.
pub fn fold_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

/// Number of rows used at resource fraction `f` of `n`: ⌈f·n⌉, at least 1.
pub fn resource_rows(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n.max(1))
}

pub fn kfold_cv(spec: &ModelSpec, table: &Table, target: &str, k: usize, metric: MetricKind, seed: u64) -> Result<CvResult, MlError> {
    kfold_cv_at(spec, table, target, k, metric, seed, 1.0)
}

/// k-fold CV where each fold trains on the first ⌈fraction·m⌉ of its `m` training rows.
pub fn kfold_cv_at(
    spec: &ModelSpec,
    table: &Table,
    target: &str,
    k: usize,
    metric: MetricKind,
    seed: u64,
    fraction: f64,
) -> Result<CvResult, MlError> {
    if k < 2 {
        return Err(MlError::BadConfig(format!("k = {k}; need k >= 2")));
    }
    if table.n_rows < k {
        return Err(MlError::TooFewRows { needed: k, got: table.n_rows });
    }
    let perm = SplitMix64::new(seed).permutation(table.n_rows);
    let mut fold_scores = Vec::with_capacity(k);
    let mut start = 0;
    for size in fold_sizes(table.n_rows, k) {
        let valid = &perm[start..start + size];
        let mut train_idx: Vec<usize> = perm[..start].iter().chain(&perm[start + size..]).copied().collect();
        train_idx.truncate(resource_rows(train_idx.len(), fraction));
        let tr = table.take_rows("cv_train", &train_idx)?;
        let va = table.take_rows("cv_valid", valid)?;
        let model = train(spec, &tr, target)?;
        fold_scores.push(evaluate(&model, &va, metric)?);
        start += size;
    }
    let mean = data::mean(&fold_scores);
    let std = data::std_pop(&fold_scores);
    Ok(CvResult { mean, std, fold_scores })
}

// ---------------------------------------------------------------------------
// Hyperparameter search

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "args")]
pub enum Dim {
    Uniform(f64, f64),
    LogUniform(f64, f64),
    IntRange(i64, i64),
    Choice(Vec<HyperValue>),
}

impl Dim {
    pub fn validate(&self, name: &str) -> Result<(), MlError> {
        let bad = |reason: String| Err(MlError::BadConfig(format!("dimension {name}: {reason}")));
        match self {
            Dim::Uniform(lo, hi) if !(lo < hi) => bad(format!("need lo < hi, got {lo}, {hi}")),
            Dim::LogUniform(lo, hi) if !(lo < hi) || *lo <= 0.0 => bad(format!("need 0 < lo < hi, got {lo}, {hi}")),
            Dim::IntRange(lo, hi) if lo >= hi => bad(format!("need lo < hi, got {lo}, {hi}")),
            Dim::Choice(v) if v.is_empty() => bad("empty choice".into()),
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut SplitMix64) -> HyperValue {
        match self {
            Dim::Uniform(lo, hi) => HyperValue::Real(lo + (hi - lo) * rng.next_f64()),
            Dim::LogUniform(lo, hi) => {
                let (a, b) = (lo.ln(), hi.ln());
                HyperValue::Real((a + (b - a) * rng.next_f64()).exp())
            }
            Dim::IntRange(lo, hi) => HyperValue::Int(lo + rng.below((hi - lo) as u64 + 1) as i64),
            Dim::Choice(values) => values[rng.below(values.len() as u64) as usize].clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: BTreeMap<String, Dim>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), MlError> {
        self.dims.iter().try_for_each(|(k, d)| d.validate(k))
    }

    /// One draw per dimension, in key order.
    pub fn sample(&self, base: &ModelSpec, rng: &mut SplitMix64) -> ModelSpec {
        let mut spec = base.clone();
        for (name, dim) in &self.dims {
            spec.hyperparams.insert(name.clone(), dim.sample(rng));
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub spec: ModelSpec,
    pub score: f64,
    pub resource_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: ModelSpec,
    pub best_score: f64,
    pub history: Vec<Trial>,
    pub seed: u64,
    pub metric: String,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub metric: String,
    pub direction: Direction,
}

impl Objective {
    pub fn from_metric(metric: MetricKind) -> Self {
        Self { metric: metric.name().to_string(), direction: metric.direction() }
    }
}

fn annotate(spec: &ModelSpec, e: MlError) -> MlError {
    MlError::Evaluation { spec: spec.to_string(), source: Box::new(e) }
}

/// `budget` i.i.d. draws, each evaluated once at full resource.
pub fn random_search<F>(base: &ModelSpec, space: &SearchSpace, budget: usize, seed: u64, objective: &Objective, mut evaluate: F) -> Result<TuneResult, MlError>
where
    F: FnMut(&ModelSpec) -> Result<f64, MlError>,
{
    if budget == 0 {
        return Err(MlError::BadConfig("budget must be >= 1".into()));
    }
    space.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut history: Vec<Trial> = Vec::with_capacity(budget);
    let mut best: Option<usize> = None;
    for _ in 0..budget {
        let spec = space.sample(base, &mut rng);
        let score = evaluate(&spec).map_err(|e| annotate(&spec, e))?;
        if best.is_none_or(|b: usize| objective.direction.better(score, history[b].score)) {
            best = Some(history.len());
        }
        history.push(Trial { spec, score, resource_fraction: 1.0 });
    }
    let b = &history[best.expect("budget >= 1")];
    Ok(TuneResult {
        best: b.spec.clone(),
        best_score: b.score,
        history: history.clone(),
        seed,
        metric: objective.metric.clone(),
        direction: objective.direction,
    })
}

/// Largest `r` with `eta^r <= n`.
fn floor_log(n: usize, eta: usize) -> u32 {
    let mut r = 0;
    let mut p = eta;
    while p <= n {
        r += 1;
        p = match p.checked_mul(eta) {
            Some(v) => v,
            None => break,
        };
    }
    r
}

/// Successive halving: rung `r` evaluates its survivors at resource fraction
/// `eta^(r−R)` (R = ⌊log_eta n_initial⌋) and keeps the best ⌈n_r/eta⌉; stops
/// after the rung evaluated at full resource.
pub fn successive_halving<F>(
    base: &ModelSpec,
    space: &SearchSpace,
    n_initial: usize,
    eta: usize,
    seed: u64,
    objective: &Objective,
    mut evaluate: F,
) -> Result<TuneResult, MlError>
where
    F: FnMut(&ModelSpec, f64) -> Result<f64, MlError>,
{
    if eta < 2 {
        return Err(MlError::BadConfig(format!("eta = {eta}; need eta >= 2")));
    }
    if n_initial < eta {
        return Err(MlError::BadConfig(format!("n_initial = {n_initial} < eta = {eta}")));
    }
    space.validate()?;
    let mut rng = SplitMix64::new(seed);
    let configs: Vec<ModelSpec> = (0..n_initial).map(|_| space.sample(base, &mut rng)).collect();
    let top = floor_log(n_initial, eta);
    let mut survivors: Vec<usize> = (0..n_initial).collect();
    let mut history = Vec::new();
    for rung in 0..=top {
        let fraction = 1.0 / (eta as f64).powi((top - rung) as i32);
        let mut scored = Vec::with_capacity(survivors.len());
        for &i in &survivors {
            let spec = &configs[i];
            let score = evaluate(spec, fraction).map_err(|e| annotate(spec, e))?;
            history.push(Trial { spec: spec.clone(), score, resource_fraction: fraction });
            scored.push((i, score));
        }
        if rung == top {
            let (bi, bs) = scored
                .iter()
                .copied()
                .reduce(|b, c| if objective.direction.better(c.1, b.1) { c } else { b })
                .expect("non-empty rung");
            return Ok(TuneResult {
                best: configs[bi].clone(),
                best_score: bs,
                history,
                seed,
                metric: objective.metric.clone(),
                direction: objective.direction,
            });
        }
        let keep = survivors.len().div_ceil(eta);
        // stable sort: ties keep sampling order
        scored.sort_by(|a, b| {
            if objective.direction.better(a.1, b.1) {
                std::cmp::Ordering::Less
            } else if objective.direction.better(b.1, a.1) {
                std::cmp::Ordering::Greater
            } else {
                std::cmp::Ordering::Equal
            }
        });
        survivors = scored.into_iter().take(keep).map(|s| s.0).collect();
        survivors.sort_unstable();
    }
    unreachable!("loop returns at the top rung")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Column;

    fn table(cols: Vec<Column>) -> Table {
        Table::new("t", cols).unwrap()
    }

    fn num(name: &str, v: &[f64]) -> Column {
        Column::numeric(name, v.iter().map(|x| Some(*x)).collect())
    }

    #[test]
    fn linear_exact_fit_two_points() {
        // (0,1), (1,3): normal equations [[2,1],[1,1]] w = [4,3] -> w = (1, 2)
        let t = table(vec![num("x", &[0.0, 1.0]), num("y", &[1.0, 3.0])]);
        let spec = ModelSpec::new(Family::Linear).with("l2", HyperValue::Real(0.0));
        let m = train(&spec, &t, "y").unwrap();
        match &m.params {
            FittedParams::Linear(h) => {
                assert!((h.intercept - 1.0).abs() < 1e-12);
                assert!((h.weights[0] - 2.0).abs() < 1e-12);
            }
            p => panic!("{p:?}"),
        }
        match predict(&m, &t).unwrap() {
            Predictions::Regression { values } => {
                assert!((values[0] - 1.0).abs() < 1e-12 && (values[1] - 3.0).abs() < 1e-12);
            }
            p => panic!("{p:?}"),
        }
    }

    #[test]
    fn ridge_singular_at_zero_penalty() {
        let t = table(vec![num("a", &[1.0, 2.0, 3.0]), num("b", &[2.0, 4.0, 6.0]), num("y", &[1.0, 2.0, 3.0])]);
        let spec = ModelSpec::new(Family::Linear).with("l2", HyperValue::Real(0.0));
        assert_eq!(train(&spec, &t, "y").unwrap_err(), MlError::Singular);
        assert!(train(&ModelSpec::new(Family::Linear), &t, "y").is_ok());
    }

    #[test]
    fn baseline_regression_predicts_mean() {
        let t = table(vec![num("x", &[5.0, 6.0, 7.0]), num("y", &[1.0, 2.0, 3.0])]);
        let m = train(&ModelSpec::new(Family::Baseline), &t, "y").unwrap();
        assert_eq!(m.task, Task::MulticlassClassification);
        // three distinct numeric values is a class target; force regression with > 10 values
        let xs: Vec<f64> = (0..12).map(f64::from).collect();
        let t = table(vec![num("x", &xs), num("y", &xs)]);
        let m = train(&ModelSpec::new(Family::Baseline), &t, "y").unwrap();
        match predict(&m, &t).unwrap() {
            Predictions::Regression { values } => assert!(values.iter().all(|v| (*v - 5.5).abs() < 1e-12)),
            p => panic!("{p:?}"),
        }
    }

    #[test]
    fn depth_zero_tree_is_baseline() {
        let xs: Vec<f64> = (0..20).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let t = table(vec![num("x", &xs), num("y", &ys)]);
        let tree = train(&ModelSpec::new(Family::Tree).with("max_depth", HyperValue::Int(0)), &t, "y").unwrap();
        let base = train(&ModelSpec::new(Family::Baseline), &t, "y").unwrap();
        assert_eq!(predict(&tree, &t).unwrap(), predict(&base, &t).unwrap());
    }

    #[test]
    fn tree_separates_perfectly() {
        let xs: Vec<f64> = (0..30).map(f64::from).collect();
        let noise: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| if *x < 13.0 { 0.0 } else { 1.0 }).collect();
        let t = table(vec![num("noise", &noise), num("x", &xs), num("y", &ys)]);
        let m = train(&ModelSpec::new(Family::Tree).with("max_depth", HyperValue::Int(1)), &t, "y").unwrap();
        assert_eq!(evaluate(&m, &t, MetricKind::Accuracy).unwrap(), 1.0);
        match &m.params {
            FittedParams::Tree { nodes } => match nodes[0] {
                TreeNode::Split { feature, threshold, .. } => assert_eq!((feature, threshold), (1, 12.5)),
                _ => panic!("root is a leaf"),
            },
            p => panic!("{p:?}"),
        }
    }

    #[test]
    fn logistic_probabilities_well_formed() {
        let xs: Vec<f64> = (0..40).map(|i| f64::from(i) / 4.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| if (*x * 3.0) as i64 % 2 == 0 { 0.0 } else { 1.0 }).collect();
        let t = table(vec![num("x", &xs), num("y", &ys)]);
        let m = train(&ModelSpec::new(Family::Logistic), &t, "y").unwrap();
        match predict(&m, &t).unwrap() {
            Predictions::Classification { probabilities, classes, .. } => {
                assert_eq!(classes, vec!["0", "1"]);
                for p in probabilities {
                    assert!(p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0 && p[1] < 1.0);
                    assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
                }
            }
            p => panic!("{p:?}"),
        }
    }

    #[test]
    fn multiclass_logistic_sums_to_one() {
        let xs: Vec<f64> = (0..60).map(f64::from).collect();
        let labels: Vec<Option<String>> = xs.iter().map(|x| Some(["a", "b", "c"][(*x as usize) / 20].to_string())).collect();
        let t = table(vec![num("x", &xs), Column::categorical("y", labels)]);
        let m = train(&ModelSpec::new(Family::Logistic), &t, "y").unwrap();
        assert_eq!(m.task, Task::MulticlassClassification);
        if let Predictions::Classification { probabilities, .. } = predict(&m, &t).unwrap() {
            for p in probabilities {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!(evaluate(&m, &t, MetricKind::Accuracy).unwrap() > 0.8);
    }

    #[test]
    fn unprepared_and_schema_errors() {
        let t = table(vec![Column::categorical("c", vec![Some("a".into()), Some("b".into())]), num("y", &[0.0, 1.0])]);
        assert_eq!(train(&ModelSpec::new(Family::Tree), &t, "y").unwrap_err().code(), "E_UNPREPARED");
        let t = table(vec![Column::numeric("x", vec![Some(1.0), None]), num("y", &[0.0, 1.0])]);
        assert_eq!(train(&ModelSpec::new(Family::Tree), &t, "y").unwrap_err().code(), "E_UNPREPARED");
        let spec = ModelSpec::new(Family::Tree).with("depth", HyperValue::Int(2));
        assert_eq!(train(&spec, &t, "y").unwrap_err().code(), "E_UNKNOWN_HYPERPARAM");
        assert_eq!(train(&ModelSpec::new(Family::Tree), &t, "zz").unwrap_err().code(), "E_NO_SUCH_COLUMN");

        let t = table(vec![num("a", &[0.0, 1.0, 2.0]), num("b", &[1.0, 0.0, 1.0]), num("y", &[0.0, 1.0, 0.0])]);
        let m = train(&ModelSpec::new(Family::Baseline), &t, "y").unwrap();
        let missing_b = table(vec![num("a", &[0.0])]);
        assert_eq!(predict(&m, &missing_b).unwrap_err().code(), "E_SCHEMA_MISMATCH");
        let extra = table(vec![num("a", &[0.0]), num("b", &[0.0]), num("z", &[0.0])]);
        assert_eq!(predict(&m, &extra).unwrap_err().code(), "E_SCHEMA_MISMATCH");
        let ok = table(vec![num("a", &[0.0]), num("b", &[0.0])]);
        assert_eq!(predict(&m, &ok).unwrap().len(), 1);
    }

    #[test]
    fn metric_examples() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert!((logloss(&[0.0, 1.0, 1.0], &[0.5; 3]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2], &[1.0, 1.0]).unwrap_err().code(), "E_DEGENERATE");
        assert_eq!(rmse(&[1.0], &[1.0, 2.0]).unwrap_err().code(), "E_LENGTH_MISMATCH");
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn fold_sizes_balanced() {
        assert_eq!(fold_sizes(10, 3), vec![4, 3, 3]);
        assert_eq!(fold_sizes(5, 5), vec![1; 5]);
    }

    #[test]
    fn cv_deterministic() {
        let xs: Vec<f64> = (0..30).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + (x * 1.7).sin()).collect();
        let t = table(vec![num("x", &xs), num("y", &ys)]);
        let spec = ModelSpec::new(Family::Linear);
        let a = kfold_cv(&spec, &t, "y", 3, MetricKind::Rmse, 5).unwrap();
        let b = kfold_cv(&spec, &t, "y", 3, MetricKind::Rmse, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fold_scores.len(), 3);
        let loo = kfold_cv(&spec, &t, "y", 30, MetricKind::Rmse, 5).unwrap();
        assert_eq!(loo.fold_scores.len(), 30);
        assert_eq!(kfold_cv(&spec, &t, "y", 31, MetricKind::Rmse, 5).unwrap_err().code(), "E_TOO_FEW_ROWS");
    }

    fn lr_space() -> SearchSpace {
        SearchSpace { dims: BTreeMap::from([("lr".to_string(), Dim::Uniform(0.0, 1.0))]) }
    }

    fn lr_of(spec: &ModelSpec) -> f64 {
        match spec.hyperparams["lr"] {
            HyperValue::Real(x) => x,
            _ => panic!(),
        }
    }

    #[test]
    fn random_search_examples() {
        let base = ModelSpec::new(Family::Logistic);
        let obj = Objective { metric: "toy".into(), direction: Direction::Maximize };
        let one = random_search(&base, &lr_space(), 1, 3, &obj, |s| Ok(lr_of(s))).unwrap();
        assert_eq!(one.history.len(), 1);
        assert_eq!(one.best, one.history[0].spec);

        let f = |s: &ModelSpec| Ok(-(lr_of(s) - 0.3).powi(2));
        let a = random_search(&base, &lr_space(), 64, 7, &obj, f).unwrap();
        let b = random_search(&base, &lr_space(), 64, 7, &obj, f).unwrap();
        assert_eq!(a, b);
        assert!((lr_of(&a.best) - 0.3).abs() < 0.1);
    }

    #[test]
    fn random_search_annotates_errors() {
        let obj = Objective { metric: "toy".into(), direction: Direction::Minimize };
        let err = random_search(&ModelSpec::new(Family::Logistic), &lr_space(), 3, 1, &obj, |_| Err(MlError::Singular)).unwrap_err();
        assert!(matches!(err, MlError::Evaluation { .. }));
        assert_eq!(err.code(), "E_SINGULAR");
        assert!(err.to_string().starts_with("evaluating logistic(lr="));
    }

    #[test]
    fn halving_rungs() {
        let obj = Objective { metric: "toy".into(), direction: Direction::Maximize };
        let base = ModelSpec::new(Family::Logistic);
        let mut calls: Vec<f64> = Vec::new();
        let r = successive_halving(&base, &lr_space(), 8, 2, 1, &obj, |s, f| {
            calls.push(f);
            Ok(lr_of(s))
        })
        .unwrap();
        let count = |f: f64| calls.iter().filter(|c| **c == f).count();
        assert_eq!((count(0.125), count(0.25), count(0.5), count(1.0)), (8, 4, 2, 1));
        assert_eq!(r.history.len(), 15);

        let mut rungs = Vec::new();
        successive_halving(&base, &lr_space(), 2, 2, 1, &obj, |_, f| {
            rungs.push(f);
            Ok(0.0)
        })
        .unwrap();
        assert_eq!(rungs, vec![0.5, 0.5, 1.0]);
        assert_eq!(successive_halving(&base, &lr_space(), 1, 2, 1, &obj, |_, _| Ok(0.0)).unwrap_err().code(), "E_BAD_CONFIG");
    }

    #[test]
    fn space_validation() {
        assert!(Dim::LogUniform(0.0, 1.0).validate("x").is_err());
        assert!(Dim::Uniform(1.0, 1.0).validate("x").is_err());
        assert!(Dim::IntRange(1, 3).validate("x").is_ok());
    }
}
