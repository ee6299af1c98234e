//! Seeded generators for the bundled datasets.
//!
//! Both datasets have 500 rows (ids 1..=500); the first 400 form the train
//! file, the last 100 the test file, whose labels are written separately.
//!
//! Binary: `x1..x4 ~ N(0,1)`, `segment` uniform over {a, b, c};
//! `y ~ Bernoulli(sigmoid(2.5*x1 - 2*x2 + 0.3))`. `x3`, `x4` and `segment`
//! carry no signal; `x3` is missing with probability 0.05.
//!
//! Regression: same feature layout with `region` in place of `segment`;
//! `y = 1.5 + 3*x1 - 2*x2 + r + e` with `r` = 0, 1, -1 for north, south,
//! east and `e ~ N(0, 1)`. The Bayes-optimal RMSE is therefore 1.

use crate::data::Task;
use crate::llm::FixtureEntry;
use crate::rng::SplitMix64;

pub const N_ROWS: usize = 500;
pub const TRAIN_ROWS: usize = 400;
pub const MISSING_RATE: f64 = 0.05;
pub const REGRESSION_NOISE_SIGMA: f64 = 1.0;
pub const BINARY_SEED: u64 = 20240501;
pub const REGRESSION_SEED: u64 = 20240502;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub name: &'static str,
    pub target: &'static str,
    pub task: Task,
    pub train_csv: String,
    pub test_csv: String,
    /// `id,<target>` for the test rows.
    pub test_labels_csv: String,
    /// Noise-free signal per test row: the logit for binary, the conditional
    /// mean for regression.
    pub test_signal: Vec<f64>,
}

pub fn binary_logit(x1: f64, x2: f64) -> f64 {
    2.5 * x1 - 2.0 * x2 + 0.3
}

pub fn regression_mean(x1: f64, x2: f64, region: &str) -> f64 {
    let r = match region {
        "south" => 1.0,
        "east" => -1.0,
        _ => 0.0,
    };
    1.5 + 3.0 * x1 - 2.0 * x2 + r
}

struct Row {
    id: usize,
    x: [f64; 4],
    x3_missing: bool,
    cat: &'static str,
    y: String,
    signal: f64,
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn assemble(name: &'static str, cat_name: &str, task: Task, rows: Vec<Row>) -> SyntheticDataset {
    let header = format!("id,x1,x2,x3,x4,{cat_name}");
    let mut train = format!("{header},y\n");
    let mut test = format!("{header}\n");
    let mut labels = String::from("id,y\n");
    let mut test_signal = Vec::new();
    for r in &rows {
        let x3 = if r.x3_missing { String::new() } else { fmt(r.x[2]) };
        let line = format!("{},{},{},{},{},{}", r.id, fmt(r.x[0]), fmt(r.x[1]), x3, fmt(r.x[3]), r.cat);
        if r.id <= TRAIN_ROWS {
            train.push_str(&format!("{line},{}\n", r.y));
        } else {
            test.push_str(&format!("{line}\n"));
            labels.push_str(&format!("{},{}\n", r.id, r.y));
            test_signal.push(r.signal);
        }
    }
    SyntheticDataset { name, target: "y", task, train_csv: train, test_csv: test, test_labels_csv: labels, test_signal }
}

fn features(rng: &mut SplitMix64, cats: &[&'static str; 3]) -> ([f64; 4], bool, &'static str) {
    let x = [rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian()];
    let missing = rng.next_f64() < MISSING_RATE;
    let cat = cats[rng.below(3) as usize];
    (x, missing, cat)
}

/// Values are rounded to 4 decimals in the CSV; the signal uses the
/// rounded values so it matches what a learner sees.
fn round4(v: f64) -> f64 {
    fmt(v).parse().expect("formatted float")
}

pub fn binary(seed: u64) -> SyntheticDataset {
    let mut rng = SplitMix64::new(seed);
    let rows = (1..=N_ROWS)
        .map(|id| {
            let (x, x3_missing, cat) = features(&mut rng, &["a", "b", "c"]);
            let x = x.map(round4);
            let logit = binary_logit(x[0], x[1]);
            let p = 1.0 / (1.0 + (-logit).exp());
            let y = u8::from(rng.next_f64() < p);
            Row { id, x, x3_missing, cat, y: y.to_string(), signal: logit }
        })
        .collect();
    assemble("binary", "segment", Task::BinaryClassification, rows)
}

pub fn regression(seed: u64) -> SyntheticDataset {
    let mut rng = SplitMix64::new(seed);
    let rows = (1..=N_ROWS)
        .map(|id| {
            let (x, x3_missing, cat) = features(&mut rng, &["north", "south", "east"]);
            let x = x.map(round4);
            let mean = regression_mean(x[0], x[1], cat);
            let y = mean + REGRESSION_NOISE_SIGMA * rng.next_gaussian();
            Row { id, x, x3_missing, cat, y: fmt(y), signal: mean }
        })
        .collect();
    assemble("regression", "region", Task::Regression, rows)
}

pub fn bundled() -> [SyntheticDataset; 2] {
    [binary(BINARY_SEED), regression(REGRESSION_SEED)]
}

struct FixtureParts {
    cat: &'static str,
    metric: &'static str,
    family: &'static str,
    candidates: &'static [(&'static str, &'static str)],
    space: &'static str,
    select_top: usize,
    profile_summary: &'static str,
}

fn entry(expect: &str, response: String) -> FixtureEntry {
    FixtureEntry { expect_substring: Some(expect.to_string()), response }
}

fn fixture_from(p: &FixtureParts) -> Vec<FixtureEntry> {
    let (cat, metric, family, top) = (p.cat, p.metric, p.family, p.select_top);
    let mut trains = String::new();
    let mut evals = String::new();
    for (name, line) in p.candidates {
        trains.push_str(&format!("{line} as {name}\n"));
        evals.push_str(&format!("evaluate {name} on va metric {metric}\n"));
    }
    let best = format!("m_{family}");
    vec![
        entry("Explore the dataset", "Thought: I will record the target column first.\nAction: set_target\nAction Input: y".into()),
        entry("Observation:", "Thought: Now I need a profile of both tables.\nAction: delegate_code\nAction Input: Profile the train and test tables.".into()),
        entry("Task: Profile", "```\nprofile train\nprofile test\n```".into()),
        entry("Observation:", format!("Final Answer: {}", p.profile_summary)),
        entry(
            "Process the dataset",
            format!(
                "Thought: x3 has missing values, {cat} is categorical and id is only a row key.\nAction: delegate_code\n\
                 Action Input: On both train and test impute x3 with the median and one-hot encode {cat}; drop id from train and keep the {top} features most correlated with y."
            ),
        ),
        entry("Task: On both", format!("```\nimpute train.x3 median\nimpute test.x3 median\nonehot train.{cat}\nonehot test.{cat}\ndrop train.id\nselect_features train target y top {top}\n```")),
        entry(
            "Attempt 1 failed",
            format!("```\nimpute train.x3 with median\nimpute test.x3 with median\nonehot train.{cat}\nonehot test.{cat}\ndrop train.id\nselect_features train target y top {top}\n```"),
        ),
        entry(
            "Observation:",
            format!("Final Answer: Missing x3 values are filled with the median, {cat} is one-hot encoded on both tables, id is dropped and train keeps the {top} features most correlated with y; every feature is now numeric."),
        ),
        entry(
            "Select the model",
            format!(
                "Thought: I will compare candidate families on a holdout split.\nAction: delegate_code\n\
                 Action Input: Split train 80/20 into tr and va with seed 7, train the candidate models on tr and evaluate each on va with {metric}."
            ),
        ),
        entry("Task: Split", format!("```\nsplit train into tr, va ratio 0.8 seed 7\n{trains}{evals}```")),
        entry("Observation:", format!("Thought: {family} has the best validation {metric}.\nAction: choose_model\nAction Input: {best}")),
        entry("Observation:", format!("Final Answer: {family} wins on the validation split, so I chose {best}.")),
        entry(
            "Fine tune the parameters",
            format!(
                "Thought: Tune the {family} family on all training rows.\nAction: delegate_code\n\
                 Action Input: Tune {family} on train with 5-fold cv and successive halving over 8 configurations, metric {metric}."
            ),
        ),
        entry(
            "Task: Tune",
            format!("```\ntune {family} on train target y metric {metric} budget 8 cv 5 strategy halving space {{ {} }} as m_tuned\n```", p.space),
        ),
        entry("Observation:", "Thought: The tuned model was retrained on all rows; I will use it.\nAction: choose_model\nAction Input: m_tuned".into()),
        entry("Observation:", format!("Final Answer: Tuning finished and m_tuned ({family}) is the final model.")),
    ]
}

/// Scripted completions driving the four canonical instructions on the
/// bundled binary dataset.
pub fn binary_fixture() -> Vec<FixtureEntry> {
    fixture_from(&FixtureParts {
        cat: "segment",
        metric: "auc",
        family: "logistic",
        candidates: &[
            ("m_baseline", "train baseline on tr target y"),
            ("m_logistic", "train logistic on tr target y"),
            ("m_tree", "train tree on tr target y max_depth=4"),
        ],
        space: "lr: loguniform(0.01, 1), l2: loguniform(0.0001, 0.1)",
        select_top: 2,
        profile_summary: "The train table has 400 rows; y is a binary target, x3 has a few missing values and segment is categorical with three levels.",
    })
}

/// Scripted completions for the bundled regression dataset.
pub fn regression_fixture() -> Vec<FixtureEntry> {
    fixture_from(&FixtureParts {
        cat: "region",
        metric: "rmse",
        family: "linear",
        candidates: &[
            ("m_baseline", "train baseline on tr target y"),
            ("m_linear", "train linear on tr target y"),
            ("m_tree", "train tree on tr target y max_depth=4"),
        ],
        space: "l2: loguniform(0.000001, 10)",
        select_top: 4,
        profile_summary: "The train table has 400 rows; y is a continuous target, x3 has a few missing values and region is categorical with three levels.",
    })
}

pub fn fixture_jsonl(entries: &[FixtureEntry]) -> String {
    entries.iter().map(|e| serde_json::to_string(e).expect("fixture serializes") + "\n").collect()
}
