//! Fixed inputs with exact expected parses, error codes and positions.

use tandem_core::dsl::{self, ClipSpec, ColRef, DslError, ImputeWith, Literal, StmtKind};
use tandem_core::react::{parse_turn, AgentTurn, ReactError, ReactStep};
use tandem_core::ErrorCode;

/// (source, line, column, message)
const DSL_ERRORS: &[(&str, usize, usize, &str)] = &[
    ("", 1, 1, "expected at least one statement, found end of input"),
    ("# only a comment\n\n", 2, 1, "expected at least one statement, found end of input"),
    ("profile", 1, 8, "expected a table name, found end of line"),
    ("profile T", 1, 9, "expected a table name, found \"T\""),
    ("profile t extra", 1, 11, "expected end of line, found \"extra\""),
    ("impute t.x3 median", 1, 13, "expected \"with\", found \"median\""),
    ("impute x3 with mean", 1, 8, "expected a column reference table.column, found \"x3\""),
    ("impute T.x3 with mean", 1, 8, "expected a column reference table.column, found \"T.x3\""),
    ("impute t. with mean", 1, 11, "expected a column name after \".\", found \"with\""),
    ("impute t.x3 with constant", 1, 26, "expected a literal, found end of line"),
    ("impute t.x3 with avg", 1, 18, "expected \"mean\" or \"median\" or \"mode\" or \"constant\", found \"avg\""),
    ("onehot t.cat max two", 1, 18, "expected an integer, found \"two\""),
    ("onehot t.cat max 2.5", 1, 18, "expected an integer, found \"2.5\""),
    ("scale t.x1 zscore", 1, 12, "expected \"standard\" or \"minmax\", found \"zscore\""),
    ("clip_outliers t.x1 iqr abc", 1, 24, "expected a number, found \"abc\""),
    ("clip_outliers t.x1 zscore", 1, 26, "expected a number, found end of line"),
    ("split t into a b ratio 0.8 seed 1", 1, 16, "expected \",\", found \"b\""),
    ("split t into a, b ratio high seed 1", 1, 25, "expected a number, found \"high\""),
    ("split t into a, b ratio 0.8 seed 1.5", 1, 34, "expected an integer, found \"1.5\""),
    ("split t into a, b ratio 0.8", 1, 28, "expected \"seed\", found end of line"),
    ("train linear on t target y lr 0.1 as m", 1, 28, "expected key=value or \"as\", found \"lr\""),
    ("train linear on t target y lr= as m", 1, 32, "expected a value after \"=\", found \"as\""),
    ("train linear on t target y", 1, 27, "expected \"as\", found end of line"),
    ("train linear on t target y as M", 1, 31, "expected a model name, found \"M\""),
    ("train Linear on t target y as m", 1, 7, "expected a model family, found \"Linear\""),
    ("train linear on t target y max_depth=3 as", 1, 42, "expected a model name, found end of line"),
    ("evaluate m on t", 1, 16, "expected \"metric\", found end of line"),
    ("evaluate m on t metric", 1, 23, "expected a metric name, found end of line"),
    (
        "tune linear on t target y metric rmse budget 8 space { l2 loguniform(1, 2) } as m",
        1,
        59,
        "expected \":\", found \"loguniform\"",
    ),
    (
        "tune linear on t target y metric rmse budget 8 space { l2: gaussian(1, 2) } as m",
        1,
        60,
        "expected \"uniform\" or \"loguniform\" or \"int\" or \"choice\", found \"gaussian\"",
    ),
    ("tune linear on t target y metric rmse budget 8 space { l2: uniform(1, 2) as m", 1, 74, "expected \"}\", found \"as\""),
    ("tune linear on t target y metric rmse budget 8 space { l2: uniform() } as m", 1, 68, "expected a literal, found \")\""),
    ("tune linear on t target y metric rmse space {} as m", 1, 39, "expected \"budget\", found \"space\""),
    ("tune linear on t target y metric rmse budget 8 cv k space {} as m", 1, 51, "expected an integer, found \"k\""),
    ("save t out.csv", 1, 8, "expected a quoted path, found \"out.csv\""),
    ("save t \"unterminated", 1, 8, "expected closing '\"', found end of line"),
    ("save t \"bad\\q\"", 1, 12, "expected escape sequence, found \"\\q\""),
    ("profile t\nprofile u\nbogus", 3, 1, "found \"bogus\""),
    ("impute t.x3 with mean ;", 1, 23, "expected end of line, found \";\""),
    ("profile t\u{7}", 1, 10, "expected a token, found '\\u{7}'"),
    ("select_features t target y top -", 1, 32, "expected an integer, found \"-\""),
    ("predict m on t as", 1, 18, "expected a table name, found end of line"),
    ("drop t.x1 t.x2", 1, 11, "expected end of line, found \"t.x2\""),
    ("impute t.\"é λ\" wth mean", 1, 16, "expected \"with\", found \"wth\""),
];

fn col(table: &str, column: &str) -> ColRef {
    ColRef { table: table.into(), column: column.into() }
}

fn dsl_successes() -> Vec<(&'static str, Vec<(usize, StmtKind)>)> {
    vec![
        ("profile t # comment", vec![(1, StmtKind::Profile { table: "t".into() })]),
        ("\n\nprofile t\n", vec![(3, StmtKind::Profile { table: "t".into() })]),
        ("profile\tt", vec![(1, StmtKind::Profile { table: "t".into() })]),
        (
            "profile t\r\nprofile u\r\n",
            vec![(1, StmtKind::Profile { table: "t".into() }), (2, StmtKind::Profile { table: "u".into() })],
        ),
        (
            "impute t.\"my col\" with constant \"n/a\"",
            vec![(1, StmtKind::Impute { col: col("t", "my col"), with: ImputeWith::Constant(Literal::Str("n/a".into())) })],
        ),
        (
            "impute t.x with constant -1e3",
            vec![(1, StmtKind::Impute { col: col("t", "x"), with: ImputeWith::Constant(Literal::Float(-1000.0)) })],
        ),
        ("impute t.a.b with mode", vec![(1, StmtKind::Impute { col: col("t", "a.b"), with: ImputeWith::Mode })]),
        (
            "train tree on t target y max_depth=3 lr=0.5 name=\"x y\" as m",
            vec![(
                1,
                StmtKind::Train {
                    family: "tree".into(),
                    table: "t".into(),
                    target: "y".into(),
                    params: vec![
                        ("max_depth".into(), Literal::Int(3)),
                        ("lr".into(), Literal::Float(0.5)),
                        ("name".into(), Literal::Str("x y".into())),
                    ],
                    out: "m".into(),
                },
            )],
        ),
        (
            "clip_outliers t.x iqr\nclip_outliers t.x iqr 2",
            vec![
                (1, StmtKind::ClipOutliers { col: col("t", "x"), method: ClipSpec::Iqr(None) }),
                (2, StmtKind::ClipOutliers { col: col("t", "x"), method: ClipSpec::Iqr(Some(Literal::Int(2))) }),
            ],
        ),
        (
            "split t into a,b ratio .8 seed 7",
            vec![(
                1,
                StmtKind::Split { table: "t".into(), first: "a".into(), second: "b".into(), ratio: Literal::Float(0.8), seed: 7 },
            )],
        ),
        (
            "tune linear on t target y metric rmse budget 4 space {} as m",
            vec![(
                1,
                StmtKind::Tune {
                    family: "linear".into(),
                    table: "t".into(),
                    target: "y".into(),
                    metric: "rmse".into(),
                    budget: 4,
                    cv: None,
                    strategy: None,
                    space: vec![],
                    out: "m".into(),
                },
            )],
        ),
        ("onehot t.cat max 3", vec![(1, StmtKind::Onehot { col: col("t", "cat"), max_card: Some(3) })]),
        ("save t \"a\\\"b.csv\"", vec![(1, StmtKind::Save { table: "t".into(), path: "a\"b.csv".into() })]),
        (
            "evaluate m on t metric auc",
            vec![(1, StmtKind::Evaluate { model: "m".into(), table: "t".into(), metric: "auc".into() })],
        ),
        (
            "select_features t target \"the y\" top 2",
            vec![(1, StmtKind::SelectFeatures { table: "t".into(), target: "the y".into(), top: 2 })],
        ),
    ]
}

pub fn dsl_error_corpus() -> usize {
    for &(source, line, column, message) in DSL_ERRORS {
        let err = dsl::parse(source).expect_err(source);
        assert_eq!(err.code(), "E_DSL_SYNTAX", "{source:?}");
        match err {
            DslError::Syntax { line: l, col: c, message: m } => {
                assert_eq!((l, c), (line, column), "{source:?}: {m}");
                if message.starts_with("expected") {
                    assert_eq!(m, message, "{source:?}");
                } else {
                    assert!(m.ends_with(message), "{source:?}: {m}");
                }
            }
            other => panic!("{source:?}: {other:?}"),
        }
    }
    DSL_ERRORS.len()
}

pub fn dsl_success_corpus() -> usize {
    let cases = dsl_successes();
    let n = cases.len();
    for (source, expected) in cases {
        let script = dsl::parse(source).unwrap_or_else(|e| panic!("{source:?}: {e}"));
        let got: Vec<(usize, StmtKind)> = script.statements.into_iter().map(|s| (s.line, s.kind)).collect();
        assert_eq!(got, expected, "{source:?}");
    }
    n
}

fn step(thought: &str, action: &str, input: &str) -> Result<AgentTurn, ReactError> {
    Ok(AgentTurn::Step(ReactStep { thought: thought.into(), action: action.into(), action_input: input.into() }))
}

fn fin(answer: &str) -> Result<AgentTurn, ReactError> {
    Ok(AgentTurn::Final(answer.into()))
}

fn malformed(diagnostic: &str) -> Result<AgentTurn, ReactError> {
    Err(ReactError::Malformed(diagnostic.into()))
}

pub fn react_corpus() -> usize {
    let cases: Vec<(&str, Result<AgentTurn, ReactError>)> = vec![
        ("Thought: a\nAction: inspect\nAction Input: train", step("a", "inspect", "train")),
        ("Final Answer: done", fin("done")),
        ("Thought: x\nFinal Answer:  multi\nline  \n", fin("multi\nline")),
        ("Action: inspect\nAction Input: t", step("", "inspect", "t")),
        ("Thought: a\nAction: inspect", malformed("missing Action Input")),
        ("Action Input: t", malformed("missing Action")),
        ("Thought: a\nAction Input: b", malformed("missing Action")),
        ("hello", malformed("missing Action or Final Answer")),
        ("", malformed("missing Action or Final Answer")),
        ("final answer: lower", malformed("missing Action or Final Answer")),
        ("Thought: a\nAction:   \nAction Input: t", malformed("empty Action")),
        ("Thought: a\nAction: x\nAction: y\nAction Input: z", step("a", "y", "z")),
        ("Action Input: early\nAction: x\nAction Input: late", step("", "x", "late")),
        ("Thought: first\nThought: second\nAction: a\nAction Input: b", step("second", "a", "b")),
        (
            "Action: a\nAction Input: line1\nline2\nFinal Answer: not this",
            step("", "a", "line1\nline2\nFinal Answer: not this"),
        ),
        ("Final Answer: x\nAction: a\nAction Input: b", fin("x\nAction: a\nAction Input: b")),
        ("  Thought: indented\nAction: a\nAction Input: b", step("", "a", "b")),
        ("Thought: t\r\nAction: a\r\nAction Input: b\r\n", step("t", "a", "b")),
        ("Action: a\nAction Input:", step("", "a", "")),
        ("Final Answer:", fin("")),
        ("Observation: x\nThought: t\nAction: a\nAction Input: b", step("t", "a", "b")),
        ("Thought:no space\nAction:a\nAction Input:b", step("no space", "a", "b")),
        ("Action: delegate_code\nAction Input: ```\nprofile t\n```", step("", "delegate_code", "```\nprofile t\n```")),
        ("Thought: é\nAction: ü\nAction Input: 中", step("é", "ü", "中")),
        ("Action:  inspect  \nAction Input:  t  ", step("", "inspect", "t")),
        ("Some preamble.\nThought: t\nAction: a\nAction Input: b\n\nObservation: invented", step("t", "a", "b\n\nObservation: invented")),
    ];
    let n = cases.len();
    for (raw, expected) in cases {
        let got = parse_turn(raw);
        assert_eq!(got, expected, "{raw:?}");
        if let Err(e) = got {
            assert_eq!(e.code(), "E_REACT_MALFORMED");
        }
    }
    n
}
