//! Learners and metrics checked against independent computations.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use tandem_core::ml::{self, Dim, Direction, Family, HyperValue, LinearHead, ModelSpec, Objective, SearchSpace};
use tandem_core::rng::SplitMix64;

fn random_design(rng: &mut SplitMix64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.next_gaussian() * 2.0).collect()).collect();
    let y = rows.iter().map(|r| r.iter().sum::<f64>() + rng.next_gaussian()).collect();
    (rows, y)
}

pub fn ridge_matches_normal_equations() {
    let mut rng = SplitMix64::new(11);
    for case in 0..100 {
        let (rows, y) = random_design(&mut rng, 10, 3);
        let l2 = if case % 4 == 0 { 0.0 } else { rng.next_f64() * 5.0 };
        let head = ml::fit_ridge(&rows, &y, l2).unwrap();

        let x = DMatrix::from_fn(10, 4, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
        let mut penalty = DMatrix::identity(4, 4) * l2;
        penalty[(0, 0)] = 0.0;
        let a = x.transpose() * &x + penalty;
        let b = x.transpose() * DVector::from_column_slice(&y);
        let w = a.lu().solve(&b).expect("non-singular");

        let got = std::iter::once(head.intercept).chain(head.weights.iter().copied());
        for (j, g) in got.enumerate() {
            assert!((g - w[j]).abs() <= 1e-8, "case {case} coef {j}: {g} vs {}", w[j]);
        }
    }
}

pub fn logistic_gradient_matches_finite_differences() {
    let mut rng = SplitMix64::new(12);
    let h = 1e-6;
    for case in 0..50 {
        let d = 1 + rng.below(4) as usize;
        let n = 5 + rng.below(20) as usize;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.next_gaussian()).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| (rng.next_f64() < 0.5) as u8 as f64).collect();
        let head = LinearHead { intercept: rng.next_gaussian(), weights: (0..d).map(|_| rng.next_gaussian()).collect() };
        let l2 = rng.next_f64();
        let (_, gw, gb) = ml::logistic_loss_grad(&rows, &y, &head, l2);

        let loss_at = |head: &LinearHead| ml::logistic_loss_grad(&rows, &y, head, l2).0;
        let check = |analytic: f64, plus: LinearHead, minus: LinearHead, what: &str| {
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            assert!((analytic - fd).abs() <= 1e-4 * fd.abs() + 1e-7, "case {case} {what}: {analytic} vs {fd}");
        };
        for j in 0..d {
            let (mut p, mut m) = (head.clone(), head.clone());
            p.weights[j] += h;
            m.weights[j] -= h;
            check(gw[j], p, m, &format!("w{j}"));
        }
        let (mut p, mut m) = (head.clone(), head.clone());
        p.intercept += h;
        m.intercept -= h;
        check(gb, p, m, "b");
    }
}

/// (concordant + ties/2) / (positives * negatives) over all pairs.
fn brute_auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                pairs += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

/// Every multiset of `n` items drawn from `0..kinds`, as non-decreasing sequences.
fn multisets(n: usize, kinds: usize, start: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() == n {
        out.push(prefix.clone());
        return;
    }
    for k in start..kinds {
        prefix.push(k);
        multisets(n, kinds, k, prefix, out);
        prefix.pop();
    }
}

pub fn auc_matches_brute_force_on_grid() {
    // AUC only depends on the multiset of (score, label) pairs, so each
    // multiset is checked once, fed in a shuffled order.
    const GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut rng = SplitMix64::new(13);
    let mut checked = 0;
    for n in 0..=8 {
        let mut all = Vec::new();
        multisets(n, GRID.len() * 2, 0, &mut Vec::new(), &mut all);
        for items in all {
            let mut items = items;
            rng.shuffle(&mut items);
            let scores: Vec<f64> = items.iter().map(|k| GRID[k / 2]).collect();
            let labels: Vec<f64> = items.iter().map(|k| (k % 2) as f64).collect();
            match (ml::auc(&scores, &labels), brute_auc(&scores, &labels)) {
                (Ok(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{scores:?} {labels:?}: {a} vs {b}"),
                (Err(_), None) => {}
                (a, b) => panic!("{scores:?} {labels:?}: {a:?} vs {b:?}"),
            }
            checked += 1;
        }
    }
    assert_eq!(checked, (0..=8u64).map(|n| binomial(n + 9, 9)).sum::<u64>());
}

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn toy_space() -> SearchSpace {
    SearchSpace { dims: BTreeMap::from([("l2".to_string(), Dim::Uniform(0.0, 1.0))]) }
}

fn l2_of(spec: &ModelSpec) -> f64 {
    match spec.hyperparams["l2"] {
        HyperValue::Real(x) => x,
        ref v => panic!("{v:?}"),
    }
}

fn minimize() -> Objective {
    Objective { metric: "toy".into(), direction: Direction::Minimize }
}

pub fn halving_rungs_and_resources() {
    let base = ModelSpec::new(Family::Linear);
    let mut calls: Vec<f64> = Vec::new();
    let result = ml::successive_halving(&base, &toy_space(), 8, 2, 5, &minimize(), |spec, fraction| {
        calls.push(fraction);
        Ok((l2_of(spec) - 0.3).powi(2))
    })
    .unwrap();
    let mut rungs: Vec<(f64, usize)> = Vec::new();
    for f in &calls {
        match rungs.last_mut() {
            Some((g, c)) if g == f => *c += 1,
            _ => rungs.push((*f, 1)),
        }
    }
    assert_eq!(rungs, vec![(0.125, 8), (0.25, 4), (0.5, 2), (1.0, 1)]);
    assert_eq!(result.history.len(), 15);
}

pub fn halving_keeps_the_full_resource_top_two() {
    for seed in 0..20 {
        let base = ModelSpec::new(Family::Linear);
        let objective = |spec: &ModelSpec| (l2_of(spec) - 0.3).powi(2);
        // Lower resource adds the same offset to every configuration, so the
        // ranking at each rung equals the full-resource ranking.
        let result = ml::successive_halving(&base, &toy_space(), 8, 2, seed, &minimize(), |spec, fraction| {
            Ok(objective(spec) + (1.0 - fraction))
        })
        .unwrap();

        let mut brute: Vec<(f64, f64)> = result.history.iter().filter(|t| t.resource_fraction == 0.125).map(|t| (objective(&t.spec), l2_of(&t.spec))).collect();
        assert_eq!(brute.len(), 8);
        brute.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut finalists: Vec<f64> = result.history.iter().filter(|t| t.resource_fraction == 0.5).map(|t| l2_of(&t.spec)).collect();
        finalists.sort_by(f64::total_cmp);
        let mut top2 = vec![brute[0].1, brute[1].1];
        top2.sort_by(f64::total_cmp);
        assert_eq!(finalists, top2, "seed {seed}");
        assert_eq!(l2_of(&result.best), brute[0].1);
    }
}

pub fn random_search_picks_the_best_draw() {
    let base = ModelSpec::new(Family::Linear);
    let result = ml::random_search(&base, &toy_space(), 10, 3, &minimize(), |spec| Ok((l2_of(spec) - 0.3).abs())).unwrap();
    let best = result.history.iter().map(|t| t.score).fold(f64::INFINITY, f64::min);
    assert_eq!(result.best_score, best);
    assert!(result.history.iter().all(|t| t.resource_fraction == 1.0));
}
