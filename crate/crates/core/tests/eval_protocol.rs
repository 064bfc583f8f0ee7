mod common;

use std::collections::HashMap;

use common::*;
use ease_core::data::{
    derive_seed, fold_in_split, popularity, split_strong_generalization, PopularityVector, SparseRow,
    TimeIntervalIndex, UserItemMatrix,
};
use ease_core::matrix::DenseMatrix;
use ease_core::error::Result;
use ease_core::eval::{
    evaluate_model, evaluate_time_aware, grid_search_lambda, ndcg_at_k, recall_at_k, top_k, EvalConfig,
    PopularityScorer, Scorer,
};
use ease_core::gram::build_self_gram;
use ease_core::solver::{solve_ease, Variant};
use proptest::prelude::*;
use rand::Rng;

/// Knows every user's full history; scores the items of whichever user the
/// input came from.
struct OracleScorer {
    blocks: usize,
    block: usize,
}

impl Scorer for OracleScorer {
    fn n_items(&self) -> usize {
        self.blocks * self.block
    }

    fn scores(&self, history: &SparseRow) -> Result<Vec<f64>> {
        let b = history.items[0] / self.block;
        Ok((0..self.n_items()).map(|i| if i / self.block == b { 1.0 } else { 0.0 }).collect())
    }
}

struct RandomScorer {
    n: usize,
    seed: u64,
}

impl Scorer for RandomScorer {
    fn n_items(&self) -> usize {
        self.n
    }

    fn scores(&self, history: &SparseRow) -> Result<Vec<f64>> {
        let mut r = rng(self.seed ^ history.items.iter().map(|&i| i as u64 * 0x9E37).sum::<u64>());
        Ok((0..self.n).map(|_| r.random::<f64>()).collect())
    }
}

fn block_users(blocks: usize, block: usize) -> UserItemMatrix {
    let rows: Vec<Vec<f64>> = (0..blocks)
        .map(|u| (0..blocks * block).map(|i| if i / block == u { 1.0 } else { 0.0 }).collect())
        .collect();
    uim(&rows)
}

proptest! {
    #[test]
    fn metrics_match_definitions(perm in Just((0..30usize).collect::<Vec<_>>()).prop_shuffle(),
                                 held in prop::collection::btree_set(0..30usize, 1..10),
                                 k in 1usize..40) {
        let held: Vec<usize> = held.into_iter().collect();
        prop_assert!((recall_at_k(&perm, &held, k).unwrap() - naive_recall(&perm, &held, k)).abs() < 1e-12);
        prop_assert!((ndcg_at_k(&perm, &held, k).unwrap() - naive_ndcg(&perm, &held, k)).abs() < 1e-12);
    }

    #[test]
    fn top_k_never_returns_inputs(seed in any::<u64>(), k in 0usize..25) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..20).map(|_| (r.random_range(0..5)) as f64).collect();
        let exclude: Vec<usize> = (0..20).filter(|_| r.random_bool(0.3)).collect();
        let ranked = top_k(&scores, &exclude, None, k);
        prop_assert_eq!(ranked.len(), k.min(20 - exclude.len()));
        prop_assert!(ranked.iter().all(|i| !exclude.contains(i)));
        for w in ranked.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
    }
}

#[test]
fn oracle_model_scores_perfectly() {
    let matrix = block_users(12, 10);
    let users: Vec<usize> = (0..12).collect();
    let report = evaluate_model(&OracleScorer { blocks: 12, block: 10 }, &matrix, &users, &EvalConfig::default()).unwrap();
    assert_eq!(report.n_users, 12);
    for m in report.metrics.values() {
        assert_eq!(m.mean, 1.0);
        assert_eq!(m.stderr, 0.0);
    }
}

#[test]
fn random_ranker_is_near_chance() {
    let mut r = rng(44);
    let n_items = 200;
    let rows = random_binary(&mut r, 400, n_items, 0.1);
    let matrix = uim(&rows);
    let users: Vec<usize> = (0..400).collect();
    let cfg = EvalConfig {
        recall_ks: vec![20],
        ndcg_ks: vec![],
        ..EvalConfig::default()
    };
    let report = evaluate_model(&RandomScorer { n: n_items, seed: 1 }, &matrix, &users, &cfg).unwrap();
    // unseen items ≈ 184, so a random top-20 hits each held-out item w.p. ≈ 20/184
    let recall = report.mean("recall@20").unwrap();
    assert!((recall - 20.0 / 184.0).abs() < 0.03, "{recall}");
}

#[test]
fn positive_scaling_and_repeats_give_identical_reports() {
    let mut r = rng(3);
    let rows = random_binary(&mut r, 120, 25, 0.25);
    let split = split_strong_generalization(120, 0, 40, 5).unwrap();
    let train = UserItemMatrix::from_dense(&split.train_users.iter().map(|&u| rows[u].clone()).collect::<Vec<_>>());
    let model = solve_ease(&build_self_gram(&train), 10.0).unwrap();
    let mut scaled = model.clone();
    scaled.b.scale(3.5);
    let matrix = uim(&rows);
    let cfg = EvalConfig {
        seed: 9,
        ..EvalConfig::default()
    };
    let a = evaluate_model(&model, &matrix, &split.test_users, &cfg).unwrap();
    let b = evaluate_model(&scaled, &matrix, &split.test_users, &cfg).unwrap();
    let c = evaluate_model(&model, &matrix, &split.test_users, &cfg).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.to_json(), c.to_json());
    let other = evaluate_model(&model, &matrix, &split.test_users, &EvalConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.metrics, other.metrics);
}

#[test]
fn short_histories_are_skipped() {
    let matrix = uim(&[vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![1.0; 6], vec![0.0; 6]]);
    let scorer = PopularityScorer {
        pop: popularity(&matrix, None),
    };
    let report = evaluate_model(&scorer, &matrix, &[0, 1, 2], &EvalConfig::default()).unwrap();
    assert_eq!(report.n_users, 1);
    assert_eq!(report.n_skipped, 2);
}

#[test]
fn single_interval_time_protocol_equals_plain_protocol() {
    let mut r = rng(31);
    let rows = random_binary(&mut r, 150, 30, 0.2);
    let matrix = uim(&rows);
    let train: Vec<usize> = (0..100).collect();
    let test: Vec<usize> = (100..150).collect();
    let train_m = UserItemMatrix::from_dense(&rows[..100]);
    let model = solve_ease(&build_self_gram(&train_m), 8.0).unwrap();
    let mut stamps = HashMap::new();
    for &u in &test {
        for (i, v) in rows[u].iter().enumerate() {
            if *v > 0.0 {
                stamps.insert((u, i), r.random_range(0..1000i64));
            }
        }
    }
    let pop = popularity(&train_m, None);
    let intervals = TimeIntervalIndex {
        boundaries: vec![0, 999],
        pops: vec![pop],
        counts: vec![train.len()],
    };
    let cfg = EvalConfig {
        seed: 4,
        ..EvalConfig::default()
    };
    let plain = evaluate_model(&model, &matrix, &test, &cfg).unwrap();
    let timed = evaluate_time_aware(&model, &intervals, 0.7, None, &matrix, &test, &stamps, &cfg).unwrap();
    assert_eq!(plain.metrics, timed.metrics);
    assert_eq!(timed.notes.len(), 1);
}

#[test]
fn time_weights_follow_event_intervals() {
    let matrix = uim(&[vec![1.0; 5]]);
    let mut model = solve_ease(&build_self_gram(&uim(&[vec![1.0; 5], vec![0.0; 5]])), 1.0).unwrap();
    model.b = DenseMatrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { 1.0 });
    // item 0 is popular early, item 1 late
    let intervals = TimeIntervalIndex {
        boundaries: vec![0, 50, 100],
        pops: vec![
            PopularityVector(vec![10.0, 0.0, 5.0, 5.0, 5.0]),
            PopularityVector(vec![0.0, 10.0, 5.0, 5.0, 5.0]),
        ],
        counts: vec![25, 25],
    };
    let seed = (0..1000u64)
        .find(|&s| {
            let (_, held) = fold_in_split(&matrix.sparse_row(0), 0.6, derive_seed(s, 0)).unwrap();
            held.items == [0, 1]
        })
        .unwrap();
    let cfg = EvalConfig {
        recall_ks: vec![1],
        ndcg_ks: vec![],
        fold_in_fraction: 0.6,
        seed,
        ..EvalConfig::default()
    };
    let stamps: HashMap<(usize, usize), i64> = [((0, 0), 20), ((0, 1), 80)].into_iter().collect();
    let timed = evaluate_time_aware(&model, &intervals, 1.0, None, &matrix, &[0], &stamps, &cfg).unwrap();
    assert_eq!(timed.mean("recall@1"), Some(1.0));
    let flat = evaluate_time_aware(&model, &intervals, 0.0, None, &matrix, &[0], &stamps, &cfg).unwrap();
    assert_eq!(flat.mean("recall@1"), Some(1.0));
    // swapping the timestamps puts each item into the other's interval
    let swapped: HashMap<(usize, usize), i64> = [((0, 0), 80), ((0, 1), 20)].into_iter().collect();
    let worse = evaluate_time_aware(&model, &intervals, 1.0, None, &matrix, &[0], &swapped, &cfg).unwrap();
    assert_eq!(worse.mean("recall@1"), Some(0.0));
    let missing: HashMap<(usize, usize), i64> = HashMap::new();
    assert!(evaluate_time_aware(&model, &intervals, 1.0, None, &matrix, &[0], &missing, &cfg).is_err());
}

#[test]
fn grid_search_prefers_interior_lambda() {
    let mut r = rng(77);
    let n_items = 60;
    let mut rows = Vec::new();
    for u in 0..260 {
        let g = u % 6;
        rows.push(
            (0..n_items)
                .map(|i| {
                    let p = if i / 10 == g { 0.45 } else { 0.05 };
                    if r.random_bool(p) { 1.0 } else { 0.0 }
                })
                .collect::<Vec<f64>>(),
        );
    }
    let train = UserItemMatrix::from_dense(&rows[..60]);
    let gram = build_self_gram(&train);
    let matrix = uim(&rows);
    let val: Vec<usize> = (60..260).collect();
    let cfg = EvalConfig {
        seed: 2,
        ..EvalConfig::default()
    };
    let (best, reports) =
        grid_search_lambda(&gram, Variant::EaseXy, &matrix, &val, &[1e-6, 30.0, 1e6], "ndcg@100", &cfg).unwrap();
    let scores: Vec<f64> = reports.iter().map(|(_, r)| r.mean("ndcg@100").unwrap()).collect();
    assert_eq!(best, 30.0, "{scores:?}");

    let (single, _) = grid_search_lambda(&gram, Variant::EaseXy, &matrix, &val, &[5.0], "ndcg@100", &cfg).unwrap();
    assert_eq!(single, 5.0);
    assert!(grid_search_lambda(&gram, Variant::EaseXy, &matrix, &val, &[], "ndcg@100", &cfg).is_err());
    assert!(grid_search_lambda(&gram, Variant::EaseXy, &matrix, &val, &[0.0], "ndcg@100", &cfg).is_err());
}

#[test]
fn popularity_scorer_ranks_by_training_counts() {
    let train = uim(&[vec![1.0, 1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 1.0, 0.0, 0.0]]);
    let scorer = PopularityScorer {
        pop: popularity(&train, None),
    };
    let s = scorer.scores(&SparseRow::indicator([3])).unwrap();
    assert_eq!(top_k(&s, &[3], None, 3), vec![0, 1, 2]);
}
