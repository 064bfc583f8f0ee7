mod common;

use common::*;
use ease_core::data::SparseRow;
use ease_core::gram::build_self_gram;
use ease_core::matrix::DenseMatrix;
use ease_core::solver::solve_ease;
use ease_core::sparse::{
    block_partition, correlation_from_gram, mask_model, threshold_pattern, train_sparse, PatternSource, SparseModel,
};
use rand::Rng;

/// One group of users per block size, each touching only its own block.
fn grouped_data(seed: u64, sizes: &[usize], users_per_group: usize, p: f64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let n: usize = sizes.iter().sum();
    let mut rows = Vec::new();
    let mut start = 0;
    for &size in sizes {
        for _ in 0..users_per_group {
            let mut row = vec![0.0; n];
            for v in &mut row[start..start + size] {
                if r.random_bool(p) {
                    *v = 1.0;
                }
            }
            rows.push(row);
        }
        start += size;
    }
    rows
}

#[test]
fn block_diagonal_data_gives_exact_solution() {
    let sizes = [4, 6, 5];
    let x = grouped_data(1, &sizes, 40, 0.6);
    let gram = build_self_gram(&uim(&x));
    let cor = correlation_from_gram(&gram).unwrap();
    // within-block correlations are positive, across blocks negative
    let theta = 0.0;
    let pattern = threshold_pattern(&cor.cor, theta, false, 100, PatternSource::Correlation).unwrap();
    let block_of = |i: usize| if i < 4 { 0 } else if i < 10 { 1 } else { 2 };
    for j in 0..15 {
        let expected: Vec<usize> = (0..15).filter(|&i| block_of(i) == block_of(j)).collect();
        assert_eq!(pattern.column(j), expected.as_slice(), "column {j}");
    }
    let blocks = block_partition(&pattern, &cor).unwrap();
    assert_eq!(blocks.len(), 3);

    let dense = solve_ease(&gram, 3.0).unwrap();
    let masked = mask_model(&dense, &pattern).unwrap();
    // the dense solution is itself block-diagonal
    for i in 0..15 {
        for j in 0..15 {
            if block_of(i) != block_of(j) {
                assert!(dense.b.get(i, j).abs() < 1e-12);
            }
        }
    }
    // train_sparse thresholds |cor|: cut between the two groups
    let min_within = (0..15)
        .flat_map(|i| (0..15).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && block_of(i) == block_of(j))
        .map(|(i, j)| cor.cor.get(i, j).abs())
        .fold(f64::INFINITY, f64::min);
    let max_across = (0..15)
        .flat_map(|i| (0..15).map(move |j| (i, j)))
        .filter(|&(i, j)| block_of(i) != block_of(j))
        .map(|(i, j)| cor.cor.get(i, j).abs())
        .fold(0.0, f64::max);
    assert!(max_across < min_within, "{max_across} vs {min_within}");
    let theta = 0.5 * (max_across + min_within);
    let sparse = train_sparse(&gram, theta, 100, 3.0).unwrap();
    assert_eq!(sparse.n_blocks, 3);
    assert_eq!(sparse.model.pattern.row_idx(), masked.pattern.row_idx());
    let diff = sparse
        .model
        .values
        .iter()
        .zip(&masked.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-10, "{diff}");
}

#[test]
fn overlapping_blocks_average_sub_solutions() {
    let mut r = rng(8);
    let n = 9;
    let x = random_binary(&mut r, 60, n, 0.35);
    let gram = build_self_gram(&uim(&x));
    let cor = correlation_from_gram(&gram).unwrap();
    let pattern = threshold_pattern(&cor.cor, 0.05, true, 4, PatternSource::Correlation).unwrap();
    let blocks = block_partition(&pattern, &cor).unwrap();
    let mut covered = vec![false; n];
    for b in &blocks {
        for &i in b {
            covered[i] = true;
        }
    }
    assert!(covered.iter().all(|&c| c));

    let lambda = 2.0;
    let trained = train_sparse(&gram, 0.05, 4, lambda).unwrap().model;
    let mut sums = DenseMatrix::zeros(n, n);
    let mut counts = DenseMatrix::zeros(n, n);
    for block in &blocks {
        let sub: Vec<Vec<f64>> = x.iter().map(|row| block.iter().map(|&i| row[i]).collect()).collect();
        let b = constrained_ridge(&sub, &sub, lambda);
        for (a, &i) in block.iter().enumerate() {
            for (c, &j) in block.iter().enumerate() {
                sums.set(i, j, sums.get(i, j) + b[(a, c)]);
                counts.set(i, j, counts.get(i, j) + 1.0);
            }
        }
    }
    for j in 0..n {
        for i in 0..n {
            let expected = if i == j || !pattern.contains(i, j) || counts.get(i, j) == 0.0 {
                0.0
            } else {
                sums.get(i, j) / counts.get(i, j)
            };
            assert!((trained.get(i, j) - expected).abs() < 1e-9, "({i},{j})");
        }
    }
}

#[test]
fn zero_threshold_without_cap_is_dense() {
    let mut r = rng(2);
    let x = random_binary(&mut r, 50, 10, 0.3);
    let gram = build_self_gram(&uim(&x));
    let dense = solve_ease(&gram, 5.0).unwrap();
    let sparse = train_sparse(&gram, 0.0, 10, 5.0).unwrap();
    assert_eq!(sparse.n_blocks, 1);
    assert_eq!(sparse.model.pattern.nnz(), 100);
    assert!(sparse.model.to_dense().max_abs_diff(&dense.b) < 1e-12);
}

#[test]
fn capped_columns_keep_largest_correlations() {
    let mut r = rng(6);
    let x = random_binary(&mut r, 80, 12, 0.4);
    let cor = correlation_from_gram(&build_self_gram(&uim(&x))).unwrap();
    let pattern = threshold_pattern(&cor.cor, 0.0, true, 3, PatternSource::Correlation).unwrap();
    for j in 0..12 {
        let col = pattern.column(j);
        assert_eq!(col.len(), 3);
        assert!(col.contains(&j));
        let kept_min = col.iter().filter(|&&i| i != j).map(|&i| cor.cor.get(i, j).abs()).fold(f64::INFINITY, f64::min);
        for i in (0..12).filter(|i| !col.contains(i)) {
            assert!(cor.cor.get(i, j).abs() <= kept_min);
        }
    }
}

#[test]
fn gram_count_pattern() {
    let x = vec![
        vec![1.0, 1.0, 0.0],
        vec![1.0, 1.0, 0.0],
        vec![1.0, 0.0, 1.0],
    ];
    let gram = build_self_gram(&uim(&x));
    let pattern = threshold_pattern(gram.g(), 2.0, false, 10, PatternSource::GramCount).unwrap();
    assert_eq!(pattern.column(0), &[0, 1]);
    assert_eq!(pattern.column(1), &[0, 1]);
    assert_eq!(pattern.column(2), &[2]);
}

#[test]
fn sparse_scores_match_dense_product_and_survive_save() {
    let mut r = rng(12);
    let x = random_binary(&mut r, 70, 11, 0.3);
    let gram = build_self_gram(&uim(&x));
    let model = train_sparse(&gram, 0.05, 6, 4.0).unwrap().model;
    let dense = model.to_dense();
    let h = SparseRow::indicator([0, 3, 7]);
    let s = model.predict_scores(&h).unwrap();
    for (j, sj) in s.iter().enumerate() {
        let expected = dense.get(0, j) + dense.get(3, j) + dense.get(7, j);
        assert!((sj - expected).abs() < 1e-14);
    }
    let keys: Vec<String> = (0..11).map(|i| format!("i{i}")).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.easp");
    model.save(&path, &keys).unwrap();
    let (back, _) = SparseModel::load(&path).unwrap();
    let t = back.predict_scores(&h).unwrap();
    assert!(s.iter().zip(&t).all(|(a, b)| a.to_bits() == b.to_bits()));
    std::fs::write(&path, b"EASPjunk").unwrap();
    assert!(SparseModel::load(&path).is_err());
}
