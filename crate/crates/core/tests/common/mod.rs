//! Reference computations built directly on raw data matrices with
//! nalgebra, sharing no code with the library solvers.
#![allow(dead_code)]

use ease_core::data::UserItemMatrix;
use ease_core::matrix::DenseMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_binary(rng: &mut ChaCha8Rng, n_users: usize, n_items: usize, p: f64) -> Vec<Vec<f64>> {
    (0..n_users)
        .map(|_| {
            (0..n_items)
                .map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

pub fn random_real(rng: &mut ChaCha8Rng, n_users: usize, n_items: usize) -> Vec<Vec<f64>> {
    (0..n_users)
        .map(|_| (0..n_items).map(|_| rng.random_range(-1.0..2.0)).collect())
        .collect()
}

pub fn to_dmatrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

pub fn from_dense(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.n_rows(), m.n_cols(), |i, j| m.get(i, j))
}

pub fn uim(rows: &[Vec<f64>]) -> UserItemMatrix {
    UserItemMatrix::from_dense(rows)
}

/// Least squares of [A; √λ I] b ≈ [y; 0] by SVD.
fn ridge_ls(a: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let (n, k) = a.shape();
    let mut aug = DMatrix::zeros(n + k, k);
    aug.view_mut((0, 0), (n, k)).copy_from(a);
    for d in 0..k {
        aug[(n + d, d)] = lambda.sqrt();
    }
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(y);
    aug.svd(true, true).solve(&rhs, 1e-15).expect("svd solve")
}

/// Column j regresses Y_j on every column of X except j, with ridge penalty.
pub fn constrained_ridge(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> DMatrix<f64> {
    let xm = to_dmatrix(x);
    let ym = to_dmatrix(y);
    let n = xm.ncols();
    let mut b = DMatrix::zeros(n, n);
    for j in 0..n {
        let feats: Vec<usize> = (0..n).filter(|&i| i != j).collect();
        let a = xm.select_columns(&feats);
        let sol = ridge_ls(&a, &ym.column(j).into_owned(), lambda);
        for (k, &i) in feats.iter().enumerate() {
            b[(i, j)] = sol[k];
        }
    }
    b
}

/// Unconstrained ridge regression of every column of Y on all of X.
pub fn ridge(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> DMatrix<f64> {
    let xm = to_dmatrix(x);
    let ym = to_dmatrix(y);
    let n = xm.ncols();
    let mut b = DMatrix::zeros(n, n);
    for j in 0..n {
        let sol = ridge_ls(&xm, &ym.column(j).into_owned(), lambda);
        b.set_column(j, &sol);
    }
    b
}

pub fn max_abs_diff(a: &DenseMatrix, b: &DMatrix<f64>) -> f64 {
    assert_eq!((a.n_rows(), a.n_cols()), b.shape());
    let mut m: f64 = 0.0;
    for i in 0..a.n_rows() {
        for j in 0..a.n_cols() {
            m = m.max((a.get(i, j) - b[(i, j)]).abs());
        }
    }
    m
}

/// Recall@k straight from the definition.
pub fn naive_recall(ranked: &[usize], held: &[usize], k: usize) -> f64 {
    let hits = ranked[..k.min(ranked.len())].iter().filter(|i| held.contains(i)).count();
    hits as f64 / k.min(held.len()) as f64
}

pub fn naive_ndcg(ranked: &[usize], held: &[usize], k: usize) -> f64 {
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if held.contains(item) {
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let mut ideal = 0.0;
    for pos in 0..k.min(held.len()) {
        ideal += 1.0 / ((pos + 2) as f64).log2();
    }
    dcg / ideal
}

/// A ratings log with `n_users` users in four taste groups over 40 movies.
pub fn write_ratings_csv(path: &std::path::Path, n_users: usize, seed: u64) {
    let mut r = rng(seed);
    let mut text = String::from("userId,movieId,rating,timestamp\n");
    for u in 0..n_users {
        let g = u % 4;
        for i in 0..40 {
            let p = if i / 10 == g { 0.45 } else { 0.06 };
            if r.random_bool(p) {
                let rating = [2.0, 3.0, 4.0, 4.5, 5.0][r.random_range(0..5)];
                let t = 1_000_000 + r.random_range(0..100_000);
                text.push_str(&format!("u{u},m{i},{rating},{t}\n"));
            }
        }
    }
    std::fs::write(path, text).unwrap();
}
