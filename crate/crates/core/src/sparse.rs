//! Sparse item-item models.
//!
//! A sparsity pattern is chosen by thresholding a dense item-item matrix
//! (usually the correlation matrix). The block-wise trainer then walks the
//! columns of the pattern, solves a dense zero-diagonal problem on each
//! column's item set, and averages the sub-solutions where blocks overlap.
//! When the pattern is block-diagonal the result is exact.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SparseRow;
use crate::error::{Error, Result};
use crate::gram::GramStats;
use crate::io::{put_f64, put_f64s, put_keys, put_u32, put_u64, put_u8, read_file, write_atomic, Reader};
use crate::matrix::DenseMatrix;
use crate::solver::{invert_spd_shifted, zero_diag_from_precision, DenseModel};

/// Cap on the pattern entries per column used in large-scale runs.
pub const DEFAULT_N_MAX: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub cor: DenseMatrix,
}

/// Pearson correlations of the columns of X, from G, the column sums and
/// the user count. Zero-variance columns get a zero row and column with a
/// unit diagonal entry.
pub fn correlation_from_gram(gram: &GramStats) -> Result<CorrelationMatrix> {
    if gram.n_users() < 2 {
        return Err(Error::InvalidInput(
            "correlations need at least two users".into(),
        ));
    }
    let n = gram.n_items();
    let total = gram.total_weight();
    let g = gram.g();
    let means: Vec<f64> = gram.x_sums().iter().map(|s| s / total).collect();
    let sds: Vec<f64> = (0..n)
        .map(|i| {
            let second = g.get(i, i) / total;
            let var = second - means[i] * means[i];
            if var <= f64::EPSILON * second.abs() || var <= 0.0 {
                0.0
            } else {
                var.sqrt()
            }
        })
        .collect();
    let mut cor = DenseMatrix::zeros(n, n);
    cor.as_mut_slice()
        .par_chunks_mut(n.max(1))
        .enumerate()
        .for_each(|(i, row)| {
            if sds[i] == 0.0 {
                row[i] = 1.0;
                return;
            }
            let gi = g.row(i);
            for j in 0..n {
                row[j] = if i == j {
                    1.0
                } else if sds[j] == 0.0 {
                    0.0
                } else {
                    let cov = gi[j] / total - means[i] * means[j];
                    (cov / (sds[i] * sds[j])).clamp(-1.0, 1.0)
                };
            }
        });
    Ok(CorrelationMatrix { cor })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternSource {
    ModelAbs,
    Correlation,
    GramCount,
}

impl PatternSource {
    fn code(self) -> u8 {
        match self {
            PatternSource::ModelAbs => 0,
            PatternSource::Correlation => 1,
            PatternSource::GramCount => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(PatternSource::ModelAbs),
            1 => Ok(PatternSource::Correlation),
            2 => Ok(PatternSource::GramCount),
            _ => Err(Error::Format(format!("unknown pattern source {c}"))),
        }
    }
}

/// Binary item-item indicator matrix in compressed column form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPattern {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    pub threshold: f64,
    pub source: PatternSource,
    pub n_max: usize,
}

impl SparsityPattern {
    /// Pattern from per-column row lists. Rows are sorted and deduplicated.
    pub fn from_columns(
        n: usize,
        columns: Vec<Vec<usize>>,
        threshold: f64,
        source: PatternSource,
        n_max: usize,
    ) -> Result<Self> {
        if columns.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} columns for {n} items",
                columns.len()
            )));
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::new();
        for mut col in columns {
            col.sort_unstable();
            col.dedup();
            if col.last().is_some_and(|&r| r >= n) {
                return Err(Error::DimensionMismatch("pattern row out of range".into()));
            }
            row_idx.extend(col);
            col_ptr.push(row_idx.len());
        }
        Ok(SparsityPattern {
            n,
            col_ptr,
            row_idx,
            threshold,
            source,
            n_max,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Fraction of non-zero entries.
    pub fn density(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.nnz() as f64 / (self.n as f64 * self.n as f64)
        }
    }

    /// Sorted row indices of column `j`.
    pub fn column(&self, j: usize) -> &[usize] {
        &self.row_idx[self.col_ptr[j]..self.col_ptr[j + 1]]
    }

    /// Storage position of entry (i, j), if present.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        self.column(j)
            .binary_search(&i)
            .ok()
            .map(|k| self.col_ptr[j] + k)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.position(i, j).is_some()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }
}

/// A_ij = 1 iff |m_ij| ≥ θ (or m_ij ≥ θ without `use_abs`). Columns holding
/// more than `n_max` entries keep the largest magnitudes; the diagonal is
/// always present and counts towards the cap.
pub fn threshold_pattern(
    m: &DenseMatrix,
    theta: f64,
    use_abs: bool,
    n_max: usize,
    source: PatternSource,
) -> Result<SparsityPattern> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch("pattern source must be square".into()));
    }
    if theta.is_nan() || theta < 0.0 {
        return Err(Error::InvalidInput(format!("threshold must be >= 0, got {theta}")));
    }
    if n_max == 0 {
        return Err(Error::InvalidInput("n_max must be at least 1".into()));
    }
    let n = m.n_rows();
    let magnitude = |v: f64| if use_abs { v.abs() } else { v };
    let columns: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&i| i != j)
                .map(|i| (magnitude(m.get(i, j)), i))
                .filter(|&(v, _)| v >= theta)
                .collect();
            if cand.len() > n_max - 1 {
                cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                cand.truncate(n_max - 1);
            }
            let mut col: Vec<usize> = cand.into_iter().map(|(_, i)| i).collect();
            col.push(j);
            col
        })
        .collect();
    SparsityPattern::from_columns(n, columns, theta, source, n_max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseModel {
    pub pattern: SparsityPattern,
    /// B values aligned with `pattern.row_idx()`.
    pub values: Vec<f64>,
    pub lambda: f64,
}

/// A ⊙ B restricted to the pattern positions.
pub fn mask_model(model: &DenseModel, pattern: &SparsityPattern) -> Result<SparseModel> {
    let n = pattern.n_items();
    if model.n_items() != n {
        return Err(Error::DimensionMismatch(format!(
            "pattern has {n} items, model {}",
            model.n_items()
        )));
    }
    let mut values = Vec::with_capacity(pattern.nnz());
    for j in 0..n {
        for &i in pattern.column(j) {
            values.push(if i == j { 0.0 } else { model.b.get(i, j) });
        }
    }
    Ok(SparseModel {
        pattern: pattern.clone(),
        values,
        lambda: model.lambda,
    })
}

/// Ordered item sets: columns are visited by (nnz desc, max off-diagonal
/// |cor| desc, index asc); each visited column emits its row set and removes
/// those items from the queue.
pub fn block_partition(pattern: &SparsityPattern, cor: &CorrelationMatrix) -> Result<Vec<Vec<usize>>> {
    let n = pattern.n_items();
    if cor.cor.n_rows() != n {
        return Err(Error::DimensionMismatch("correlation matrix does not match pattern".into()));
    }
    if let Some(j) = (0..n).find(|&j| !pattern.contains(j, j)) {
        return Err(Error::InvalidInput(format!(
            "pattern is missing diagonal entry {j}"
        )));
    }
    let max_cor: Vec<f64> = (0..n)
        .map(|j| {
            (0..n)
                .filter(|&i| i != j)
                .map(|i| cor.cor.get(i, j).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let na = pattern.column(a).len();
        let nb = pattern.column(b).len();
        nb.cmp(&na)
            .then(max_cor[b].total_cmp(&max_cor[a]))
            .then(a.cmp(&b))
    });
    let mut removed = vec![false; n];
    let mut blocks = Vec::new();
    for i in order {
        if removed[i] {
            continue;
        }
        let block = pattern.column(i).to_vec();
        for &j in &block {
            removed[j] = true;
        }
        blocks.push(block);
    }
    Ok(blocks)
}

/// Zero-diagonal solution of each block's Gram sub-matrix, independently.
pub fn solve_blocks(gram: &GramStats, blocks: &[Vec<usize>], lambda: f64) -> Result<Vec<DenseMatrix>> {
    if !gram.c_is_gram() {
        return Err(Error::InvalidInput(
            "block-wise training needs X = Y statistics (C = G)".into(),
        ));
    }
    if let Some(bad) = blocks.iter().flatten().find(|&&i| i >= gram.n_items()) {
        return Err(Error::DimensionMismatch(format!("block item {bad} out of range")));
    }
    blocks
        .par_iter()
        .map(|block| {
            let sub = gram.g().submatrix(block);
            zero_diag_from_precision(invert_spd_shifted(&sub, lambda)?)
        })
        .collect()
}

/// Averages block solutions over the pattern: every position takes the mean
/// over all blocks containing both its row and column item; uncovered
/// positions and the diagonal are zero.
pub fn aggregate_blocks(
    blocks: &[Vec<usize>],
    submatrices: &[DenseMatrix],
    pattern: &SparsityPattern,
    lambda: f64,
) -> Result<SparseModel> {
    if blocks.len() != submatrices.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} blocks but {} sub-matrices",
            blocks.len(),
            submatrices.len()
        )));
    }
    let mut sums = vec![0.0; pattern.nnz()];
    let mut counts = vec![0u32; pattern.nnz()];
    for (block, sub) in blocks.iter().zip(submatrices) {
        if sub.n_rows() != block.len() || sub.n_cols() != block.len() {
            return Err(Error::DimensionMismatch("sub-matrix does not match its block".into()));
        }
        for (b, &j) in block.iter().enumerate() {
            for (a, &i) in block.iter().enumerate() {
                if let Some(pos) = pattern.position(i, j) {
                    sums[pos] += sub.get(a, b);
                    counts[pos] += 1;
                }
            }
        }
    }
    let mut values: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    for j in 0..pattern.n_items() {
        if let Some(pos) = pattern.position(j, j) {
            values[pos] = 0.0;
        }
    }
    Ok(SparseModel {
        pattern: pattern.clone(),
        values,
        lambda,
    })
}

/// Summary of one block-wise training run.
#[derive(Debug, Clone)]
pub struct SparseTraining {
    pub model: SparseModel,
    pub n_blocks: usize,
    pub largest_block: usize,
}

/// Correlation → threshold → partition → block solves → aggregation.
pub fn train_sparse(gram: &GramStats, theta: f64, n_max: usize, lambda: f64) -> Result<SparseTraining> {
    if !gram.c_is_gram() {
        return Err(Error::InvalidInput(
            "sparse training needs X = Y statistics (C = G)".into(),
        ));
    }
    let cor = correlation_from_gram(gram)?;
    let pattern = threshold_pattern(&cor.cor, theta, true, n_max, PatternSource::Correlation)?;
    let blocks = block_partition(&pattern, &cor)?;
    log::info!(
        "sparsity pattern: {} entries (density {:.6}), {} blocks",
        pattern.nnz(),
        pattern.density(),
        blocks.len()
    );
    let subs = solve_blocks(gram, &blocks, lambda)?;
    let model = aggregate_blocks(&blocks, &subs, &pattern, lambda)?;
    Ok(SparseTraining {
        largest_block: blocks.iter().map(Vec::len).max().unwrap_or(0),
        n_blocks: blocks.len(),
        model,
    })
}

const SPARSE_MAGIC: &[u8; 4] = b"EASP";
const SPARSE_VERSION: u32 = 1;

impl SparseModel {
    pub fn n_items(&self) -> usize {
        self.pattern.n_items()
    }

    /// Value at (i, j), zero outside the pattern.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let n = self.n_items();
        let mut out = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let start = self.pattern.col_ptr()[j];
            for (k, &i) in self.pattern.column(j).iter().enumerate() {
                out.set(i, j, self.values[start + k]);
            }
        }
        out
    }

    /// Multiplies column j by w_j.
    pub fn scale_columns(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.n_items() {
            return Err(Error::DimensionMismatch(format!(
                "{} item weights for {} items",
                w.len(),
                self.n_items()
            )));
        }
        for (j, wj) in w.iter().enumerate() {
            let range = self.pattern.col_ptr[j]..self.pattern.col_ptr[j + 1];
            self.values[range].iter_mut().for_each(|v| *v *= wj);
        }
        Ok(())
    }

    /// Scores xᵀB computed column by column over the stored entries.
    pub fn predict_scores(&self, history: &SparseRow) -> Result<Vec<f64>> {
        let n = self.n_items();
        let mut x = vec![0.0; n];
        for (i, v) in history.iter() {
            if i >= n {
                return Err(Error::InvalidInput(format!(
                    "item id {i} out of range for {n} items"
                )));
            }
            x[i] = v;
        }
        let ptr = self.pattern.col_ptr();
        let rows = self.pattern.row_idx();
        Ok((0..n)
            .map(|j| {
                (ptr[j]..ptr[j + 1])
                    .map(|k| x[rows[k]] * self.values[k])
                    .sum()
            })
            .collect())
    }

    /// Header, compressed-column arrays (u64 pointers, u64 rows, f64 values),
    /// then the item-key table.
    pub fn save(&self, path: &Path, item_keys: &[String]) -> Result<()> {
        if item_keys.len() != self.n_items() {
            return Err(Error::DimensionMismatch(format!(
                "{} item keys for {} items",
                item_keys.len(),
                self.n_items()
            )));
        }
        let p = &self.pattern;
        write_atomic(path, |w| {
            w.write_all(SPARSE_MAGIC)?;
            put_u32(w, SPARSE_VERSION)?;
            put_u64(w, p.n as u64)?;
            put_f64(w, self.lambda)?;
            put_f64(w, p.threshold)?;
            put_u8(w, p.source.code())?;
            put_u64(w, p.n_max as u64)?;
            put_u64(w, p.nnz() as u64)?;
            for &c in &p.col_ptr {
                put_u64(w, c as u64)?;
            }
            for &r in &p.row_idx {
                put_u64(w, r as u64)?;
            }
            put_f64s(w, &self.values)?;
            put_keys(w, item_keys)
        })
    }

    pub fn load(path: &Path) -> Result<(SparseModel, Vec<String>)> {
        let buf = read_file(path)?;
        let mut r = Reader::new(&buf, "sparse model");
        r.magic(SPARSE_MAGIC)?;
        let version = r.u32()?;
        if version != SPARSE_VERSION {
            return Err(Error::Format(format!("unsupported sparse model version {version}")));
        }
        let n = r.usize()?;
        let lambda = r.f64()?;
        let threshold = r.f64()?;
        let source = PatternSource::from_code(r.u8()?)?;
        let n_max = r.usize()?;
        let nnz = r.usize()?;
        let col_ptr = (0..=n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let row_idx = (0..nnz).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let values = r.f64s(nnz)?;
        let keys = r.keys()?;
        r.finish()?;
        let consistent = col_ptr.first() == Some(&0)
            && col_ptr.last() == Some(&nnz)
            && col_ptr.windows(2).all(|w| w[0] <= w[1])
            && row_idx.iter().all(|&i| i < n)
            && keys.len() == n;
        if !consistent {
            return Err(Error::Format("inconsistent compressed-column arrays".into()));
        }
        Ok((
            SparseModel {
                pattern: SparsityPattern {
                    n,
                    col_ptr,
                    row_idx,
                    threshold,
                    source,
                    n_max,
                },
                values,
                lambda,
            },
            keys,
        ))
    }
}
