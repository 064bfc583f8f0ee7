//! Closed-form dense item-item models.
//!
//! All variants start from the regularized precision matrix
//! P = (G + λI)⁻¹. Ridge regression is B = P·C. The zero-diagonal model
//! subtracts P·diagMat(γ) with γ = diag(B_rr) ⊘ diag(P), which reduces to
//! B = I − P·diagMat(1 ⊘ diag(P)) when X = Y.

use std::path::Path;

use faer::linalg::solvers::DenseSolveCore;
use faer::Side;
use serde::{Deserialize, Serialize};

use crate::data::SparseRow;
use crate::error::{Error, Result};
use crate::gram::GramStats;
use crate::io::{put_f64, put_f64s, put_keys, put_u32, put_u64, put_u8, read_file, write_atomic, Reader};
use crate::matrix::DenseMatrix;
use crate::weighting::{ItemWeightVector, WeightKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Unconstrained ridge regression.
    Rr,
    /// Zero diagonal enforced through Lagrange multipliers.
    ZeroDiag,
    /// Zero diagonal computed from P alone (X = Y).
    EaseXy,
}

impl Variant {
    fn code(self) -> u8 {
        match self {
            Variant::Rr => 0,
            Variant::ZeroDiag => 1,
            Variant::EaseXy => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Variant::Rr),
            1 => Ok(Variant::ZeroDiag),
            2 => Ok(Variant::EaseXy),
            _ => Err(Error::Format(format!("unknown model variant {c}"))),
        }
    }

    pub fn has_zero_diagonal(self) -> bool {
        matches!(self, Variant::ZeroDiag | Variant::EaseXy)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rr => "rr",
            Variant::ZeroDiag => "zero_diag",
            Variant::EaseXy => "ease_xy",
        }
    }
}

/// P = (G + λI)⁻¹, kept exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionMatrix {
    p: DenseMatrix,
    lambda: f64,
}

impl PrecisionMatrix {
    pub fn matrix(&self) -> &DenseMatrix {
        &self.p
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel {
    pub b: DenseMatrix,
    pub variant: Variant,
    pub lambda: f64,
    /// Column means added back to every score when the targets were centered.
    pub mu: Option<Vec<f64>>,
    pub applied_item_weights: Option<ItemWeightVector>,
    /// Lagrange multipliers of the zero-diagonal constraint.
    pub gamma: Option<Vec<f64>>,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidInput(format!(
            "lambda must be positive and finite, got {lambda}"
        )));
    }
    Ok(())
}

/// (A + λI)⁻¹ through a Cholesky factorization, symmetrized by averaging
/// with its transpose.
pub fn invert_spd_shifted(a: &DenseMatrix, lambda: f64) -> Result<DenseMatrix> {
    check_lambda(lambda)?;
    if !a.is_square() {
        return Err(Error::DimensionMismatch("matrix to invert must be square".into()));
    }
    if !a.all_finite() {
        return Err(Error::Numeric("matrix contains non-finite entries".into()));
    }
    let n = a.n_rows();
    let mut shifted = a.clone();
    for i in 0..n {
        shifted.set(i, i, shifted.get(i, i) + lambda);
    }
    let llt = shifted
        .view()
        .llt(Side::Lower)
        .map_err(|e| Error::Numeric(format!("Cholesky factorization failed: {e:?}")))?;
    drop(shifted);
    let inv = llt.inverse();
    drop(llt);
    let mut p = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let row = p.row_mut(i);
        for (j, dst) in row.iter_mut().enumerate() {
            *dst = inv[(i, j)];
        }
    }
    drop(inv);
    p.symmetrize();
    if !p.all_finite() {
        return Err(Error::Numeric("inverse contains non-finite entries".into()));
    }
    Ok(p)
}

pub fn invert_regularized(gram: &GramStats, lambda: f64) -> Result<PrecisionMatrix> {
    Ok(PrecisionMatrix {
        p: invert_spd_shifted(gram.g(), lambda)?,
        lambda,
    })
}

/// B = P·C.
pub fn solve_rr(gram: &GramStats, lambda: f64) -> Result<DenseModel> {
    let p = invert_regularized(gram, lambda)?;
    let b = p.matrix().matmul(gram.c())?;
    Ok(DenseModel {
        b,
        variant: Variant::Rr,
        lambda,
        mu: gram.mu().map(<[f64]>::to_vec),
        applied_item_weights: None,
        gamma: None,
    })
}

fn positive_diagonal(p: &DenseMatrix) -> Result<Vec<f64>> {
    let d = p.diagonal();
    if let Some(bad) = d.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Numeric(format!(
            "precision matrix has non-positive diagonal entry {bad}"
        )));
    }
    Ok(d)
}

/// Ridge regression under the constraint diag(B) = 0.
pub fn solve_zero_diag(gram: &GramStats, lambda: f64) -> Result<DenseModel> {
    let p = invert_regularized(gram, lambda)?.into_matrix();
    let p_diag = positive_diagonal(&p)?;
    let mut b = p.matmul(gram.c())?;
    let gamma: Vec<f64> = (0..b.n_rows()).map(|j| b.get(j, j) / p_diag[j]).collect();
    for i in 0..b.n_rows() {
        let p_row = p.row(i);
        for ((bij, &pij), &gj) in b.row_mut(i).iter_mut().zip(p_row).zip(&gamma) {
            *bij -= pij * gj;
        }
        b.set(i, i, 0.0);
    }
    Ok(DenseModel {
        b,
        variant: Variant::ZeroDiag,
        lambda,
        mu: gram.mu().map(<[f64]>::to_vec),
        applied_item_weights: None,
        gamma: Some(gamma),
    })
}

/// Turns P into B = I − P·diagMat(1 ⊘ diag(P)) in place: off-diagonal
/// entries are −P_ij / P_jj, the diagonal is exactly zero.
pub fn zero_diag_from_precision(mut p: DenseMatrix) -> Result<DenseMatrix> {
    let d = positive_diagonal(&p)?;
    let inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
    for i in 0..p.n_rows() {
        for (pij, s) in p.row_mut(i).iter_mut().zip(&inv) {
            *pij = -*pij * s;
        }
        p.set(i, i, 0.0);
    }
    Ok(p)
}

/// Zero-diagonal model for X = Y, computed from P alone.
pub fn solve_ease(gram: &GramStats, lambda: f64) -> Result<DenseModel> {
    if !gram.c_is_gram() {
        return Err(Error::InvalidInput(
            "the X = Y solver needs statistics with C = G (no centering, no disjoint split); \
             use the zero-diagonal solver instead"
                .into(),
        ));
    }
    let p = invert_regularized(gram, lambda)?.into_matrix();
    // diag(P·G) = 1 − λ·P_jj, so γ_j = 1/P_jj − λ
    let gamma = positive_diagonal(&p)?
        .iter()
        .map(|d| 1.0 / d - lambda)
        .collect();
    let b = zero_diag_from_precision(p)?;
    Ok(DenseModel {
        b,
        variant: Variant::EaseXy,
        lambda,
        mu: None,
        applied_item_weights: None,
        gamma: Some(gamma),
    })
}

/// Entrywise max(B, 0).
pub fn clamp_nonnegative(model: &DenseModel) -> DenseModel {
    let mut out = model.clone();
    out.b.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Scores xᵀB (+ μ), touching only the rows of B named in `history`.
pub fn predict_scores(model: &DenseModel, history: &SparseRow) -> Result<Vec<f64>> {
    let n = model.n_items();
    let mut scores = vec![0.0; n];
    for (i, v) in history.iter() {
        if i >= n {
            return Err(Error::InvalidInput(format!(
                "item id {i} out of range for {n} items"
            )));
        }
        for (s, &bij) in scores.iter_mut().zip(model.b.row(i)) {
            *s += v * bij;
        }
    }
    if let Some(mu) = &model.mu {
        for (s, m) in scores.iter_mut().zip(mu) {
            *s += m;
        }
    }
    Ok(scores)
}

const MODEL_MAGIC: &[u8; 4] = b"EASE";
const MODEL_VERSION: u32 = 1;
const FLAG_MU: u32 = 1;
const FLAG_WEIGHTS: u32 = 1 << 1;
const FLAG_GAMMA: u32 = 1 << 2;

impl DenseModel {
    pub fn n_items(&self) -> usize {
        self.b.n_rows()
    }

    /// Checks the finiteness and zero-diagonal invariants.
    pub fn validate(&self) -> Result<()> {
        if !self.b.all_finite() {
            return Err(Error::Numeric("model weights are not finite".into()));
        }
        if self.variant.has_zero_diagonal() {
            let scale = self.b.max_abs();
            let worst = self.b.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if worst > 1e-8 * scale {
                return Err(Error::Numeric(format!(
                    "diagonal entry {worst} in a zero-diagonal model"
                )));
            }
        }
        Ok(())
    }

    /// Header, item-key table, row-major little-endian B, then the optional
    /// μ, item-weight and γ vectors.
    pub fn save(&self, path: &Path, item_keys: &[String]) -> Result<()> {
        if item_keys.len() != self.n_items() {
            return Err(Error::DimensionMismatch(format!(
                "{} item keys for {} items",
                item_keys.len(),
                self.n_items()
            )));
        }
        let mut flags = 0;
        if self.mu.is_some() {
            flags |= FLAG_MU;
        }
        if self.applied_item_weights.is_some() {
            flags |= FLAG_WEIGHTS;
        }
        if self.gamma.is_some() {
            flags |= FLAG_GAMMA;
        }
        write_atomic(path, |w| {
            w.write_all(MODEL_MAGIC)?;
            put_u32(w, MODEL_VERSION)?;
            put_u64(w, self.n_items() as u64)?;
            put_u8(w, self.variant.code())?;
            put_f64(w, self.lambda)?;
            put_u32(w, flags)?;
            put_keys(w, item_keys)?;
            put_f64s(w, self.b.as_slice())?;
            if let Some(mu) = &self.mu {
                put_f64s(w, mu)?;
            }
            if let Some(iw) = &self.applied_item_weights {
                put_u8(w, iw.kind.code())?;
                put_f64(w, iw.alpha)?;
                put_f64s(w, &iw.w)?;
            }
            if let Some(g) = &self.gamma {
                put_f64s(w, g)?;
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<(DenseModel, Vec<String>)> {
        let buf = read_file(path)?;
        let mut r = Reader::new(&buf, "model");
        r.magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let n = r.usize()?;
        let variant = Variant::from_code(r.u8()?)?;
        let lambda = r.f64()?;
        let flags = r.u32()?;
        let keys = r.keys()?;
        if keys.len() != n {
            return Err(Error::Format("item-key table does not match model size".into()));
        }
        let b = DenseMatrix::from_row_major(n, n, r.f64s(n * n)?)?;
        let mu = if flags & FLAG_MU != 0 {
            Some(r.f64s(n)?)
        } else {
            None
        };
        let applied_item_weights = if flags & FLAG_WEIGHTS != 0 {
            let kind = WeightKind::from_code(r.u8()?)?;
            let alpha = r.f64()?;
            Some(ItemWeightVector {
                w: r.f64s(n)?,
                kind,
                alpha,
            })
        } else {
            None
        };
        let gamma = if flags & FLAG_GAMMA != 0 {
            Some(r.f64s(n)?)
        } else {
            None
        };
        r.finish()?;
        Ok((
            DenseModel {
                b,
                variant,
                lambda,
                mu,
                applied_item_weights,
                gamma,
            },
            keys,
        ))
    }
}
