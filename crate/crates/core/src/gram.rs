//! Sufficient statistics G = XᵀX and C = XᵀY.
//!
//! Every solver consumes only these matrices, so the (possibly huge) user-item
//! data never has to be held next to the dense item-item matrices.

use std::path::Path;

use rayon::prelude::*;

use crate::data::UserItemMatrix;
use crate::error::{Error, Result};
use crate::io::{put_f64, put_f64s, put_u32, put_u64, read_file, write_atomic, Reader};
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Provenance {
    pub disjoint_split: bool,
    pub user_weighted: bool,
    pub centered: bool,
}

impl Provenance {
    pub fn is_plain(&self) -> bool {
        !(self.disjoint_split || self.user_weighted || self.centered)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramStats {
    g: DenseMatrix,
    /// `None` when X = Y, i.e. C is G itself.
    c: Option<DenseMatrix>,
    mu: Option<Vec<f64>>,
    /// Xᵀ·diagMat(w)·1 (plain column sums when unweighted).
    x_sums: Vec<f64>,
    n_users: usize,
    /// Σ w over users; equals `n_users` when unweighted.
    total_weight: f64,
    provenance: Provenance,
}

/// Accumulates Xᵀ·diagMat(w)·R row by row. Entry (i, j) sums over users in
/// ascending row order regardless of how rows of the output are scheduled.
fn cross_product(
    x_cols: &[Vec<(usize, f64)>],
    rhs: &UserItemMatrix,
    weights: Option<&[f64]>,
) -> DenseMatrix {
    let n = rhs.n_items();
    let mut out = DenseMatrix::zeros(x_cols.len(), n);
    if n == 0 {
        return out;
    }
    out.as_mut_slice()
        .par_chunks_mut(n)
        .zip(x_cols.par_iter())
        .for_each(|(dst, col)| {
            for &(r, xv) in col {
                let a = match weights {
                    Some(w) => w[r] * xv,
                    None => xv,
                };
                let (items, values) = rhs.row(r);
                for (&j, &v) in items.iter().zip(values) {
                    dst[j] += a * v;
                }
            }
        });
    out
}

fn check_same_shape(x: &UserItemMatrix, y: &UserItemMatrix) -> Result<()> {
    if x.n_users() != y.n_users() || x.n_items() != y.n_items() {
        return Err(Error::DimensionMismatch(format!(
            "X is {}x{} but Y is {}x{}",
            x.n_users(),
            x.n_items(),
            y.n_users(),
            y.n_items()
        )));
    }
    if x.row_users() != y.row_users() {
        return Err(Error::DimensionMismatch(
            "X and Y rows belong to different users".into(),
        ));
    }
    Ok(())
}

/// G = XᵀX and C = XᵀY. With `center_y`, C = Xᵀ(Y − 1μᵀ) = XᵀY − (Xᵀ1)μᵀ
/// and μ (column means of Y) is stored for the add-back at scoring time.
pub fn build_gram(x: &UserItemMatrix, y: &UserItemMatrix, center_y: bool) -> Result<GramStats> {
    check_same_shape(x, y)?;
    let cols = x.columns();
    let g = cross_product(&cols, x, None);
    let mut c = cross_product(&cols, y, None);
    let x_sums = x.column_sums();
    let mut mu = None;
    if center_y {
        let denom = y.n_users().max(1) as f64;
        let means: Vec<f64> = y.column_sums().iter().map(|s| s / denom).collect();
        for (i, &xs) in x_sums.iter().enumerate() {
            if xs == 0.0 {
                continue;
            }
            for (cij, &m) in c.row_mut(i).iter_mut().zip(&means) {
                *cij -= xs * m;
            }
        }
        mu = Some(means);
    }
    Ok(GramStats {
        g,
        c: Some(c),
        mu,
        x_sums,
        n_users: x.n_users(),
        total_weight: x.n_users() as f64,
        provenance: Provenance {
            centered: center_y,
            ..Default::default()
        },
    })
}

/// Statistics for X = Y: only G is computed and C aliases it.
pub fn build_self_gram(x: &UserItemMatrix) -> GramStats {
    let cols = x.columns();
    GramStats {
        g: cross_product(&cols, x, None),
        c: None,
        mu: None,
        x_sums: x.column_sums(),
        n_users: x.n_users(),
        total_weight: x.n_users() as f64,
        provenance: Provenance::default(),
    }
}

/// Statistics for disjoint X, Y drawn at random from a single binary Z, in
/// expectation and with proportionality constants dropped:
/// G = ZᵀZ and C = ZᵀZ − diagMat(diag(ZᵀZ)).
pub fn build_disjoint_gram(z: &UserItemMatrix) -> Result<GramStats> {
    if !z.is_binary() {
        return Err(Error::InvalidInput(
            "disjoint-split statistics require a binary interaction matrix".into(),
        ));
    }
    let cols = z.columns();
    let g = cross_product(&cols, z, None);
    let mut c = g.clone();
    for i in 0..c.n_rows() {
        c.set(i, i, 0.0);
    }
    Ok(GramStats {
        g,
        c: Some(c),
        mu: None,
        x_sums: z.column_sums(),
        n_users: z.n_users(),
        total_weight: z.n_users() as f64,
        provenance: Provenance {
            disjoint_split: true,
            ..Default::default()
        },
    })
}

/// G = Xᵀ·diagMat(w)·X and C = Xᵀ·diagMat(w)·Y for positive per-user weights.
pub fn build_user_weighted_gram(
    x: &UserItemMatrix,
    y: &UserItemMatrix,
    user_weights: &[f64],
) -> Result<GramStats> {
    check_same_shape(x, y)?;
    if user_weights.len() != x.n_users() {
        return Err(Error::DimensionMismatch(format!(
            "{} user weights for {} users",
            user_weights.len(),
            x.n_users()
        )));
    }
    if let Some(w) = user_weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "user weights must be positive and finite, got {w}"
        )));
    }
    let cols = x.columns();
    let g = cross_product(&cols, x, Some(user_weights));
    let c = cross_product(&cols, y, Some(user_weights));
    let mut x_sums = vec![0.0; x.n_items()];
    for (i, col) in cols.iter().enumerate() {
        x_sums[i] = col.iter().map(|&(r, v)| user_weights[r] * v).sum();
    }
    Ok(GramStats {
        g,
        c: Some(c),
        mu: None,
        x_sums,
        n_users: x.n_users(),
        total_weight: user_weights.iter().sum(),
        provenance: Provenance {
            user_weighted: true,
            ..Default::default()
        },
    })
}

const GRAM_MAGIC: &[u8; 4] = b"GRAM";
const GRAM_VERSION: u32 = 1;
const FLAG_DISJOINT: u32 = 1;
const FLAG_WEIGHTED: u32 = 1 << 1;
const FLAG_CENTERED: u32 = 1 << 2;
const FLAG_MU: u32 = 1 << 3;
const FLAG_EXPLICIT_C: u32 = 1 << 4;

impl GramStats {
    /// Assembles statistics from precomputed matrices. `c = None` means C = G.
    /// `x_sums` defaults to diag(G), which equals the column sums for binary X.
    pub fn from_parts(
        g: DenseMatrix,
        c: Option<DenseMatrix>,
        x_sums: Option<Vec<f64>>,
        n_users: usize,
    ) -> Result<Self> {
        if !g.is_square() {
            return Err(Error::DimensionMismatch("G must be square".into()));
        }
        if let Some(c) = &c {
            if c.n_rows() != g.n_rows() || c.n_cols() != g.n_cols() {
                return Err(Error::DimensionMismatch("C must match G".into()));
            }
        }
        let x_sums = x_sums.unwrap_or_else(|| g.diagonal());
        if x_sums.len() != g.n_rows() {
            return Err(Error::DimensionMismatch("column sums must match G".into()));
        }
        Ok(GramStats {
            g,
            c,
            mu: None,
            x_sums,
            n_users,
            total_weight: n_users as f64,
            provenance: Provenance::default(),
        })
    }

    pub fn g(&self) -> &DenseMatrix {
        &self.g
    }

    pub fn c(&self) -> &DenseMatrix {
        self.c.as_ref().unwrap_or(&self.g)
    }

    /// True when C is known to be G itself (X = Y, uncentered).
    pub fn c_is_gram(&self) -> bool {
        match &self.c {
            None => true,
            Some(c) => !self.provenance.centered && !self.provenance.disjoint_split && *c == self.g,
        }
    }

    pub fn mu(&self) -> Option<&[f64]> {
        self.mu.as_deref()
    }

    pub fn x_sums(&self) -> &[f64] {
        &self.x_sums
    }

    pub fn n_items(&self) -> usize {
        self.g.n_rows()
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Header, then row-major little-endian G, C (if stored), μ (if any) and
    /// the column sums.
    pub fn save(&self, path: &Path) -> Result<()> {
        let p = self.provenance;
        let mut flags = 0;
        if p.disjoint_split {
            flags |= FLAG_DISJOINT;
        }
        if p.user_weighted {
            flags |= FLAG_WEIGHTED;
        }
        if p.centered {
            flags |= FLAG_CENTERED;
        }
        if self.mu.is_some() {
            flags |= FLAG_MU;
        }
        if self.c.is_some() {
            flags |= FLAG_EXPLICIT_C;
        }
        write_atomic(path, |w| {
            w.write_all(GRAM_MAGIC)?;
            put_u32(w, GRAM_VERSION)?;
            put_u64(w, self.n_items() as u64)?;
            put_u64(w, self.n_users as u64)?;
            put_u32(w, flags)?;
            put_f64(w, self.total_weight)?;
            put_f64s(w, self.g.as_slice())?;
            if let Some(c) = &self.c {
                put_f64s(w, c.as_slice())?;
            }
            if let Some(mu) = &self.mu {
                put_f64s(w, mu)?;
            }
            put_f64s(w, &self.x_sums)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = read_file(path)?;
        let mut r = Reader::new(&buf, "gram");
        r.magic(GRAM_MAGIC)?;
        let version = r.u32()?;
        if version != GRAM_VERSION {
            return Err(Error::Format(format!("unsupported gram version {version}")));
        }
        let n = r.usize()?;
        let n_users = r.usize()?;
        let flags = r.u32()?;
        let total_weight = r.f64()?;
        let g = DenseMatrix::from_row_major(n, n, r.f64s(n * n)?)?;
        let c = if flags & FLAG_EXPLICIT_C != 0 {
            Some(DenseMatrix::from_row_major(n, n, r.f64s(n * n)?)?)
        } else {
            None
        };
        let mu = if flags & FLAG_MU != 0 {
            Some(r.f64s(n)?)
        } else {
            None
        };
        let x_sums = r.f64s(n)?;
        r.finish()?;
        Ok(GramStats {
            g,
            c,
            mu,
            x_sums,
            n_users,
            total_weight,
            provenance: Provenance {
                disjoint_split: flags & FLAG_DISJOINT != 0,
                user_weighted: flags & FLAG_WEIGHTED != 0,
                centered: flags & FLAG_CENTERED != 0,
            },
        })
    }
}
