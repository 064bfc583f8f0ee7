//! Item re-scaling of trained zero-diagonal models.
//!
//! Training on re-scaled targets Y·diagMat(w) yields B·diagMat(w), so the
//! weights can be swapped at serving time without retraining.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{KeyIndex, PopularityVector};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::solver::DenseModel;

/// Guards against zero popularity of items unseen in the training users.
pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Uniform,
    InversePop,
    TimeAdjusted,
    /// Read from a file without a kind annotation.
    Custom,
}

impl WeightKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            WeightKind::Uniform => 0,
            WeightKind::InversePop => 1,
            WeightKind::TimeAdjusted => 2,
            WeightKind::Custom => 3,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(WeightKind::Uniform),
            1 => Ok(WeightKind::InversePop),
            2 => Ok(WeightKind::TimeAdjusted),
            3 => Ok(WeightKind::Custom),
            _ => Err(Error::Format(format!("unknown weight kind {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightKind::Uniform => "uniform",
            WeightKind::InversePop => "inverse_pop",
            WeightKind::TimeAdjusted => "time_adjusted",
            WeightKind::Custom => "custom",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            WeightKind::Uniform,
            WeightKind::InversePop,
            WeightKind::TimeAdjusted,
            WeightKind::Custom,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemWeightVector {
    pub w: Vec<f64>,
    pub kind: WeightKind,
    pub alpha: f64,
}

impl ItemWeightVector {
    pub fn uniform(n_items: usize) -> Self {
        ItemWeightVector {
            w: vec![1.0; n_items],
            kind: WeightKind::Uniform,
            alpha: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "item weights must be positive and finite, got {bad}"
            )));
        }
        Ok(())
    }
}

fn check_alpha_eps(alpha: f64, epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be non-negative, got {epsilon}")));
    }
    Ok(())
}

/// w_i = 1 / (pop_i + ε)^α, unnormalized.
pub fn popularity_weights(pop: &PopularityVector, alpha: f64, epsilon: f64) -> Result<ItemWeightVector> {
    check_alpha_eps(alpha, epsilon)?;
    let w = pop
        .as_slice()
        .iter()
        .map(|p| 1.0 / (p + epsilon).powf(alpha))
        .collect();
    let out = ItemWeightVector {
        w,
        kind: WeightKind::InversePop,
        alpha,
    };
    out.validate()?;
    Ok(out)
}

/// w_i(t) = ((pop_t,i + ε) / (pop_i + ε))^α.
pub fn time_popularity_weights(
    pop_t: &PopularityVector,
    pop: &PopularityVector,
    alpha: f64,
    epsilon: f64,
) -> Result<ItemWeightVector> {
    check_alpha_eps(alpha, epsilon)?;
    if pop_t.len() != pop.len() {
        return Err(Error::DimensionMismatch(format!(
            "interval popularity has {} items, overall popularity {}",
            pop_t.len(),
            pop.len()
        )));
    }
    let w = pop_t
        .as_slice()
        .iter()
        .zip(pop.as_slice())
        .map(|(pt, p)| ((pt + epsilon) / (p + epsilon)).powf(alpha))
        .collect();
    let out = ItemWeightVector {
        w,
        kind: WeightKind::TimeAdjusted,
        alpha,
    };
    out.validate()?;
    Ok(out)
}

/// Returns a copy of `model` with column j of B multiplied by w_j. Earlier
/// weights compose multiplicatively; centering means are rescaled with the
/// targets.
pub fn apply_item_rescaling(model: &DenseModel, weights: &ItemWeightVector) -> Result<DenseModel> {
    if !model.variant.has_zero_diagonal() {
        return Err(Error::InvalidInput(format!(
            "item re-scaling applies to zero-diagonal models, not '{}'",
            model.variant.name()
        )));
    }
    if weights.len() != model.n_items() {
        return Err(Error::DimensionMismatch(format!(
            "{} item weights for {} items",
            weights.len(),
            model.n_items()
        )));
    }
    let mut out = model.clone();
    for i in 0..out.b.n_rows() {
        for (bij, wj) in out.b.row_mut(i).iter_mut().zip(&weights.w) {
            *bij *= wj;
        }
    }
    if let Some(mu) = &mut out.mu {
        for (m, wj) in mu.iter_mut().zip(&weights.w) {
            *m *= wj;
        }
    }
    out.applied_item_weights = Some(match &model.applied_item_weights {
        None => weights.clone(),
        Some(prev) => ItemWeightVector {
            w: prev.w.iter().zip(&weights.w).map(|(a, b)| a * b).collect(),
            kind: weights.kind,
            alpha: weights.alpha,
        },
    });
    Ok(out)
}

/// Writes `item,weight` rows preceded by a `# kind=... alpha=...` line.
pub fn save_weights_csv(path: &Path, weights: &ItemWeightVector, item_keys: &[String]) -> Result<()> {
    if item_keys.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} item keys for {} weights",
            item_keys.len(),
            weights.len()
        )));
    }
    write_atomic(path, |w| {
        writeln!(w, "# kind={} alpha={}", weights.kind.name(), weights.alpha)?;
        writeln!(w, "item,weight")?;
        for (k, v) in item_keys.iter().zip(&weights.w) {
            writeln!(w, "{k},{v}")?;
        }
        Ok(())
    })
}

/// Reads a weight file against the model's item keys. Every item must be
/// present exactly once.
pub fn load_weights_csv(path: &Path, items: &KeyIndex) -> Result<ItemWeightVector> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kind = WeightKind::Custom;
    let mut alpha = 0.0;
    let mut w = vec![f64::NAN; items.len()];
    let mut seen_header = false;
    for (n, line) in text.lines().enumerate() {
        let line_no = n as u64 + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            for part in meta.split_whitespace() {
                if let Some(k) = part.strip_prefix("kind=") {
                    kind = WeightKind::parse(k).unwrap_or(WeightKind::Custom);
                } else if let Some(a) = part.strip_prefix("alpha=") {
                    alpha = a.parse().unwrap_or(0.0);
                }
            }
            continue;
        }
        if !seen_header {
            seen_header = true;
            if line == "item,weight" {
                continue;
            }
        }
        let malformed = |message: String| Error::MalformedRow {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let (key, value) = line
            .rsplit_once(',')
            .ok_or_else(|| malformed("expected 'item,weight'".into()))?;
        let id = items
            .id(key)
            .ok_or_else(|| malformed(format!("unknown item '{key}'")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| malformed(format!("cannot parse weight '{value}'")))?;
        if !w[id].is_nan() {
            return Err(malformed(format!("duplicate weight for item '{key}'")));
        }
        w[id] = v;
    }
    if let Some(missing) = w.iter().position(|v| v.is_nan()) {
        return Err(Error::InvalidInput(format!(
            "weight file {} has no entry for item '{}'",
            path.display(),
            items.key(missing)
        )));
    }
    let out = ItemWeightVector { w, kind, alpha };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::DenseMatrix;
    use crate::solver::Variant;

    fn model(rows: &[&[f64]]) -> DenseModel {
        DenseModel {
            b: DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()),
            variant: Variant::ZeroDiag,
            lambda: 1.0,
            mu: None,
            applied_item_weights: None,
            gamma: None,
        }
    }

    #[test]
    fn inverse_popularity() {
        let pop = PopularityVector(vec![4.0, 1.0]);
        assert_eq!(popularity_weights(&pop, 0.5, 0.0).unwrap().w, vec![0.5, 1.0]);
        assert_eq!(popularity_weights(&pop, 0.0, 0.0).unwrap().w, vec![1.0, 1.0]);
        assert!(popularity_weights(&pop, 1.5, 0.0).is_err());
        // zero popularity stays finite thanks to epsilon
        let cold = PopularityVector(vec![0.0, 3.0]);
        let w = popularity_weights(&cold, 0.5, DEFAULT_EPSILON).unwrap();
        assert!(w.w[0].is_finite() && w.w[0] > 0.0);
        assert!(popularity_weights(&cold, 0.5, 0.0).is_err());
    }

    #[test]
    fn time_weights() {
        let pop = PopularityVector(vec![4.0, 1.0]);
        let same = time_popularity_weights(&pop, &pop, 0.7, DEFAULT_EPSILON).unwrap();
        assert_eq!(same.w, vec![1.0, 1.0]);
        let pop_t = PopularityVector(vec![1.0, 4.0]);
        let w1 = time_popularity_weights(&pop_t, &pop, 1.0, 0.0).unwrap();
        assert_eq!(w1.w, vec![0.25, 4.0]);
        let w_half = time_popularity_weights(&pop_t, &pop, 0.5, 0.0).unwrap();
        assert_eq!(w_half.w, vec![0.5, 2.0]);
        assert!(time_popularity_weights(&PopularityVector(vec![1.0]), &pop, 0.5, 0.0).is_err());
    }

    #[test]
    fn column_scaling() {
        let m = model(&[&[0.0, 1.0 / 3.0], &[1.0 / 3.0, 0.0]]);
        let same = apply_item_rescaling(&m, &ItemWeightVector::uniform(2)).unwrap();
        assert_eq!(same.b, m.b);
        let w = ItemWeightVector {
            w: vec![2.0, 1.0],
            kind: WeightKind::Custom,
            alpha: 0.0,
        };
        let scaled = apply_item_rescaling(&m, &w).unwrap();
        assert_eq!(scaled.b.row(0), &[0.0, 1.0 / 3.0]);
        assert_eq!(scaled.b.row(1), &[2.0 / 3.0, 0.0]);
        assert_eq!(scaled.b.diagonal(), vec![0.0, 0.0]);
        assert_eq!(scaled.applied_item_weights.as_ref(), Some(&w));
        // the original is untouched
        assert_eq!(m.b.get(1, 0), 1.0 / 3.0);

        assert!(apply_item_rescaling(&m, &ItemWeightVector::uniform(3)).is_err());
        let rr = DenseModel {
            variant: Variant::Rr,
            ..m
        };
        assert!(apply_item_rescaling(&rr, &w).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let items = KeyIndex::from_keys(vec!["a".into(), "b,c".into()]).unwrap();
        let w = ItemWeightVector {
            w: vec![0.25, 3.0],
            kind: WeightKind::InversePop,
            alpha: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.csv");
        save_weights_csv(&p, &w, items.keys()).unwrap();
        assert_eq!(load_weights_csv(&p, &items).unwrap(), w);

        std::fs::write(&p, "item,weight\na,1\n").unwrap();
        assert!(load_weights_csv(&p, &items).is_err());
        std::fs::write(&p, "item,weight\na,1\nzzz,2\n").unwrap();
        assert!(matches!(
            load_weights_csv(&p, &items),
            Err(Error::MalformedRow { line: 3, .. })
        ));
    }
}
