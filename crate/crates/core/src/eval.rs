//! Ranking evaluation under strong generalization.
//!
//! Each evaluated user's history is split into a fold-in part, which is fed
//! to the model, and a held-out part. Unseen items are ranked by score
//! (ties by ascending item id) and compared against the held-out items.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, fold_in_split, PopularityVector, SparseRow, TimeIntervalIndex, UserItemMatrix};
use crate::error::{Error, Result};
use crate::gram::GramStats;
use crate::solver::{predict_scores, solve_ease, solve_rr, solve_zero_diag, DenseModel, Variant};
use crate::sparse::SparseModel;
use crate::weighting::{time_popularity_weights, DEFAULT_EPSILON};

/// Anything that turns a fold-in history into one score per item.
pub trait Scorer: Sync {
    fn n_items(&self) -> usize;
    fn scores(&self, history: &SparseRow) -> Result<Vec<f64>>;
}

impl Scorer for DenseModel {
    fn n_items(&self) -> usize {
        DenseModel::n_items(self)
    }

    fn scores(&self, history: &SparseRow) -> Result<Vec<f64>> {
        predict_scores(self, history)
    }
}

impl Scorer for SparseModel {
    fn n_items(&self) -> usize {
        SparseModel::n_items(self)
    }

    fn scores(&self, history: &SparseRow) -> Result<Vec<f64>> {
        self.predict_scores(history)
    }
}

/// Scores every user by global item popularity.
#[derive(Debug, Clone)]
pub struct PopularityScorer {
    pub pop: PopularityVector,
}

impl Scorer for PopularityScorer {
    fn n_items(&self) -> usize {
        self.pop.len()
    }

    fn scores(&self, _history: &SparseRow) -> Result<Vec<f64>> {
        Ok(self.pop.0.clone())
    }
}

/// Item ids by descending popularity, ties by ascending id.
pub fn popularity_rank(pop: &PopularityVector) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..pop.len()).collect();
    ids.sort_by(|&a, &b| pop.0[b].total_cmp(&pop.0[a]).then(a.cmp(&b)));
    ids
}

fn ranks_before(scores: &[f64], a: usize, b: usize) -> std::cmp::Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// The `k` best items by score, skipping `exclude` and items outside
/// `allowed`.
pub fn top_k(scores: &[f64], exclude: &[usize], allowed: Option<&[bool]>, k: usize) -> Vec<usize> {
    let excluded: HashSet<usize> = exclude.iter().copied().collect();
    let mut cand: Vec<usize> = (0..scores.len())
        .filter(|i| !excluded.contains(i) && allowed.is_none_or(|m| m[*i]))
        .collect();
    if k == 0 {
        return Vec::new();
    }
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, |&a, &b| ranks_before(scores, a, b));
        cand.truncate(k);
    }
    cand.sort_by(|&a, &b| ranks_before(scores, a, b));
    cand
}

fn check_held_out(held_out: &[usize]) -> Result<HashSet<usize>> {
    if held_out.is_empty() {
        return Err(Error::InvalidInput("held-out set is empty".into()));
    }
    Ok(held_out.iter().copied().collect())
}

/// |top-k ∩ held_out| / min(k, |held_out|).
pub fn recall_at_k(ranked: &[usize], held_out: &[usize], k: usize) -> Result<f64> {
    let set = check_held_out(held_out)?;
    let hits = ranked.iter().take(k).filter(|i| set.contains(i)).count();
    let denom = k.min(set.len());
    Ok(if denom == 0 { 0.0 } else { hits as f64 / denom as f64 })
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

fn ideal_dcg(n_relevant: usize, k: usize) -> f64 {
    (1..=n_relevant.min(k)).map(discount).sum()
}

/// Binary-relevance NDCG truncated at `k`.
pub fn ndcg_at_k(ranked: &[usize], held_out: &[usize], k: usize) -> Result<f64> {
    let set = check_held_out(held_out)?;
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| set.contains(i))
        .map(|(r, _)| discount(r + 1))
        .sum();
    let ideal = ideal_dcg(set.len(), k);
    Ok(if ideal == 0.0 { 0.0 } else { dcg / ideal })
}

/// Recall and NDCG from the 1-based ranks of the held-out items. Ranks may
/// repeat when they come from separately re-weighted rankings, so both
/// values are capped at 1.
fn metrics_from_ranks(ranks: &mut [usize], n_held_out: usize, recall_ks: &[usize], ndcg_ks: &[usize]) -> Vec<f64> {
    ranks.sort_unstable();
    let mut out = Vec::with_capacity(recall_ks.len() + ndcg_ks.len());
    for &k in recall_ks {
        let hits = ranks.iter().take_while(|&&r| r <= k).count();
        let denom = k.min(n_held_out);
        out.push(if denom == 0 { 0.0 } else { (hits as f64 / denom as f64).min(1.0) });
    }
    for &k in ndcg_ks {
        let dcg: f64 = ranks.iter().take_while(|&&r| r <= k).map(|&r| discount(r)).sum();
        let ideal = ideal_dcg(n_held_out, k);
        out.push(if ideal == 0.0 { 0.0 } else { (dcg / ideal).min(1.0) });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub stderr: f64,
}

/// Settings echoed into the report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_intervals: Option<usize>,
    pub seed: u64,
    pub fold_in_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, MetricSummary>,
    pub n_users: usize,
    pub n_skipped: usize,
    pub config: ConfigEcho,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|m| m.mean)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.metrics.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}", "metric", "mean", "stderr");
        for (name, m) in &self.metrics {
            let _ = writeln!(s, "{name:<width$}  {:>8.4}  {:>8.4}", m.mean, m.stderr);
        }
        let _ = writeln!(s, "users evaluated: {}, skipped: {}", self.n_users, self.n_skipped);
        for note in &self.notes {
            let _ = writeln!(s, "note: {note}");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub recall_ks: Vec<usize>,
    pub ndcg_ks: Vec<usize>,
    pub fold_in_fraction: f64,
    pub seed: u64,
    /// Items eligible for ranking and as held-out targets.
    pub item_mask: Option<Vec<bool>>,
    pub echo: ConfigEcho,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            recall_ks: vec![20, 50],
            ndcg_ks: vec![100],
            fold_in_fraction: crate::data::DEFAULT_FOLD_IN_FRACTION,
            seed: 0,
            item_mask: None,
            echo: ConfigEcho::default(),
        }
    }
}

impl EvalConfig {
    fn metric_names(&self) -> Vec<String> {
        self.recall_ks
            .iter()
            .map(|k| format!("recall@{k}"))
            .chain(self.ndcg_ks.iter().map(|k| format!("ndcg@{k}")))
            .collect()
    }

    fn max_k(&self) -> usize {
        self.recall_ks.iter().chain(&self.ndcg_ks).copied().max().unwrap_or(0)
    }

    fn validate(&self, n_items: usize) -> Result<()> {
        if self.recall_ks.iter().chain(&self.ndcg_ks).any(|&k| k == 0) {
            return Err(Error::InvalidInput("cutoffs must be positive".into()));
        }
        if !(self.fold_in_fraction > 0.0 && self.fold_in_fraction < 1.0) {
            return Err(Error::InvalidInput(format!(
                "fold-in fraction must lie in (0, 1), got {}",
                self.fold_in_fraction
            )));
        }
        if let Some(mask) = &self.item_mask {
            if mask.len() != n_items {
                return Err(Error::DimensionMismatch(format!(
                    "item mask has {} entries for {n_items} items",
                    mask.len()
                )));
            }
        }
        Ok(())
    }

    fn echo_with_seed(&self) -> ConfigEcho {
        ConfigEcho {
            seed: self.seed,
            fold_in_fraction: self.fold_in_fraction,
            ..self.echo.clone()
        }
    }
}

/// Fold-in and held-out parts of one user's history, or None when either
/// part would be empty.
fn user_parts(matrix: &UserItemMatrix, user: usize, cfg: &EvalConfig) -> Result<Option<(SparseRow, SparseRow)>> {
    let Some(r) = matrix.row_of_user(user) else {
        return Ok(None);
    };
    let mut row = matrix.sparse_row(r);
    if let Some(mask) = &cfg.item_mask {
        row = SparseRow::from_pairs(row.iter().filter(|(i, _)| mask[*i]));
    }
    if row.nnz() < 2 {
        return Ok(None);
    }
    let (input, held) = fold_in_split(&row, cfg.fold_in_fraction, derive_seed(cfg.seed, user))?;
    if input.is_empty() || held.is_empty() {
        return Ok(None);
    }
    Ok(Some((input, held)))
}

fn summarize(per_user: Vec<Option<Vec<f64>>>, cfg: &EvalConfig) -> EvalReport {
    let names = cfg.metric_names();
    let rows: Vec<Vec<f64>> = per_user.iter().flatten().cloned().collect();
    let n = rows.len();
    let mut metrics = BTreeMap::new();
    for (m, name) in names.into_iter().enumerate() {
        let mean = if n == 0 { 0.0 } else { rows.iter().map(|r| r[m]).sum::<f64>() / n as f64 };
        let stderr = if n < 2 {
            0.0
        } else {
            let var = rows.iter().map(|r| (r[m] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        metrics.insert(name, MetricSummary { mean, stderr });
    }
    EvalReport {
        metrics,
        n_users: n,
        n_skipped: per_user.len() - n,
        config: cfg.echo_with_seed(),
        notes: Vec::new(),
    }
}

/// Strong-generalization evaluation of `scorer` on `users`, whose full
/// histories are rows of `matrix`.
pub fn evaluate_model(scorer: &dyn Scorer, matrix: &UserItemMatrix, users: &[usize], cfg: &EvalConfig) -> Result<EvalReport> {
    let n_items = scorer.n_items();
    if matrix.n_items() != n_items {
        return Err(Error::DimensionMismatch(format!(
            "model has {n_items} items, data {}",
            matrix.n_items()
        )));
    }
    cfg.validate(n_items)?;
    let max_k = cfg.max_k();
    let per_user: Vec<Option<Vec<f64>>> = users
        .par_iter()
        .map(|&u| -> Result<Option<Vec<f64>>> {
            let Some((input, held)) = user_parts(matrix, u, cfg)? else {
                return Ok(None);
            };
            let scores = scorer.scores(&input)?;
            let ranked = top_k(&scores, &input.items, cfg.item_mask.as_deref(), max_k);
            debug_assert!(ranked.iter().all(|i| input.items.binary_search(i).is_err()));
            let held_set: HashSet<usize> = held.items.iter().copied().collect();
            let mut ranks: Vec<usize> = ranked
                .iter()
                .enumerate()
                .filter(|(_, i)| held_set.contains(i))
                .map(|(r, _)| r + 1)
                .collect();
            Ok(Some(metrics_from_ranks(&mut ranks, held.nnz(), &cfg.recall_ks, &cfg.ndcg_ks)))
        })
        .collect::<Result<_>>()?;
    Ok(summarize(per_user, cfg))
}

pub const TIME_AWARE_NOTE: &str = "time-aware protocol: popularity per interval is measured over the \
whole evaluation period, so weights for early events use later interactions";

/// Per-interaction evaluation with time-dependent item weights: every
/// held-out event is ranked after re-scaling the model columns by the
/// weights of the interval its timestamp falls into.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_time_aware(
    model: &DenseModel,
    intervals: &TimeIntervalIndex,
    alpha: f64,
    epsilon: Option<f64>,
    matrix: &UserItemMatrix,
    users: &[usize],
    timestamps: &HashMap<(usize, usize), i64>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if !model.variant.has_zero_diagonal() {
        return Err(Error::InvalidInput(
            "time-aware evaluation needs a zero-diagonal model".into(),
        ));
    }
    let n_items = model.n_items();
    if matrix.n_items() != n_items {
        return Err(Error::DimensionMismatch(format!(
            "model has {n_items} items, data {}",
            matrix.n_items()
        )));
    }
    cfg.validate(n_items)?;
    let mut overall = vec![0.0; n_items];
    for p in &intervals.pops {
        if p.len() != n_items {
            return Err(Error::DimensionMismatch("interval popularity length mismatch".into()));
        }
        for (o, v) in overall.iter_mut().zip(&p.0) {
            *o += v;
        }
    }
    let overall = PopularityVector(overall);
    let eps = epsilon.unwrap_or(DEFAULT_EPSILON);
    let weights: Vec<Vec<f64>> = intervals
        .pops
        .iter()
        .map(|p| time_popularity_weights(p, &overall, alpha, eps).map(|w| w.w))
        .collect::<Result<_>>()?;

    let per_user: Vec<Option<Vec<f64>>> = users
        .par_iter()
        .map(|&u| -> Result<Option<Vec<f64>>> {
            let Some((input, held)) = user_parts(matrix, u, cfg)? else {
                return Ok(None);
            };
            let scores = predict_scores(model, &input)?;
            let mut eligible = vec![true; n_items];
            for &i in &input.items {
                eligible[i] = false;
            }
            if let Some(mask) = &cfg.item_mask {
                for (e, m) in eligible.iter_mut().zip(mask) {
                    *e &= *m;
                }
            }
            let mut ranks = Vec::with_capacity(held.nnz());
            for &h in &held.items {
                let t = *timestamps.get(&(u, h)).ok_or_else(|| {
                    Error::InvalidInput(format!("held-out event ({u}, {h}) has no timestamp"))
                })?;
                let w = &weights[intervals.interval_of(t)];
                let target = scores[h] * w[h];
                let above = (0..n_items)
                    .filter(|&j| eligible[j] && j != h)
                    .filter(|&j| {
                        let s = scores[j] * w[j];
                        s > target || (s == target && j < h)
                    })
                    .count();
                ranks.push(above + 1);
            }
            Ok(Some(metrics_from_ranks(&mut ranks, held.nnz(), &cfg.recall_ks, &cfg.ndcg_ks)))
        })
        .collect::<Result<_>>()?;
    let mut report = summarize(per_user, cfg);
    report.notes.push(TIME_AWARE_NOTE.to_string());
    Ok(report)
}

/// Trains one model per λ on `gram` and evaluates it on `users`; returns the
/// λ maximizing `metric` (smallest λ on ties) and all reports in input order.
pub fn grid_search_lambda(
    gram: &GramStats,
    variant: Variant,
    matrix: &UserItemMatrix,
    users: &[usize],
    lambdas: &[f64],
    metric: &str,
    cfg: &EvalConfig,
) -> Result<(f64, Vec<(f64, EvalReport)>)> {
    if lambdas.is_empty() {
        return Err(Error::InvalidInput("empty lambda grid".into()));
    }
    if let Some(bad) = lambdas.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {bad}")));
    }
    let mut reports = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let model = match variant {
            Variant::Rr => solve_rr(gram, lambda)?,
            Variant::ZeroDiag => solve_zero_diag(gram, lambda)?,
            Variant::EaseXy => solve_ease(gram, lambda)?,
        };
        let mut c = cfg.clone();
        c.echo.lambda = Some(lambda);
        c.echo.variant = Some(variant.name().to_string());
        let report = evaluate_model(&model, matrix, users, &c)?;
        log::info!("lambda {lambda}: {metric} = {:?}", report.mean(metric));
        reports.push((lambda, report));
    }
    let mut best: Option<(f64, f64)> = None;
    for (lambda, report) in &reports {
        let value = report
            .mean(metric)
            .ok_or_else(|| Error::InvalidInput(format!("metric '{metric}' is not computed")))?;
        let better = match best {
            None => true,
            Some((bl, bv)) => value > bv || (value == bv && *lambda < bl),
        };
        if better {
            best = Some((*lambda, value));
        }
    }
    Ok((best.map(|b| b.0).unwrap_or(lambdas[0]), reports))
}
