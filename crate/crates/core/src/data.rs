//! Interaction logs, the sparse user-item matrix, user splits and popularity
//! statistics.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Csv,
    Tsv,
}

impl InputFormat {
    fn delimiter(self) -> u8 {
        match self {
            InputFormat::Csv => b',',
            InputFormat::Tsv => b'\t',
        }
    }

    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("tab") => InputFormat::Tsv,
            _ => InputFormat::Csv,
        }
    }
}

/// Column mapping for an interaction file with a header row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub user_col: String,
    pub item_col: String,
    pub value_col: Option<String>,
    pub time_col: Option<String>,
}

impl Schema {
    pub fn new(user_col: &str, item_col: &str) -> Self {
        Schema {
            user_col: user_col.to_string(),
            item_col: item_col.to_string(),
            value_col: None,
            time_col: None,
        }
    }

    pub fn with_value(mut self, col: &str) -> Self {
        self.value_col = Some(col.to_string());
        self
    }

    pub fn with_time(mut self, col: &str) -> Self {
        self.time_col = Some(col.to_string());
        self
    }

    /// Schema of the canonical file written by [`InteractionSet::write_tsv`].
    pub fn canonical() -> Self {
        Schema::new("user", "item")
            .with_value("value")
            .with_time("timestamp")
    }
}

/// What to do when the same (user, item) pair occurs more than once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupPolicy {
    /// Largest value wins.
    #[default]
    KeepMax,
    /// Last occurrence in file order wins.
    KeepLast,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub user: usize,
    pub item: usize,
    pub value: f64,
    pub timestamp: Option<i64>,
}

/// Bijection between opaque string keys and dense ids `0..n`, assigned in
/// first-appearance order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyIndex {
    keys: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl KeyIndex {
    pub fn from_keys(keys: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            if lookup.insert(k.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate key '{k}'")));
            }
        }
        Ok(KeyIndex { keys, lookup })
    }

    pub fn intern(&mut self, key: &str) -> usize {
        if let Some(&id) = self.lookup.get(key) {
            return id;
        }
        let id = self.keys.len();
        self.keys.push(key.to_string());
        self.lookup.insert(key.to_string(), id);
        id
    }

    pub fn id(&self, key: &str) -> Option<usize> {
        self.lookup.get(key).copied()
    }

    pub fn key(&self, id: usize) -> &str {
        &self.keys[id]
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Accumulates raw events and applies the dedup policy.
#[derive(Debug, Default)]
pub struct InteractionBuilder {
    users: KeyIndex,
    items: KeyIndex,
    events: Vec<Event>,
    // (user, item) -> position in `events`
    seen: HashMap<(usize, usize), usize>,
    dedup: DedupPolicy,
}

impl InteractionBuilder {
    pub fn new(dedup: DedupPolicy) -> Self {
        InteractionBuilder {
            dedup,
            ..Default::default()
        }
    }

    pub fn push(
        &mut self,
        user: &str,
        item: &str,
        value: f64,
        timestamp: Option<i64>,
        line: u64,
    ) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite value {value} on line {line}"
            )));
        }
        let u = self.users.intern(user);
        let i = self.items.intern(item);
        let ev = Event {
            user: u,
            item: i,
            value,
            timestamp,
        };
        match self.seen.get(&(u, i)) {
            None => {
                self.seen.insert((u, i), self.events.len());
                self.events.push(ev);
            }
            Some(&pos) => match self.dedup {
                DedupPolicy::Error => {
                    return Err(Error::DuplicateEvent {
                        user: user.to_string(),
                        item: item.to_string(),
                        line,
                    })
                }
                DedupPolicy::KeepLast => self.events[pos] = ev,
                DedupPolicy::KeepMax => {
                    if value > self.events[pos].value {
                        self.events[pos] = ev;
                    }
                }
            },
        }
        Ok(())
    }

    pub fn finish(self, binarized: bool) -> InteractionSet {
        InteractionSet {
            events: self.events,
            users: self.users,
            items: self.items,
            binarized,
        }
    }
}

/// Deduplicated event log with dense user and item ids.
#[derive(Debug, Clone)]
pub struct InteractionSet {
    events: Vec<Event>,
    users: KeyIndex,
    items: KeyIndex,
    binarized: bool,
}

fn parse_field<'r>(
    record: &'r csv::StringRecord,
    col: usize,
    path: &Path,
    line: u64,
) -> Result<&'r str> {
    record.get(col).ok_or_else(|| Error::MalformedRow {
        path: path.to_path_buf(),
        line,
        message: format!("missing column {col}"),
    })
}

/// Reads an interaction log with a header row.
///
/// Ids are assigned in first-appearance order. A missing value column means
/// every event has value 1.0. With `binarize`, positive values become 1.0 and
/// non-positive events are dropped.
pub fn load_interactions(
    path: &Path,
    format: InputFormat,
    schema: &Schema,
    binarize: bool,
    dedup: DedupPolicy,
) -> Result<InteractionSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(true)
        .flexible(false)
        .from_reader(BufReader::new(file));

    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedRow {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Usage(format!("column '{name}' not found in {}", path.display())))
    };
    let user_col = find(&schema.user_col)?;
    let item_col = find(&schema.item_col)?;
    let value_col = schema.value_col.as_deref().map(find).transpose()?;
    let time_col = schema.time_col.as_deref().map(find).transpose()?;

    let mut builder = InteractionBuilder::new(dedup);
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let user = parse_field(&record, user_col, path, line)?.trim();
        let item = parse_field(&record, item_col, path, line)?.trim();
        if user.is_empty() || item.is_empty() {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                message: "empty user or item key".into(),
            });
        }
        let mut value = match value_col {
            None => 1.0,
            Some(c) => {
                let raw = parse_field(&record, c, path, line)?.trim();
                raw.parse::<f64>().map_err(|_| Error::MalformedRow {
                    path: path.to_path_buf(),
                    line,
                    message: format!("cannot parse value '{raw}'"),
                })?
            }
        };
        let timestamp = match time_col {
            None => None,
            Some(c) => {
                let raw = parse_field(&record, c, path, line)?.trim();
                if raw.is_empty() {
                    None
                } else {
                    Some(parse_timestamp(raw).ok_or_else(|| Error::MalformedRow {
                        path: path.to_path_buf(),
                        line,
                        message: format!("cannot parse timestamp '{raw}'"),
                    })?)
                }
            }
        };
        if binarize {
            if value <= 0.0 {
                continue;
            }
            value = 1.0;
        }
        builder.push(user, item, value, timestamp, line)?;
    }
    Ok(builder.finish(binarize))
}

fn parse_timestamp(raw: &str) -> Option<i64> {
    raw.parse::<i64>()
        .ok()
        .or_else(|| raw.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| v as i64))
}

impl InteractionSet {
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn users(&self) -> &KeyIndex {
        &self.users
    }

    pub fn items(&self) -> &KeyIndex {
        &self.items
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn is_binarized(&self) -> bool {
        self.binarized
    }

    /// Rebuilds the set from a subset of events, re-assigning ids in
    /// first-appearance order.
    fn rebuild<'a>(&self, kept: impl Iterator<Item = &'a Event>, binarized: bool) -> InteractionSet {
        let mut builder = InteractionBuilder::new(DedupPolicy::KeepLast);
        for ev in kept {
            let value = if binarized { 1.0 } else { ev.value };
            // cannot fail: values are finite and pairs already unique
            builder
                .push(
                    self.users.key(ev.user),
                    self.items.key(ev.item),
                    value,
                    ev.timestamp,
                    0,
                )
                .expect("rebuild of a valid interaction set");
        }
        builder.finish(binarized)
    }

    /// Keeps events whose value is strictly greater than `threshold`.
    pub fn retain_values_above(&self, threshold: f64) -> InteractionSet {
        self.rebuild(
            self.events.iter().filter(|e| e.value > threshold),
            self.binarized,
        )
    }

    /// Positive values become 1.0; non-positive events are dropped.
    pub fn binarize(&self) -> InteractionSet {
        self.rebuild(self.events.iter().filter(|e| e.value > 0.0), true)
    }

    /// Drops items with fewer than `min_item` events, then users with fewer
    /// than `min_user` events (one pass each).
    pub fn filter_min_activity(&self, min_user: usize, min_item: usize) -> InteractionSet {
        let mut item_count = vec![0usize; self.n_items()];
        for e in &self.events {
            item_count[e.item] += 1;
        }
        let after_items: Vec<&Event> = self
            .events
            .iter()
            .filter(|e| item_count[e.item] >= min_item)
            .collect();
        let mut user_count = vec![0usize; self.n_users()];
        for e in &after_items {
            user_count[e.user] += 1;
        }
        self.rebuild(
            after_items.into_iter().filter(|e| user_count[e.user] >= min_user),
            self.binarized,
        )
    }

    /// Writes the canonical tab-separated form (`user, item, value, timestamp`).
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| {
            writeln!(w, "user\titem\tvalue\ttimestamp")?;
            for e in &self.events {
                let ts = e.timestamp.map(|t| t.to_string()).unwrap_or_default();
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}",
                    self.users.key(e.user),
                    self.items.key(e.item),
                    e.value,
                    ts
                )?;
            }
            Ok(())
        })
    }

    /// Per-user timestamps: `(user, item) -> timestamp` for the given users.
    pub fn timestamps_for(&self, users: &[usize]) -> HashMap<(usize, usize), i64> {
        let mask = user_mask(self.n_users(), users);
        self.events
            .iter()
            .filter(|e| mask[e.user])
            .filter_map(|e| e.timestamp.map(|t| ((e.user, e.item), t)))
            .collect()
    }
}

pub(crate) fn user_mask(n_users: usize, users: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; n_users];
    for &u in users {
        if u < n_users {
            mask[u] = true;
        }
    }
    mask
}

/// One user's interactions, sorted by item id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRow {
    pub items: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseRow {
    /// Builds a row from unordered pairs; duplicate items are summed.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut pairs: Vec<(usize, f64)> = pairs.into_iter().collect();
        pairs.sort_by_key(|p| p.0);
        let mut row = SparseRow::default();
        for (i, v) in pairs {
            if row.items.last() == Some(&i) {
                *row.values.last_mut().unwrap() += v;
            } else {
                row.items.push(i);
                row.values.push(v);
            }
        }
        row
    }

    /// Row with value 1.0 for every listed item.
    pub fn indicator(items: impl IntoIterator<Item = usize>) -> Self {
        Self::from_pairs(items.into_iter().map(|i| (i, 1.0)))
    }

    pub fn nnz(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.items.iter().copied().zip(self.values.iter().copied())
    }
}

/// Sparse user-item matrix in compressed row form. Row `r` belongs to user
/// `row_users[r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserItemMatrix {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    row_users: Vec<usize>,
    n_items: usize,
    binarized: bool,
}

impl UserItemMatrix {
    /// Builds the matrix from sparse rows; row `r` is attributed to user `r`.
    pub fn from_rows(n_items: usize, rows: Vec<SparseRow>) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut binarized = true;
        for row in &rows {
            for (i, v) in row.iter() {
                if i >= n_items {
                    return Err(Error::DimensionMismatch(format!(
                        "item id {i} out of range for {n_items} items"
                    )));
                }
                if v == 0.0 {
                    continue;
                }
                if v != 1.0 {
                    binarized = false;
                }
                indices.push(i);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(UserItemMatrix {
            indptr,
            indices,
            values,
            row_users: (0..rows.len()).collect(),
            n_items,
            binarized,
        })
    }

    /// Dense 0/1-valued constructor used mostly by tests.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let n_items = rows.first().map_or(0, Vec::len);
        let sparse = rows
            .iter()
            .map(|r| SparseRow::from_pairs(r.iter().copied().enumerate().filter(|p| p.1 != 0.0)))
            .collect();
        Self::from_rows(n_items, sparse).expect("dense rows are in range")
    }

    /// Matrix over `users` (ascending ids expected), or all users when `None`.
    pub fn from_interactions(iset: &InteractionSet, users: Option<&[usize]>) -> Self {
        let mut per_user: Vec<Vec<(usize, f64)>> = vec![Vec::new(); iset.n_users()];
        for e in iset.events() {
            per_user[e.user].push((e.item, e.value));
        }
        let selected: Vec<usize> = match users {
            Some(u) => u.to_vec(),
            None => (0..iset.n_users()).collect(),
        };
        let rows = selected
            .iter()
            .map(|&u| SparseRow::from_pairs(per_user[u].iter().copied()))
            .collect();
        let mut m = Self::from_rows(iset.n_items(), rows).expect("ids come from the index");
        m.row_users = selected;
        m.binarized = iset.is_binarized() || m.binarized;
        m
    }

    pub fn n_users(&self) -> usize {
        self.row_users.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_binary(&self) -> bool {
        self.binarized && self.values.iter().all(|&v| v == 1.0)
    }

    pub fn row_users(&self) -> &[usize] {
        &self.row_users
    }

    /// Item ids and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn sparse_row(&self, r: usize) -> SparseRow {
        let (items, values) = self.row(r);
        SparseRow {
            items: items.to_vec(),
            values: values.to_vec(),
        }
    }

    /// Row index of user id `user`, if present.
    pub fn row_of_user(&self, user: usize) -> Option<usize> {
        // rows built from ascending user ids in the common case
        match self.row_users.binary_search(&user) {
            Ok(r) => Some(r),
            Err(_) => self.row_users.iter().position(|&u| u == user),
        }
    }

    /// Column-wise view: for each item, the (row, value) pairs in ascending row order.
    pub fn columns(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cols = vec![Vec::new(); self.n_items];
        for r in 0..self.n_users() {
            let (items, values) = self.row(r);
            for (&i, &v) in items.iter().zip(values) {
                cols[i].push((r, v));
            }
        }
        cols
    }

    /// Column sums Xᵀ1.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_items];
        for r in 0..self.n_users() {
            let (items, values) = self.row(r);
            for (&i, &v) in items.iter().zip(values) {
                sums[i] += v;
            }
        }
        sums
    }
}

/// Disjoint user sets for strong-generalization evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_users: Vec<usize>,
    pub validation_users: Vec<usize>,
    pub test_users: Vec<usize>,
    pub fold_in_fraction: f64,
    pub seed: u64,
}

pub const DEFAULT_FOLD_IN_FRACTION: f64 = 0.8;

/// Randomly partitions users into test, validation and training sets.
pub fn split_strong_generalization(
    n_users: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<SplitSpec> {
    if n_val + n_test >= n_users && n_val + n_test > 0 {
        return Err(Error::InvalidInput(format!(
            "{n_val} validation + {n_test} test users leave no training users out of {n_users}"
        )));
    }
    let mut ids: Vec<usize> = (0..n_users).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut test_users = ids[..n_test].to_vec();
    let mut validation_users = ids[n_test..n_test + n_val].to_vec();
    let mut train_users = ids[n_test + n_val..].to_vec();
    test_users.sort_unstable();
    validation_users.sort_unstable();
    train_users.sort_unstable();
    Ok(SplitSpec {
        train_users,
        validation_users,
        test_users,
        fold_in_fraction: DEFAULT_FOLD_IN_FRACTION,
        seed,
    })
}

const SPLIT_FILES: [&str; 3] = ["train_users.txt", "validation_users.txt", "test_users.txt"];

impl SplitSpec {
    /// Writes one file of newline-delimited user keys per set.
    pub fn save(&self, dir: &Path, users: &KeyIndex) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let sets = [&self.train_users, &self.validation_users, &self.test_users];
        for (name, set) in SPLIT_FILES.iter().zip(sets) {
            write_atomic(&dir.join(name), |w| {
                for &u in set.iter() {
                    writeln!(w, "{}", users.key(u))?;
                }
                Ok(())
            })?;
        }
        Ok(())
    }

    /// Reads a split written by [`SplitSpec::save`]. Unknown keys are an error.
    pub fn load(dir: &Path, users: &KeyIndex, fold_in_fraction: f64, seed: u64) -> Result<Self> {
        let mut sets: Vec<Vec<usize>> = Vec::with_capacity(3);
        for name in SPLIT_FILES {
            let path = dir.join(name);
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut set = Vec::new();
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let key = line.trim();
                if key.is_empty() {
                    continue;
                }
                let id = users.id(key).ok_or_else(|| Error::MalformedRow {
                    path: path.clone(),
                    line: n as u64 + 1,
                    message: format!("unknown user key '{key}'"),
                })?;
                set.push(id);
            }
            set.sort_unstable();
            sets.push(set);
        }
        let test_users = sets.pop().unwrap();
        let validation_users = sets.pop().unwrap();
        let train_users = sets.pop().unwrap();
        let spec = SplitSpec {
            train_users,
            validation_users,
            test_users,
            fold_in_fraction,
            seed,
        };
        spec.check_disjoint()?;
        Ok(spec)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut all: Vec<usize> = self
            .train_users
            .iter()
            .chain(&self.validation_users)
            .chain(&self.test_users)
            .copied()
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            return Err(Error::InvalidInput("user sets of the split overlap".into()));
        }
        Ok(())
    }
}

/// Mixes a base seed with a user id into an independent stream seed.
pub fn derive_seed(seed: u64, user: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits a user's row into a fold-in input part of ⌈fraction·nnz⌉ random
/// events and a held-out remainder.
pub fn fold_in_split(row: &SparseRow, fraction: f64, seed: u64) -> Result<(SparseRow, SparseRow)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "fold-in fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let nnz = row.nnz();
    if nnz == 0 {
        return Err(Error::InvalidInput("cannot fold in an empty row".into()));
    }
    // tolerance keeps e.g. 0.8 * 15 = 12.000000000000002 from rounding up
    let n_input = ((fraction * nnz as f64 - 1e-9).ceil() as usize).clamp(1, nnz);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; nnz];
    for idx in sample(&mut rng, nnz, n_input) {
        chosen[idx] = true;
    }
    let mut input = SparseRow::default();
    let mut held_out = SparseRow::default();
    for (k, (i, v)) in row.iter().enumerate() {
        let dst = if chosen[k] { &mut input } else { &mut held_out };
        dst.items.push(i);
        dst.values.push(v);
    }
    Ok((input, held_out))
}

/// Per-item popularity `pop_i = Σ_u Y_ui`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityVector(pub Vec<f64>);

impl PopularityVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Column sums of `matrix`, restricted to rows whose user id is in `user_subset`.
pub fn popularity(matrix: &UserItemMatrix, user_subset: Option<&[usize]>) -> PopularityVector {
    let mask = user_subset.map(|s| {
        let n = matrix.row_users().iter().copied().max().map_or(0, |m| m + 1);
        user_mask(n, s)
    });
    let mut pop = vec![0.0; matrix.n_items()];
    for r in 0..matrix.n_users() {
        if let Some(mask) = &mask {
            if !mask[matrix.row_users()[r]] {
                continue;
            }
        }
        let (items, values) = matrix.row(r);
        for (&i, &v) in items.iter().zip(values) {
            pop[i] += v;
        }
    }
    PopularityVector(pop)
}

/// Successive time intervals holding (close to) equal numbers of events, with
/// per-interval popularity.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeIntervalIndex {
    /// `N + 1` sorted timestamps. Interval 0 covers `[b0, b1]`, interval `k`
    /// covers `(bk, bk+1]`.
    pub boundaries: Vec<i64>,
    pub pops: Vec<PopularityVector>,
    pub counts: Vec<usize>,
}

impl TimeIntervalIndex {
    pub fn n_intervals(&self) -> usize {
        self.pops.len()
    }

    /// Interval containing `t`; ties on a boundary go to the earlier interval
    /// and timestamps outside the covered range map to the nearest interval.
    pub fn interval_of(&self, t: i64) -> usize {
        let upper = &self.boundaries[1..];
        upper.partition_point(|&b| b < t).min(upper.len() - 1)
    }
}

/// Splits the events of `user_subset` into `n_intervals` successive intervals
/// at empirical timestamp quantiles.
pub fn time_intervals(
    iset: &InteractionSet,
    n_intervals: usize,
    user_subset: &[usize],
) -> Result<TimeIntervalIndex> {
    if n_intervals == 0 {
        return Err(Error::InvalidInput("need at least one time interval".into()));
    }
    let mask = user_mask(iset.n_users(), user_subset);
    let mut selected: Vec<(i64, &Event)> = Vec::new();
    for e in iset.events().iter().filter(|e| mask[e.user]) {
        let t = e.timestamp.ok_or_else(|| {
            Error::InvalidInput(format!(
                "event of user '{}' on item '{}' has no timestamp",
                iset.users().key(e.user),
                iset.items().key(e.item)
            ))
        })?;
        selected.push((t, e));
    }
    let n = selected.len();
    if n < n_intervals {
        return Err(Error::InvalidInput(format!(
            "{n} events cannot fill {n_intervals} time intervals"
        )));
    }
    let mut sorted: Vec<i64> = selected.iter().map(|p| p.0).collect();
    sorted.sort_unstable();

    let mut boundaries = Vec::with_capacity(n_intervals + 1);
    boundaries.push(sorted[0]);
    for k in 1..=n_intervals {
        let cut = k * n / n_intervals;
        boundaries.push(sorted[cut - 1]);
    }

    let mut index = TimeIntervalIndex {
        boundaries,
        pops: vec![PopularityVector(vec![0.0; iset.n_items()]); n_intervals],
        counts: vec![0; n_intervals],
    };
    for (t, e) in selected {
        let k = index.interval_of(t);
        index.pops[k].0[e.item] += e.value;
        index.counts[k] += 1;
    }
    Ok(index)
}
