//! The `ease` command-line tool.
//!
//! Every option can also be given in a JSON file passed with `--config`,
//! using the option name in snake_case as key. Flags override the file.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_interactions, popularity, split_strong_generalization, time_intervals, DedupPolicy, InputFormat,
    InteractionSet, KeyIndex, Schema, SparseRow, SplitSpec, UserItemMatrix, DEFAULT_FOLD_IN_FRACTION,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_model, evaluate_time_aware, grid_search_lambda, popularity_rank, top_k, ConfigEcho, EvalConfig,
    EvalReport, PopularityScorer, Scorer,
};
use crate::gram::{build_disjoint_gram, build_gram, build_self_gram, GramStats};
use crate::io::{read_file, write_atomic};
use crate::solver::{solve_ease, solve_rr, solve_zero_diag, DenseModel, Variant};
use crate::sparse::{train_sparse, SparseModel, DEFAULT_N_MAX};
use crate::weighting::{
    apply_item_rescaling, load_weights_csv, popularity_weights, save_weights_csv, time_popularity_weights,
    ItemWeightVector, DEFAULT_EPSILON,
};

#[derive(Debug, Parser)]
#[command(name = "ease", version, about = "Closed-form item-item recommenders")]
pub struct Cli {
    /// JSON file with option defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice (split, fold-in).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read a raw interaction log, filter it and write the canonical TSV.
    Ingest(IngestArgs),
    /// Split users into train, validation and test sets.
    Split(SplitArgs),
    /// Train a dense model on the training users.
    Train(TrainArgs),
    /// Train a block-wise sparse model on the training users.
    TrainSparse(TrainSparseArgs),
    /// Apply popularity-based item weights to a trained model.
    Rescale(RescaleArgs),
    /// Evaluate a model or the popularity baseline.
    Evaluate(EvaluateArgs),
    /// Top-k recommendations for a single history.
    Recommend(RecommendArgs),
    /// Items ranked by popularity.
    Popularity(PopularityArgs),
}

/// Keys accepted in the `--config` file.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub format: Option<String>,
    pub user_col: Option<String>,
    pub item_col: Option<String>,
    pub value_col: Option<String>,
    pub time_col: Option<String>,
    pub min_value: Option<f64>,
    pub binarize: Option<bool>,
    pub min_user_events: Option<usize>,
    pub min_item_events: Option<usize>,
    pub dedup: Option<String>,
    pub interactions: Option<PathBuf>,
    pub split_dir: Option<PathBuf>,
    pub n_val: Option<usize>,
    pub n_test: Option<usize>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub lambdas: Option<Vec<f64>>,
    pub variant: Option<String>,
    pub gram_mode: Option<String>,
    pub gram: Option<PathBuf>,
    pub gram_out: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub epsilon: Option<f64>,
    pub theta: Option<f64>,
    pub n_max: Option<usize>,
    pub time_intervals: Option<usize>,
    pub at: Option<i64>,
    pub fold_in_fraction: Option<f64>,
    pub recall_k: Option<Vec<usize>>,
    pub ndcg_k: Option<Vec<usize>>,
    pub users: Option<String>,
    pub baseline: Option<String>,
    pub model: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub weights_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
    pub text_out: Option<PathBuf>,
    pub history: Option<Vec<String>>,
    pub top_k: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Usage(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Raw interaction file with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// csv or tsv (default: from the extension).
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    user_col: Option<String>,
    #[arg(long)]
    item_col: Option<String>,
    #[arg(long)]
    value_col: Option<String>,
    #[arg(long)]
    time_col: Option<String>,
    /// Keep only events with value strictly above this.
    #[arg(long)]
    min_value: Option<f64>,
    /// Map positive values to 1.
    #[arg(long)]
    binarize: bool,
    #[arg(long)]
    min_user_events: Option<usize>,
    #[arg(long)]
    min_item_events: Option<usize>,
    /// keep_max, keep_last or error.
    #[arg(long)]
    dedup: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Canonical interaction TSV written by `ingest`.
    #[arg(long)]
    interactions: Option<PathBuf>,
    /// Directory with the user split written by `split`.
    #[arg(long)]
    split_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    interactions: Option<PathBuf>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// rr, zero_diag or ease.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Grid of λ values searched on the validation users.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// self, centered or disjoint.
    #[arg(long)]
    gram_mode: Option<String>,
    /// Precomputed Gram statistics to train from.
    #[arg(long)]
    gram: Option<PathBuf>,
    #[arg(long)]
    gram_out: Option<PathBuf>,
    /// JSON report of the λ search.
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainSparseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    lambda: Option<f64>,
    /// Correlation threshold on |cor|.
    #[arg(long)]
    theta: Option<f64>,
    /// Maximum pattern entries per column.
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    gram: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RescaleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Number of time intervals; with `--at`, time-dependent weights.
    #[arg(long)]
    time_intervals: Option<usize>,
    /// Timestamp whose interval supplies the popularity.
    #[arg(long, allow_hyphen_values = true)]
    at: Option<i64>,
    /// Weights file to apply instead of computing weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    weights_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    /// `popularity` evaluates the popularity ranking instead of a model.
    #[arg(long)]
    baseline: Option<String>,
    /// test or validation.
    #[arg(long)]
    users: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Per-interaction protocol with time-dependent weights.
    #[arg(long)]
    time_intervals: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    fold_in_fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    recall_k: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    ndcg_k: Option<Vec<usize>>,
    /// JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Text table (printed to stdout when absent).
    #[arg(long)]
    text_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RecommendArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated item keys.
    #[arg(long, value_delimiter = ',')]
    history: Option<Vec<String>>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Interactions for the popularity fallback on an empty history.
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PopularityArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn require<T>(value: Option<T>, name: &str) -> Result<T> {
    value.ok_or_else(|| usage(format!("missing --{} (or '{}' in the config file)", name.replace('_', "-"), name)))
}

fn check_input(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")))
    }
}

fn check_output(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        )),
        _ => Ok(()),
    }
}

fn check_lambda(lambda: f64) -> Result<f64> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(lambda)
    } else {
        Err(usage(format!("lambda must be positive, got {lambda}")))
    }
}

fn check_alpha(alpha: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(alpha)
    } else {
        Err(usage(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

fn check_epsilon(eps: f64) -> Result<f64> {
    if eps > 0.0 && eps.is_finite() {
        Ok(eps)
    } else {
        Err(usage(format!("epsilon must be positive, got {eps}")))
    }
}

fn check_fraction(f: f64) -> Result<f64> {
    if f > 0.0 && f < 1.0 {
        Ok(f)
    } else {
        Err(usage(format!("fold-in fraction must lie in (0, 1), got {f}")))
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    match s {
        "rr" => Ok(Variant::Rr),
        "zero_diag" | "zero-diag" => Ok(Variant::ZeroDiag),
        "ease" | "ease_xy" | "ease-xy" => Ok(Variant::EaseXy),
        _ => Err(usage(format!("unknown variant '{s}' (rr, zero_diag, ease)"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum GramMode {
    SelfGram,
    Centered,
    Disjoint,
}

fn parse_gram_mode(s: &str) -> Result<GramMode> {
    match s {
        "self" => Ok(GramMode::SelfGram),
        "centered" => Ok(GramMode::Centered),
        "disjoint" => Ok(GramMode::Disjoint),
        _ => Err(usage(format!("unknown gram mode '{s}' (self, centered, disjoint)"))),
    }
}

fn parse_dedup(s: &str) -> Result<DedupPolicy> {
    match s {
        "keep_max" | "keep-max" => Ok(DedupPolicy::KeepMax),
        "keep_last" | "keep-last" => Ok(DedupPolicy::KeepLast),
        "error" => Ok(DedupPolicy::Error),
        _ => Err(usage(format!("unknown dedup policy '{s}' (keep_max, keep_last, error)"))),
    }
}

/// Interactions and split shared by most commands.
struct Workspace {
    iset: InteractionSet,
    split: Option<SplitSpec>,
}

impl Workspace {
    fn paths(args: &DataArgs, cfg: &RunConfig) -> (Option<PathBuf>, Option<PathBuf>) {
        (
            args.interactions.clone().or_else(|| cfg.interactions.clone()),
            args.split_dir.clone().or_else(|| cfg.split_dir.clone()),
        )
    }

    fn load(interactions: &Path, split_dir: Option<&Path>, fraction: f64, seed: u64) -> Result<Self> {
        let iset = load_canonical(interactions)?;
        let split = split_dir
            .map(|d| SplitSpec::load(d, iset.users(), fraction, seed))
            .transpose()?;
        Ok(Workspace { iset, split })
    }

    fn split(&self) -> Result<&SplitSpec> {
        self.split.as_ref().ok_or_else(|| usage("missing --split-dir"))
    }

    fn train_users(&self) -> Vec<usize> {
        match &self.split {
            Some(s) => s.train_users.clone(),
            None => (0..self.iset.n_users()).collect(),
        }
    }

    fn train_matrix(&self) -> UserItemMatrix {
        UserItemMatrix::from_interactions(&self.iset, Some(&self.train_users()))
    }
}

fn load_canonical(path: &Path) -> Result<InteractionSet> {
    load_interactions(path, InputFormat::Tsv, &Schema::canonical(), false, DedupPolicy::Error)
}

fn build_train_gram(ws: &Workspace, mode: GramMode) -> Result<GramStats> {
    let x = ws.train_matrix();
    match mode {
        GramMode::SelfGram => Ok(build_self_gram(&x)),
        GramMode::Centered => build_gram(&x, &x, true),
        GramMode::Disjoint => build_disjoint_gram(&x),
    }
}

fn solve(gram: &GramStats, variant: Variant, lambda: f64) -> Result<DenseModel> {
    match variant {
        Variant::Rr => solve_rr(gram, lambda),
        Variant::ZeroDiag => solve_zero_diag(gram, lambda),
        Variant::EaseXy => solve_ease(gram, lambda),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a, &cfg),
        Command::Split(a) => cmd_split(a, &cfg, seed),
        Command::Train(a) => cmd_train(a, &cfg, seed),
        Command::TrainSparse(a) => cmd_train_sparse(a, &cfg),
        Command::Rescale(a) => cmd_rescale(a, &cfg),
        Command::Evaluate(a) => cmd_evaluate(a, &cfg, seed),
        Command::Recommend(a) => cmd_recommend(a, &cfg),
        Command::Popularity(a) => cmd_popularity(a, &cfg),
    }
}

fn cmd_ingest(a: IngestArgs, cfg: &RunConfig) -> Result<()> {
    let data = require(a.data.or_else(|| cfg.data.clone()), "data")?;
    let out = require(a.out.or_else(|| cfg.out.clone()), "out")?;
    let format = match a.format.or_else(|| cfg.format.clone()).as_deref() {
        None => InputFormat::from_path(&data),
        Some("csv") => InputFormat::Csv,
        Some("tsv") => InputFormat::Tsv,
        Some(f) => return Err(usage(format!("unknown format '{f}' (csv, tsv)"))),
    };
    let user_col = require(a.user_col.or_else(|| cfg.user_col.clone()), "user_col")?;
    let item_col = require(a.item_col.or_else(|| cfg.item_col.clone()), "item_col")?;
    let mut schema = Schema::new(&user_col, &item_col);
    if let Some(v) = a.value_col.or_else(|| cfg.value_col.clone()) {
        schema = schema.with_value(&v);
    }
    if let Some(t) = a.time_col.or_else(|| cfg.time_col.clone()) {
        schema = schema.with_time(&t);
    }
    let dedup = match a.dedup.or_else(|| cfg.dedup.clone()) {
        Some(d) => parse_dedup(&d)?,
        None => DedupPolicy::default(),
    };
    let min_value = a.min_value.or(cfg.min_value);
    let binarize = a.binarize || cfg.binarize.unwrap_or(false);
    let min_user = a.min_user_events.or(cfg.min_user_events).unwrap_or(0);
    let min_item = a.min_item_events.or(cfg.min_item_events).unwrap_or(0);
    check_input(&data)?;
    check_output(&out)?;

    let mut iset = load_interactions(&data, format, &schema, false, dedup)?;
    log::info!("read {} events, {} users, {} items", iset.events().len(), iset.n_users(), iset.n_items());
    if let Some(th) = min_value {
        iset = iset.retain_values_above(th);
    }
    if binarize {
        iset = iset.binarize();
    }
    if min_user > 0 || min_item > 0 {
        iset = iset.filter_min_activity(min_user, min_item);
    }
    log::info!("kept {} events, {} users, {} items", iset.events().len(), iset.n_users(), iset.n_items());
    iset.write_tsv(&out)
}

fn cmd_split(a: SplitArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let interactions = require(a.interactions.or_else(|| cfg.interactions.clone()), "interactions")?;
    let out = require(a.out.or_else(|| cfg.out.clone()).or_else(|| cfg.split_dir.clone()), "out")?;
    let n_val = a.n_val.or(cfg.n_val).unwrap_or(0);
    let n_test = require(a.n_test.or(cfg.n_test), "n_test")?;
    check_input(&interactions)?;
    let iset = load_canonical(&interactions)?;
    let split = split_strong_generalization(iset.n_users(), n_val, n_test, seed)?;
    split.save(&out, iset.users())
}

fn cmd_train(a: TrainArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let (interactions, split_dir) = Workspace::paths(&a.data, cfg);
    let out = require(a.out.or_else(|| cfg.out.clone()), "out")?;
    let variant = parse_variant(&a.variant.or_else(|| cfg.variant.clone()).unwrap_or_else(|| "zero_diag".into()))?;
    let lambdas = a.lambdas.or_else(|| cfg.lambdas.clone());
    let lambda = a.lambda.or(cfg.lambda);
    if lambda.is_none() && lambdas.is_none() {
        return Err(usage("missing --lambda or --lambdas"));
    }
    if let Some(l) = lambda {
        check_lambda(l)?;
    }
    for &l in lambdas.iter().flatten() {
        check_lambda(l)?;
    }
    let mode = parse_gram_mode(&a.gram_mode.or_else(|| cfg.gram_mode.clone()).unwrap_or_else(|| "self".into()))?;
    let gram_in = a.gram.or_else(|| cfg.gram.clone());
    let gram_out = a.gram_out.or_else(|| cfg.gram_out.clone());
    let report_out = a.report_out.or_else(|| cfg.report_out.clone());
    let interactions = require(interactions, "interactions")?;
    check_input(&interactions)?;
    if let Some(g) = &gram_in {
        check_input(g)?;
    }
    for p in [Some(&out), gram_out.as_ref(), report_out.as_ref()].into_iter().flatten() {
        check_output(p)?;
    }
    let fraction = check_fraction(cfg.fold_in_fraction.unwrap_or(DEFAULT_FOLD_IN_FRACTION))?;

    let ws = Workspace::load(&interactions, split_dir.as_deref(), fraction, seed)?;
    let t0 = Instant::now();
    let gram = match &gram_in {
        Some(p) => GramStats::load(p)?,
        None => build_train_gram(&ws, mode)?,
    };
    if gram.n_items() != ws.iset.n_items() {
        return Err(Error::DimensionMismatch(format!(
            "Gram statistics cover {} items, interactions {}",
            gram.n_items(),
            ws.iset.n_items()
        )));
    }
    log::info!("gram: {:.3}s", t0.elapsed().as_secs_f64());
    if let Some(p) = &gram_out {
        gram.save(p)?;
    }

    let lambda = match lambdas {
        Some(grid) => {
            let split = ws.split()?;
            if split.validation_users.is_empty() {
                return Err(usage("the λ search needs validation users in the split"));
            }
            let matrix = UserItemMatrix::from_interactions(&ws.iset, Some(&split.validation_users));
            let eval_cfg = EvalConfig {
                seed,
                fold_in_fraction: fraction,
                item_mask: Some(train_item_mask(&ws)),
                echo: ConfigEcho {
                    model: "dense".into(),
                    ..ConfigEcho::default()
                },
                ..EvalConfig::default()
            };
            let (best, reports) =
                grid_search_lambda(&gram, variant, &matrix, &split.validation_users, &grid, "ndcg@100", &eval_cfg)?;
            log::info!("best lambda {best}");
            if let Some(p) = &report_out {
                write_grid_report(p, best, &reports)?;
            }
            best
        }
        None => lambda.expect("checked above"),
    };

    let t1 = Instant::now();
    let model = solve(&gram, variant, lambda)?;
    log::info!("invert + correct: {:.3}s", t1.elapsed().as_secs_f64());
    model.validate()?;
    model.save(&out, ws.iset.items().keys())
}

#[derive(Serialize)]
struct GridReport<'a> {
    best_lambda: f64,
    results: Vec<GridEntry<'a>>,
}

#[derive(Serialize)]
struct GridEntry<'a> {
    lambda: f64,
    report: &'a EvalReport,
}

fn write_grid_report(path: &Path, best: f64, reports: &[(f64, EvalReport)]) -> Result<()> {
    let doc = GridReport {
        best_lambda: best,
        results: reports.iter().map(|(lambda, report)| GridEntry { lambda: *lambda, report }).collect(),
    };
    let mut json = serde_json::to_string_pretty(&doc).expect("grid report serializes");
    json.push('\n');
    write_atomic(path, |w| w.write_all(json.as_bytes()))
}

fn cmd_train_sparse(a: TrainSparseArgs, cfg: &RunConfig) -> Result<()> {
    let (interactions, split_dir) = Workspace::paths(&a.data, cfg);
    let interactions = require(interactions, "interactions")?;
    let out = require(a.out.or_else(|| cfg.out.clone()), "out")?;
    let lambda = check_lambda(require(a.lambda.or(cfg.lambda), "lambda")?)?;
    let theta = require(a.theta.or(cfg.theta), "theta")?;
    if theta.is_nan() || theta < 0.0 {
        return Err(usage(format!("theta must be >= 0, got {theta}")));
    }
    let n_max = a.n_max.or(cfg.n_max).unwrap_or(DEFAULT_N_MAX);
    if n_max == 0 {
        return Err(usage("n_max must be at least 1"));
    }
    let gram_in = a.gram.or_else(|| cfg.gram.clone());
    check_input(&interactions)?;
    if let Some(g) = &gram_in {
        check_input(g)?;
    }
    check_output(&out)?;
    if theta == 0.0 {
        log::warn!("theta = 0 keeps every item pair; the model is dense up to the n_max cap");
    }

    let ws = Workspace::load(&interactions, split_dir.as_deref(), DEFAULT_FOLD_IN_FRACTION, 0)?;
    let t0 = Instant::now();
    let gram = match &gram_in {
        Some(p) => GramStats::load(p)?,
        None => build_train_gram(&ws, GramMode::SelfGram)?,
    };
    log::info!("gram: {:.3}s", t0.elapsed().as_secs_f64());
    let t1 = Instant::now();
    let trained = train_sparse(&gram, theta, n_max, lambda)?;
    log::info!(
        "sparse training: {:.3}s, {} blocks (largest {}), density {:.6}",
        t1.elapsed().as_secs_f64(),
        trained.n_blocks,
        trained.largest_block,
        trained.model.pattern.density()
    );
    trained.model.save(&out, ws.iset.items().keys())
}

fn cmd_rescale(a: RescaleArgs, cfg: &RunConfig) -> Result<()> {
    let (interactions, split_dir) = Workspace::paths(&a.data, cfg);
    let model_path = require(a.model.or_else(|| cfg.model.clone()), "model")?;
    let out = require(a.out.or_else(|| cfg.out.clone()), "out")?;
    let weights_in = a.weights.or_else(|| cfg.weights.clone());
    let weights_out = a.weights_out.or_else(|| cfg.weights_out.clone());
    let alpha = a.alpha.or(cfg.alpha).map(check_alpha).transpose()?;
    let eps = check_epsilon(a.epsilon.or(cfg.epsilon).unwrap_or(DEFAULT_EPSILON))?;
    let n_intervals = a.time_intervals.or(cfg.time_intervals);
    let at = a.at.or(cfg.at);
    if weights_in.is_none() && alpha.is_none() {
        return Err(usage("rescale needs --alpha or --weights"));
    }
    if n_intervals.is_some() != at.is_some() {
        return Err(usage("time-dependent weights need both --time-intervals and --at"));
    }
    if n_intervals == Some(0) {
        return Err(usage("time_intervals must be at least 1"));
    }
    check_input(&model_path)?;
    for p in weights_in.iter().chain(interactions.iter()) {
        check_input(p)?;
    }
    check_output(&out)?;
    if let Some(p) = &weights_out {
        check_output(p)?;
    }

    let (model, keys) = DenseModel::load(&model_path)?;
    let items = KeyIndex::from_keys(keys.clone())?;
    let weights: ItemWeightVector = match (&weights_in, alpha) {
        (Some(p), _) => load_weights_csv(p, &items)?,
        (None, Some(alpha)) => {
            let interactions = require(interactions, "interactions")?;
            let ws = Workspace::load(&interactions, split_dir.as_deref(), DEFAULT_FOLD_IN_FRACTION, 0)?;
            if ws.iset.items().keys() != keys.as_slice() {
                return Err(Error::DimensionMismatch(
                    "model items differ from the interaction file".into(),
                ));
            }
            let train = ws.train_users();
            match (n_intervals, at) {
                (Some(n), Some(t)) => {
                    let idx = time_intervals(&ws.iset, n, &train)?;
                    let overall = popularity(&ws.train_matrix(), None);
                    let k = idx.interval_of(t);
                    log::info!("timestamp {t} falls into interval {k} of {n}");
                    time_popularity_weights(&idx.pops[k], &overall, alpha, eps)?
                }
                _ => popularity_weights(&popularity(&ws.train_matrix(), None), alpha, eps)?,
            }
        }
        (None, None) => unreachable!("checked above"),
    };
    let scaled = apply_item_rescaling(&model, &weights)?;
    if let Some(p) = &weights_out {
        save_weights_csv(p, &weights, &keys)?;
    }
    scaled.save(&out, &keys)
}

enum LoadedModel {
    Dense(DenseModel),
    Sparse(SparseModel),
}

impl LoadedModel {
    fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let bytes = read_file(path)?;
        if bytes.starts_with(b"EASP") {
            let (m, keys) = SparseModel::load(path)?;
            Ok((LoadedModel::Sparse(m), keys))
        } else {
            let (m, keys) = DenseModel::load(path)?;
            Ok((LoadedModel::Dense(m), keys))
        }
    }

    fn apply_weights(self, w: &ItemWeightVector) -> Result<Self> {
        match self {
            LoadedModel::Dense(m) => Ok(LoadedModel::Dense(apply_item_rescaling(&m, w)?)),
            LoadedModel::Sparse(mut m) => {
                m.scale_columns(&w.w)?;
                Ok(LoadedModel::Sparse(m))
            }
        }
    }

    fn scorer(&self) -> &dyn Scorer {
        match self {
            LoadedModel::Dense(m) => m,
            LoadedModel::Sparse(m) => m,
        }
    }

    fn echo(&self) -> ConfigEcho {
        match self {
            LoadedModel::Dense(m) => ConfigEcho {
                model: "dense".into(),
                variant: Some(m.variant.name().into()),
                lambda: Some(m.lambda),
                weights: m.applied_item_weights.as_ref().map(|w| w.kind.name().into()),
                alpha: m.applied_item_weights.as_ref().map(|w| w.alpha),
                ..ConfigEcho::default()
            },
            LoadedModel::Sparse(m) => ConfigEcho {
                model: "sparse".into(),
                lambda: Some(m.lambda),
                ..ConfigEcho::default()
            },
        }
    }
}

/// Items seen by at least one training user.
fn train_item_mask(ws: &Workspace) -> Vec<bool> {
    popularity(&ws.train_matrix(), None).0.iter().map(|&p| p > 0.0).collect()
}

fn cmd_evaluate(a: EvaluateArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let (interactions, split_dir) = Workspace::paths(&a.data, cfg);
    let interactions = require(interactions, "interactions")?;
    let split_dir = require(split_dir, "split_dir")?;
    let model_path = a.model.or_else(|| cfg.model.clone());
    let baseline = a.baseline.or_else(|| cfg.baseline.clone());
    match (&model_path, baseline.as_deref()) {
        (Some(_), Some(_)) => return Err(usage("give either --model or --baseline, not both")),
        (None, None) => return Err(usage("missing --model or --baseline")),
        (None, Some(b)) if b != "popularity" => return Err(usage(format!("unknown baseline '{b}'"))),
        _ => {}
    }
    let which = a.users.or_else(|| cfg.users.clone()).unwrap_or_else(|| "test".into());
    if which != "test" && which != "validation" {
        return Err(usage(format!("--users must be test or validation, got '{which}'")));
    }
    let weights_in = a.weights.or_else(|| cfg.weights.clone());
    let n_intervals = a.time_intervals.or(cfg.time_intervals);
    let alpha = a.alpha.or(cfg.alpha).map(check_alpha).transpose()?;
    let eps = check_epsilon(a.epsilon.or(cfg.epsilon).unwrap_or(DEFAULT_EPSILON))?;
    let fraction = check_fraction(a.fold_in_fraction.or(cfg.fold_in_fraction).unwrap_or(DEFAULT_FOLD_IN_FRACTION))?;
    let recall_ks = a.recall_k.or_else(|| cfg.recall_k.clone()).unwrap_or_else(|| vec![20, 50]);
    let ndcg_ks = a.ndcg_k.or_else(|| cfg.ndcg_k.clone()).unwrap_or_else(|| vec![100]);
    if recall_ks.iter().chain(&ndcg_ks).any(|&k| k == 0) {
        return Err(usage("cutoffs must be positive"));
    }
    if let Some(n) = n_intervals {
        if n == 0 {
            return Err(usage("time_intervals must be at least 1"));
        }
        if alpha.is_none() {
            return Err(usage("the time-aware protocol needs --alpha"));
        }
        if model_path.is_none() {
            return Err(usage("the time-aware protocol needs a dense --model"));
        }
    }
    let out = a.out.or_else(|| cfg.out.clone());
    let text_out = a.text_out.or_else(|| cfg.text_out.clone());
    check_input(&interactions)?;
    for p in model_path.iter().chain(weights_in.iter()) {
        check_input(p)?;
    }
    for p in out.iter().chain(text_out.iter()) {
        check_output(p)?;
    }

    let ws = Workspace::load(&interactions, Some(&split_dir), fraction, seed)?;
    let split = ws.split()?;
    let users = if which == "test" { &split.test_users } else { &split.validation_users };
    let matrix = UserItemMatrix::from_interactions(&ws.iset, Some(users));
    let mut eval_cfg = EvalConfig {
        recall_ks,
        ndcg_ks,
        fold_in_fraction: fraction,
        seed,
        item_mask: Some(train_item_mask(&ws)),
        echo: ConfigEcho::default(),
    };

    let report = match &model_path {
        None => {
            let scorer = PopularityScorer {
                pop: popularity(&ws.train_matrix(), None),
            };
            eval_cfg.echo.model = "popularity".into();
            evaluate_model(&scorer, &matrix, users, &eval_cfg)?
        }
        Some(path) => {
            let (mut model, keys) = LoadedModel::load(path)?;
            if ws.iset.items().keys() != keys.as_slice() {
                return Err(Error::DimensionMismatch(
                    "model items differ from the interaction file".into(),
                ));
            }
            if let Some(p) = &weights_in {
                let items = KeyIndex::from_keys(keys.clone())?;
                model = model.apply_weights(&load_weights_csv(p, &items)?)?;
            }
            eval_cfg.echo = model.echo();
            match (n_intervals, &model) {
                (Some(n), LoadedModel::Dense(dense)) => {
                    let alpha = alpha.expect("checked above");
                    eval_cfg.echo.time_intervals = Some(n);
                    eval_cfg.echo.alpha = Some(alpha);
                    eval_cfg.echo.weights = Some("time_adjusted".into());
                    let train = ws.train_users();
                    let idx = time_intervals(&ws.iset, n, &train)?;
                    let stamps = ws.iset.timestamps_for(users);
                    evaluate_time_aware(dense, &idx, alpha, Some(eps), &matrix, users, &stamps, &eval_cfg)?
                }
                (Some(_), LoadedModel::Sparse(_)) => {
                    return Err(usage("the time-aware protocol needs a dense model"));
                }
                (None, m) => evaluate_model(m.scorer(), &matrix, users, &eval_cfg)?,
            }
        }
    };

    let text = report.to_text();
    if let Some(p) = &out {
        let json = report.to_json();
        write_atomic(p, |w| w.write_all(json.as_bytes()))?;
    }
    match &text_out {
        Some(p) => write_atomic(p, |w| w.write_all(text.as_bytes()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_recommend(a: RecommendArgs, cfg: &RunConfig) -> Result<()> {
    let model_path = require(a.model.or_else(|| cfg.model.clone()), "model")?;
    let history = a.history.or_else(|| cfg.history.clone()).unwrap_or_default();
    let k = a.top_k.or(cfg.top_k).unwrap_or(10);
    let weights_in = a.weights.or_else(|| cfg.weights.clone());
    let (interactions, split_dir) = Workspace::paths(&a.data, cfg);
    let out = a.out.or_else(|| cfg.out.clone());
    check_input(&model_path)?;
    for p in weights_in.iter().chain(interactions.iter()) {
        check_input(p)?;
    }
    if let Some(p) = &out {
        check_output(p)?;
    }

    let (mut model, keys) = LoadedModel::load(&model_path)?;
    let items = KeyIndex::from_keys(keys.clone())?;
    if let Some(p) = &weights_in {
        model = model.apply_weights(&load_weights_csv(p, &items)?)?;
    }
    let mut ids = Vec::new();
    for key in history.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        match items.id(key) {
            Some(id) => ids.push(id),
            None => log::warn!("unknown item '{key}' dropped from the history"),
        }
    }
    let input = SparseRow::indicator(ids);
    let scores = if input.is_empty() {
        log::warn!("empty history; falling back to popularity order");
        let interactions = interactions.ok_or_else(|| {
            Error::InvalidInput("empty history and no --interactions for the popularity fallback".into())
        })?;
        let ws = Workspace::load(&interactions, split_dir.as_deref(), DEFAULT_FOLD_IN_FRACTION, 0)?;
        if ws.iset.items().keys() != keys.as_slice() {
            return Err(Error::DimensionMismatch(
                "model items differ from the interaction file".into(),
            ));
        }
        popularity(&ws.train_matrix(), None).0
    } else {
        model.scorer().scores(&input)?
    };
    let ranked = top_k(&scores, &input.items, None, k);
    let mut text = String::new();
    for (r, &i) in ranked.iter().enumerate() {
        text.push_str(&format!("{}\t{}\t{}\n", r + 1, items.key(i), scores[i]));
    }
    match &out {
        Some(p) => write_atomic(p, |w| w.write_all(text.as_bytes())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_popularity(a: PopularityArgs, cfg: &RunConfig) -> Result<()> {
    let (interactions, split_dir) = Workspace::paths(&a.data, cfg);
    let interactions = require(interactions, "interactions")?;
    let out = a.out.or_else(|| cfg.out.clone());
    let k = a.top_k.or(cfg.top_k);
    check_input(&interactions)?;
    if let Some(p) = &out {
        check_output(p)?;
    }
    let ws = Workspace::load(&interactions, split_dir.as_deref(), DEFAULT_FOLD_IN_FRACTION, 0)?;
    let pop = popularity(&ws.train_matrix(), None);
    let ranked = popularity_rank(&pop);
    let mut text = String::from("item\tpopularity\n");
    for &i in ranked.iter().take(k.unwrap_or(usize::MAX)) {
        text.push_str(&format!("{}\t{}\n", ws.iset.items().key(i), pop.0[i]));
    }
    match &out {
        Some(p) => write_atomic(p, |w| w.write_all(text.as_bytes())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
