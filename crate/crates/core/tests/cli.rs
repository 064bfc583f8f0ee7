mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::write_ratings_csv;
use ease_core::solver::DenseModel;

fn ease(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ease"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run ease")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ease(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_ratings_csv(&d.join("raw.csv"), 300, 5);
    ok(d, &[
        "ingest", "--data", "raw.csv", "--user-col", "userId", "--item-col", "movieId", "--value-col", "rating",
        "--time-col", "timestamp", "--min-value", "3.5", "--binarize", "--min-user-events", "3", "--out", "i.tsv",
    ]);
    ok(d, &["split", "--interactions", "i.tsv", "--n-val", "30", "--n-test", "60", "--seed", "3", "--out", "split"]);
    dir
}

#[test]
fn train_recommend_and_evaluate() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["train", "--interactions", "i.tsv", "--split-dir", "split", "--lambda", "20", "--out", "m.ease"]);
    let (model, keys) = DenseModel::load(&d.join("m.ease")).unwrap();

    // a single-item history returns that item's row of B
    let out = ok(d, &["recommend", "--model", "m.ease", "--history", &keys[0], "--top-k", "5"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 5);
    let mut row: Vec<(usize, f64)> = (1..keys.len()).map(|j| (j, model.b.get(0, j))).collect();
    row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (line, (j, v)) in lines.iter().zip(&row) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f[1], keys[*j]);
        assert_eq!(f[2].parse::<f64>().unwrap(), *v);
    }
    assert_eq!(ok(d, &["recommend", "--model", "m.ease", "--history", &keys[0], "--top-k", "0"]), "");

    // uniform weights leave recommendations unchanged
    let mut w = String::from("item,weight\n");
    for k in &keys {
        w.push_str(&format!("{k},1\n"));
    }
    std::fs::write(d.join("ones.csv"), w).unwrap();
    let with = ok(d, &["recommend", "--model", "m.ease", "--history", &keys[1], "--weights", "ones.csv"]);
    let without = ok(d, &["recommend", "--model", "m.ease", "--history", &keys[1]]);
    assert_eq!(with, without);

    let report = ok(d, &["evaluate", "--interactions", "i.tsv", "--split-dir", "split", "--model", "m.ease", "--seed", "3"]);
    assert!(report.contains("recall@20"));
    let base = ok(d, &["evaluate", "--interactions", "i.tsv", "--split-dir", "split", "--baseline", "popularity", "--seed", "3"]);
    assert!(base.contains("ndcg@100"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = prepared();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"interactions": "i.tsv", "split_dir": "split", "lambda": 5.0, "variant": "ease", "out": "a.ease"}"#,
    )
    .unwrap();
    ok(d, &["--config", "cfg.json", "train"]);
    ok(d, &["--config", "cfg.json", "train", "--lambda", "50", "--out", "b.ease"]);
    let (a, _) = DenseModel::load(&d.join("a.ease")).unwrap();
    let (b, _) = DenseModel::load(&d.join("b.ease")).unwrap();
    assert_eq!(a.lambda, 5.0);
    assert_eq!(b.lambda, 50.0);

    std::fs::write(d.join("bad.json"), r#"{"lamda": 5.0}"#).unwrap();
    assert_eq!(ease(d, &["--config", "bad.json", "train"]).status.code(), Some(1));
}

#[test]
fn failures_use_exit_codes_and_leave_no_outputs() {
    let dir = prepared();
    let d = dir.path();
    assert_eq!(ease(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(ease(d, &["train", "--interactions", "i.tsv", "--out", "x.ease"]).status.code(), Some(1));
    assert_eq!(
        ease(d, &["train", "--interactions", "i.tsv", "--lambda=-3", "--out", "x.ease"]).status.code(),
        Some(1)
    );
    assert_eq!(
        ease(d, &["train", "--interactions", "missing.tsv", "--lambda", "3", "--out", "x.ease"]).status.code(),
        Some(2)
    );
    let refused = ease(d, &[
        "train", "--interactions", "i.tsv", "--split-dir", "split", "--variant", "ease", "--gram-mode", "disjoint",
        "--lambda", "3", "--out", "x.ease",
    ]);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("C = G"));
    std::fs::write(d.join("broken.csv"), "userId,movieId,rating\n1,2,oops\n").unwrap();
    let bad = ease(d, &["ingest", "--data", "broken.csv", "--user-col", "userId", "--item-col", "movieId", "--value-col", "rating", "--out", "x.tsv"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains(":2:"));
    let leftovers: Vec<_> = std::fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("x.") || n.starts_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn rr_on_disjoint_statistics_and_rescaling() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &[
        "train", "--interactions", "i.tsv", "--split-dir", "split", "--variant", "rr", "--gram-mode", "disjoint",
        "--lambda", "10", "--out", "rr.ease",
    ]);
    let (rr, _) = DenseModel::load(&d.join("rr.ease")).unwrap();
    assert_eq!(rr.variant.name(), "rr");
    ok(d, &["train", "--interactions", "i.tsv", "--split-dir", "split", "--lambda", "10", "--out", "m.ease"]);
    ok(d, &[
        "rescale", "--interactions", "i.tsv", "--split-dir", "split", "--model", "m.ease", "--alpha", "0.5",
        "--weights-out", "w.csv", "--out", "m2.ease",
    ]);
    let (m, keys) = DenseModel::load(&d.join("m.ease")).unwrap();
    let (m2, _) = DenseModel::load(&d.join("m2.ease")).unwrap();
    let w = &m2.applied_item_weights.as_ref().unwrap().w;
    for i in 0..keys.len() {
        for (j, wj) in w.iter().enumerate() {
            assert_eq!(m2.b.get(i, j), m.b.get(i, j) * wj);
        }
    }
    // the written weights re-apply to the same model
    ok(d, &["rescale", "--model", "m.ease", "--weights", "w.csv", "--out", "m3.ease"]);
    assert_eq!(std::fs::read(d.join("m3.ease")).unwrap(), std::fs::read(d.join("m2.ease")).unwrap());
    assert_eq!(ease(d, &["rescale", "--model", "rr.ease", "--weights", "w.csv", "--out", "x.ease"]).status.code(), Some(2));

    let t = ok(d, &[
        "evaluate", "--interactions", "i.tsv", "--split-dir", "split", "--model", "m.ease", "--time-intervals", "4",
        "--alpha", "0.5",
    ]);
    assert!(t.contains("note: time-aware protocol"));
}

#[test]
fn sparse_training_and_popularity_listing() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["train-sparse", "--interactions", "i.tsv", "--split-dir", "split", "--theta", "0.1", "--n-max", "15", "--lambda", "10", "--out", "s.easp"]);
    let r = ok(d, &["evaluate", "--interactions", "i.tsv", "--split-dir", "split", "--model", "s.easp"]);
    assert!(r.contains("ndcg@100"));
    let rec = ok(d, &["recommend", "--model", "s.easp", "--history", "m1,m2", "--top-k", "3"]);
    assert_eq!(rec.lines().count(), 3);
    let pop = ok(d, &["popularity", "--interactions", "i.tsv", "--split-dir", "split", "--top-k", "4"]);
    let counts: Vec<f64> = pop.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(counts.len(), 4);
    assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    let fallback = ease(d, &["recommend", "--model", "s.easp", "--history", "nope", "--interactions", "i.tsv", "--split-dir", "split", "--top-k", "4"]);
    assert!(fallback.status.success());
    assert!(String::from_utf8_lossy(&fallback.stderr).contains("popularity"));
}
