use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn cellpipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellpipe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run cellpipe")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Sorted relative paths and contents of every file under `root`.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

fn fixture(dir: &TempDir, per_class: &str) -> PathBuf {
    let root = dir.path().join("fx");
    let o = cellpipe(&["fixture", "--out", p(&root), "--per-class", per_class, "--seed", "7", "--size", "64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    root
}

#[test]
fn fixture_writes_images_and_masks_deterministically() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = cellpipe(&["--json", "fixture", "--out", p(out), "--per-class", "10", "--seed", "7"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let v: Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(v["images"], 50);
        assert_eq!(v["masks"], 100);
    }
    let ta = tree(&a);
    assert_eq!(ta.len(), 150);
    assert_eq!(ta, tree(&b));
}

#[test]
fn fixture_into_unwritable_path_fails() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = cellpipe(&["fixture", "--out", p(&blocker.join("sub")), "--per-class", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn segment_reports_dice_and_subset() {
    let dir = TempDir::new().unwrap();
    let root = fixture(&dir, "4");
    let o = cellpipe(&["--json", "segment", "--input", p(&root), "--method", "otsu", "--target", "cell"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["images"], 20);
    for c in v["per_class"].as_array().unwrap() {
        assert!(c["min_dice"].as_f64().unwrap() >= 0.9, "{c}");
        assert!(c["nucleus_in_cell"].is_null());
    }
    let out = dir.path().join("fx-otsu-cell");
    assert_eq!(tree(&out).len(), 20);

    let o = cellpipe(&["--json", "segment", "--input", p(&root), "--method", "hue", "--target", "nucleus"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    for c in v["per_class"].as_array().unwrap() {
        assert_eq!(c["nucleus_in_cell"], c["images"]);
    }

    let human = cellpipe(&["segment", "--input", p(&root), "--method", "hue", "--target", "nucleus", "--out", p(&dir.path().join("h"))]);
    let text = String::from_utf8(human.stdout).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.contains("nucleus_in_cell=4/4"));
}

#[test]
fn segment_output_independent_of_jobs() {
    let dir = TempDir::new().unwrap();
    let root = fixture(&dir, "3");
    let one = dir.path().join("one");
    let many = dir.path().join("many");
    for (jobs, out) in [("1", &one), ("4", &many)] {
        let o = cellpipe(&[
            "--jobs", jobs, "segment", "--input", p(&root), "--method", "otsu", "--target", "nucleus", "--out", p(out),
            "--write-masks", "--resize", "32x32",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let t = tree(&one);
    assert_eq!(t.len(), 30);
    assert_eq!(t, tree(&many));
}

#[test]
fn bad_flags_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let root = fixture(&dir, "3");
    let o = cellpipe(&["segment", "--input", p(&root), "--method", "watershed", "--target", "cell"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cellpipe(&["segment", "--input", p(&root), "--method", "hue", "--target", "cell", "--cell-band", "10,400,0.1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cellpipe(&["split", "--input", p(&root), "--out", p(&dir.path().join("m.csv")), "--fractions", "0.5,0.3,0.3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cellpipe(&["segment", "--input", p(&dir.path().join("missing")), "--method", "hue", "--target", "cell"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn split_is_byte_identical_on_rerun() {
    let dir = TempDir::new().unwrap();
    let root = fixture(&dir, "20");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for m in [&a, &b] {
        let o = cellpipe(&["--json", "split", "--input", p(&root), "--out", p(m), "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!((v["train"].as_u64(), v["val"].as_u64(), v["test"].as_u64()), (Some(70), Some(15), Some(15)));
    }
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    assert!(text.starts_with(b"path,label,split\n"));
}

#[test]
fn train_eval_missing_tree_names_path() {
    let dir = TempDir::new().unwrap();
    let root = fixture(&dir, "4");
    let manifest = dir.path().join("m.csv");
    assert!(cellpipe(&["split", "--input", p(&root), "--out", p(&manifest)]).status.success());
    let missing = dir.path().join("nowhere");
    let o = cellpipe(&[
        "train-eval", "--manifest", p(&manifest), "--data", p(&missing), "--out", p(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn full_pipeline_writes_table_and_artifacts() {
    let dir = TempDir::new().unwrap();
    let root = fixture(&dir, "6");
    for method in ["hue", "otsu"] {
        for target in ["cell", "nucleus"] {
            let o = cellpipe(&["segment", "--input", p(&root), "--method", method, "--target", target]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
    }
    let manifest = dir.path().join("m.csv");
    assert!(cellpipe(&["split", "--input", p(&root), "--out", p(&manifest)]).status.success());
    let results = dir.path().join("results");
    let config = dir.path().join("cfg.json");
    fs::write(&config, r#"{"train": {"epochs": 9, "batch_size": 8}, "input_size": 16}"#).unwrap();
    let o = cellpipe(&[
        "--config", p(&config), "train-eval", "--manifest", p(&manifest), "--variants-of", p(&root), "--out", p(&results),
        "--epochs", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(results.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "variant,val_accuracy,test_accuracy");
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["cell-hue", "cell-otsu", "nucleus-hue", "nucleus-otsu"]);
    // The flag wins over the config file's epoch count.
    let curve = fs::read_to_string(results.join("cell-hue/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert!(curve.starts_with("epoch,train_loss,val_loss,val_accuracy\n"));
    let model = fs::read(results.join("cell-hue/model.bin")).unwrap();
    assert_eq!(model.len(), 16 + 8 * 5 * (16 * 16 * 3 + 1));

    let out = dir.path().join("rep.json");
    let o = cellpipe(&["report", "--confusion", p(&results.join("nucleus-otsu/confusion_test.csv")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let b: Value = serde_json::from_slice(&fs::read(results.join("nucleus-otsu/report_test.json")).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn attn_bench_ratios_skips_and_determinism() {
    let o = cellpipe(&["attn-bench", "--no-timing"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout.clone()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,h,d,l,axis,macs_full,macs_area,wall_ns_full,wall_ns_area"));
    let rows: Vec<Vec<u64>> = lines
        .map(|l| l.split(',').filter_map(|f| f.parse().ok()).collect())
        .collect();
    assert_eq!(rows.len(), 12);
    for r in &rows {
        let (n, h, d, l, full, area) = (r[0], r[1], r[2], r[3], r[4], r[5]);
        assert_eq!(full, 2 * n * n * h * d);
        assert_eq!(full, area * l);
        assert_eq!((r[6], r[7]), (0, 0));
    }
    let again = cellpipe(&["--jobs", "1", "attn-bench", "--no-timing"]);
    assert_eq!(o.stdout, again.stdout);

    let o = cellpipe(&["attn-bench", "--no-timing", "--tokens", "36", "--segments", "1,4"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 2);
    assert!(stderr(&o).contains("skipping"));
}
