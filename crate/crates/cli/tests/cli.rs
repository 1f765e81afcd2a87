use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, SymmetricEigen};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gradcamo"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn gradcamo")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// sha256 of every file under `dir`, keyed by relative path. Run configs
/// record absolute paths and are left out.
fn tree_hashes(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.to_string_lossy().ends_with("_config.json") {
                let h = Sha256::digest(fs::read(&path).unwrap());
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), format!("{h:x}"));
            }
        }
    }
    out
}

const SMALL: &[&str] = &["--sites", "2", "--cells-per-site", "8", "--volume", "128,128,16"];

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("ds");
    let mut args = vec!["synth", "--out", p(&out)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn crop(dir: &Path, ds: &Path) -> PathBuf {
    let out = dir.join("crops");
    ok(&["crop", "--stacks", p(&ds.join("stacks")), "--masks", p(&ds.join("masks")), "--out", p(&out)]);
    out.join("manifest.json")
}

/// synth → crop → 2-epoch train in a fresh directory.
fn pipeline(dir: &Path) -> (PathBuf, PathBuf) {
    let ds = synth(dir, &["--seed", "5"]);
    let manifest = crop(dir, &ds);
    let model = dir.join("model");
    ok(&["train", "--manifest", p(&manifest), "--out", p(&model), "--epochs", "2", "--seed", "5"]);
    (manifest, model)
}

#[test]
fn default_layout_emits_48_stacks() {
    let t = TempDir::new().unwrap();
    let out = t.path().join("ds");
    let stdout = ok(&["synth", "--out", p(&out), "--volume", "64,64,8", "--cells-per-site", "3", "--cell-radius", "8", "--gamma", "0.7"]);
    assert_eq!(fs::read_dir(out.join("stacks")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "tbf").count(), 48);
    assert!(stdout.contains("| total |"));
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("synth_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["args"]["gamma"], 0.7);
    assert_eq!(cfg["command"], "synth");
}

#[test]
fn synth_is_byte_identical_and_refuses_to_overwrite() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let da = synth(a.path(), &["--seed", "9", "--gamma", "1"]);
    let db = synth(b.path(), &["--seed", "9", "--gamma", "1"]);
    assert_eq!(tree_hashes(&da), tree_hashes(&db));

    let mut args = vec!["synth", "--out", p(&da)];
    args.extend_from_slice(SMALL);
    let again = run(&args);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    args.push("--force");
    ok(&args);
}

#[test]
fn crop_reports_missing_mask_by_name() {
    let t = TempDir::new().unwrap();
    let ds = synth(t.path(), &[]);
    fs::remove_file(ds.join("masks/B01_s2.tbf")).unwrap();
    let out = run(&["crop", "--stacks", p(&ds.join("stacks")), "--masks", p(&ds.join("masks")), "--out", p(&t.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("B01_s2.tbf"));
}

#[test]
fn crops_are_bounded_and_nonempty() {
    let t = TempDir::new().unwrap();
    let ds = synth(t.path(), &[]);
    let manifest = crop(t.path(), &ds);
    let records: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(ds.join("summary.json")).unwrap()).unwrap();
    let placed: u64 = summary["sites"].as_array().unwrap().iter().map(|s| s["placed"].as_u64().unwrap()).sum();
    let cells: u64 = summary["sites"].as_array().unwrap().iter().map(|s| s["cells"].as_u64().unwrap()).sum();
    assert_eq!(records.len() as u64, cells);
    assert!(cells <= placed);
    for r in &records {
        let blob = gradcamo::tbf::Blob::read(&manifest.parent().unwrap().join(r["mask"].as_str().unwrap())).unwrap();
        match blob {
            gradcamo::tbf::Blob::U8(_, d) => assert!(d.iter().any(|&v| v == 1)),
            _ => panic!("mask must be u8"),
        }
    }
}

#[test]
fn train_requires_validation_split() {
    let t = TempDir::new().unwrap();
    let ds = synth(t.path(), &[]);
    let manifest = crop(t.path(), &ds);
    let text = fs::read_to_string(&manifest).unwrap();
    let mut records: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    records.retain(|r| r["split"] != "val");
    fs::write(&manifest, serde_json::to_string(&records).unwrap()).unwrap();
    let out = run(&["train", "--manifest", p(&manifest), "--out", p(&t.path().join("m")), "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("val"));
}

#[test]
fn full_pipeline_outputs_and_determinism() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let (manifest, model) = pipeline(a.path());
    let (manifest_b, model_b) = pipeline(b.path());

    let history = fs::read_to_string(model.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "{history}");
    assert_eq!(tree_hashes(&model), tree_hashes(&model_b));

    let score = |dir: &Path, manifest: &Path, model: &Path| {
        let out = dir.join("scores/scores.csv");
        ok(&["score", "--model", p(model), "--manifest", p(manifest), "--out", p(&out), "--maps", p(&dir.join("maps"))]);
        out
    };
    let sa = score(a.path(), &manifest, &model);
    let sb = score(b.path(), &manifest_b, &model_b);
    assert_eq!(tree_hashes(sa.parent().unwrap()), tree_hashes(sb.parent().unwrap()));
    let csv = fs::read_to_string(&sa).unwrap();
    assert!(csv.starts_with("cell_id,label,pred,prob,gradcamo,degenerate,keep\n"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(sa.with_file_name("scores_summary.json")).unwrap()).unwrap();
    for g in summary["by_dose_site"].as_object().unwrap().values() {
        let f = g["frac_kept"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f));
    }
    assert!(fs::read_dir(a.path().join("maps")).unwrap().any(|e| e.unwrap().path().extension().unwrap() == "png"));

    let bad = run(&["score", "--model", p(&model), "--manifest", p(&manifest), "--split", "holdout", "--out", p(&a.path().join("x.csv"))]);
    assert_eq!(bad.status.code(), Some(1));

    // features: raw and whitened
    let raw = a.path().join("raw.csv");
    ok(&["features", "--model", p(&model), "--manifest", p(&manifest), "--out", p(&raw)]);
    let header = fs::read_to_string(&raw).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header.split(',').count(), 4 + 64);
    let fm = gradcamo::report::read_features(&raw).unwrap();
    let (model_f, meta) = gradcamo::model::load_checkpoint(&model).unwrap();
    let m = gradcamo::manifest::Manifest::load(&manifest).unwrap();
    let crops = m.load_crops(&manifest, gradcamo::manifest::Split::Test).unwrap();
    let crops = gradcamo::train::preprocess_all(&crops, model_f.arch.input, &meta.stats).unwrap();
    let direct = gradcamo::features::extract_features(&model_f, &crops).unwrap();
    assert_eq!(fm, direct, "--whiten omitted must give raw features");

    let absent = run(&["features", "--model", p(&model), "--manifest", p(&manifest), "--whiten", "9", "--out", p(&a.path().join("w.csv"))]);
    assert_eq!(absent.status.code(), Some(1));

    // report
    let rep = a.path().join("report");
    let stdout = ok(&["report", "--scores", p(&sa), "--features", p(&raw), "--out", p(&rep)]);
    assert!(stdout.contains("ŝ ="));
    let groups = summary["by_dose_site"].as_object().unwrap().len();
    assert_eq!(fs::read_dir(rep.join("hist")).unwrap().count(), groups);
    let rep2 = a.path().join("report2");
    ok(&["report", "--scores", p(&sa), "--features", p(&raw), "--out", p(&rep2)]);
    let strip = |mut h: BTreeMap<PathBuf, String>| {
        h.remove(Path::new("report_config.json"));
        h
    };
    assert_eq!(strip(tree_hashes(&rep)), strip(tree_hashes(&rep2)));
}

#[test]
fn malformed_scores_name_the_line() {
    let t = TempDir::new().unwrap();
    let scores = t.path().join("s.csv");
    let features = t.path().join("f.csv");
    fs::write(&scores, "cell_id,label,pred,prob,gradcamo,degenerate,keep\na,0,0,0.9,0.5,false,true\nb,0,0,0.9,oops,false,true\n").unwrap();
    fs::write(&features, "cell_id,label,well,site,f0\na,0,A01,1,0.5\nb,0,A01,1,0.7\n").unwrap();
    let out = run(&["report", "--scores", p(&scores), "--features", p(&features), "--out", p(&t.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
}

fn covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    (x.transpose() * &x) / n as f64
}

#[test]
fn whitened_controls_have_unit_spectrum() {
    let t = TempDir::new().unwrap();
    let ds = t.path().join("ds");
    ok(&[
        "synth", "--out", p(&ds), "--doses", "2", "--sites", "8", "--cells-per-site", "18", "--volume", "160,160,16", "--cell-radius", "10", "--seed", "2",
    ]);
    let manifest = crop(t.path(), &ds);
    let model = t.path().join("model");
    ok(&["train", "--manifest", p(&manifest), "--out", p(&model), "--epochs", "1"]);
    let raw = t.path().join("raw.csv");
    let white = t.path().join("white.csv");
    let pca = t.path().join("pca.csv");
    ok(&["features", "--model", p(&model), "--manifest", p(&manifest), "--split", "train", "--out", p(&raw)]);
    ok(&[
        "features", "--model", p(&model), "--manifest", p(&manifest), "--split", "train", "--whiten", "0", "--out", p(&white), "--pca2", p(&pca),
    ]);
    let read = |path: &Path| gradcamo::report::read_features(path).unwrap();
    let controls = |fm: &gradcamo::features::FeatureMatrix| -> Vec<Vec<f64>> {
        (0..fm.rows()).filter(|&i| fm.labels[i] == 0).map(|i| fm.row(i).to_vec()).collect()
    };
    let raw_c = controls(&read(&raw));
    let white_c = controls(&read(&white));
    assert!(raw_c.len() > 64, "only {} control cells", raw_c.len());

    // recompute from the CSVs: every direction the transform did not floor
    // must come out with unit variance, floored ones with less
    let raw_eig = SymmetricEigen::new(covariance(&raw_c)).eigenvalues;
    let lmax = raw_eig.iter().copied().fold(0.0, f64::max);
    let floor = 1e-6 * lmax;
    let kept = raw_eig.iter().filter(|&&l| l > floor * 1.01).count();
    let white_eig = SymmetricEigen::new(covariance(&white_c)).eigenvalues;
    let unit = white_eig.iter().filter(|&&l| (l - 1.0).abs() < 1e-6).count();
    assert!(white_eig.iter().all(|&l| l < 1.0 + 1e-6), "{white_eig}");
    assert_eq!(unit, kept);
    assert!(white_eig.iter().all(|l| l.is_finite()));

    let pca_text = fs::read_to_string(&pca).unwrap();
    assert!(pca_text.starts_with("cell_id,label,pc1,pc2\n"));
    assert_eq!(pca_text.lines().count(), read(&white).rows() + 1);
}
