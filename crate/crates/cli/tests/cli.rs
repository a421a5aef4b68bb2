use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stos(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stos"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("STOS_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn topology_writes_one_matrix_per_layer_count() {
    let dir = tempfile::tempdir().unwrap();
    let o = stos(dir.path(), &["topology", "--T", "16", "--P", "4", "--kind", "standard", "--layers", "1..8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for l in 1..=8 {
        let rows = read_csv(&dir.path().join(format!("standard_l{l}.csv")));
        assert_eq!(rows.len(), 17);
        assert_eq!(rows[0][0], "row");
    }
    assert!(dir.path().join("standard_column0.csv").exists());
    assert!(dir.path().join("topology.meta.json").exists());
}

#[test]
fn normalized_column_flattens_and_dilated_resets() {
    let dir = tempfile::tempdir().unwrap();
    let o = stos(dir.path(), &["topology", "--kind", "normalized", "--layers", "500"]);
    assert_eq!(code(&o), 0);
    let rows = read_csv(&dir.path().join("normalized_column0.csv"));
    assert_eq!(rows[0], ["layers", "step", "influence"]);
    for row in &rows[1..] {
        let v: f64 = row[2].parse().unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{row:?}");
    }

    let o = stos(dir.path(), &["topology", "--kind", "dilated", "--P", "2", "--reset", "4", "--layers", "4,5"]);
    assert_eq!(code(&o), 0);
    let rows = read_csv(&dir.path().join("dilated_column0.csv"));
    let column = |l: &str| -> Vec<f64> {
        rows[1..].iter().filter(|r| r[0] == l).map(|r| r[2].parse().unwrap()).collect()
    };
    assert!(column("4").iter().all(|&v| v == 1.0));
    let after = column("5");
    assert_eq!(after[0], 1.0);
    assert!(after[1..].iter().all(|&v| v == 2.0));
}

#[test]
fn invalid_sizes_are_configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&stos(dir.path(), &["topology", "--T", "0"])), 2);
    assert_eq!(code(&stos(dir.path(), &["topology", "--T", "4", "--P", "5"])), 2);
    assert_eq!(code(&stos(dir.path(), &["topology", "--layers", "0"])), 2);
    assert_eq!(code(&stos(dir.path(), &["experiment", "fig9"])), 2);
    assert_eq!(code(&stos(dir.path(), &["bounds", "--graph", "ring:x"])), 2);
}

#[test]
fn bounds_report_holds_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["bounds", "--graph", "ring:4", "--T", "4", "--hidden-dim", "3", "--inputs", "2"];
    assert_eq!(code(&stos(a.path(), &args)), 0);
    assert_eq!(code(&stos(b.path(), &args)), 0);
    let csv = fs::read(a.path().join("bounds.csv")).unwrap();
    assert_eq!(csv, fs::read(b.path().join("bounds.csv")).unwrap());
    let rows = read_csv(&a.path().join("bounds.csv"));
    assert_eq!(rows[0], ["u", "v", "i", "j", "empirical", "bound", "slack"]);
    assert_eq!(rows.len(), 1 + 4 * 4 * 4 * 4);
    for row in &rows[1..] {
        let slack: f64 = row[6].parse().unwrap();
        assert!(slack >= -1e-9);
    }
    let json: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("bounds.json")).unwrap()).unwrap();
    assert_eq!(json["fingerprint"].as_str().unwrap().len(), 64);
}

#[test]
fn factorization_check_passes_for_single_block() {
    let dir = tempfile::tempdir().unwrap();
    let o = stos(
        dir.path(),
        &["bounds", "--graph", "ring:3", "--T", "4", "--hidden-dim", "2", "--inputs", "1", "--check-factorization"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("factorization.json")).unwrap()).unwrap();
    assert!(json["max_deviation"].as_f64().unwrap() < 1e-10);

    let o = stos(dir.path(), &["bounds", "--graph", "ring:3", "--T", "4", "--L", "2", "--check-factorization"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let o = stos(dir.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = stos(dir.path(), &["gradcheck", "--activation", "identity"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-6);
    let o = stos(dir.path(), &["gradcheck", "--corrupt"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn config_file_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    };
    for (name, text) in [
        ("typo.json", r#"{"modle": {}}"#),
        ("nested.json", r#"{"model": {"hiden_dim": 3}}"#),
        ("precision.json", r#"{"precision": "f32"}"#),
        ("syntax.json", "{"),
    ] {
        let p = write(name, text);
        let o = stos(dir.path(), &["--config", p.to_str().unwrap(), "gradcheck"]);
        assert_eq!(code(&o), 2, "{name}");
    }
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&stos(dir.path(), &["--config", missing.to_str().unwrap(), "gradcheck"])), 4);
}

#[test]
fn output_directory_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_stos"))
        .args(["topology", "--layers", "1"])
        .env("STOS_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("standard_l1.csv").exists());
}

#[test]
fn train_checkpoint_feeds_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    fs::write(
        &config,
        r#"{"task": {"kind": "copy_last", "sizes": {"train": 64, "val": 16, "test": 16}},
            "schedule": {"epochs": 2, "batch_size": 16},
            "model": {"hidden_dim": 4, "window": 8},
            "seed": 3}"#,
    )
    .unwrap();
    let out = dir.path().join("train");
    let o = stos(&out, &["--config", config.to_str().unwrap(), "train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let history = read_csv(&out.join("history.csv"));
    assert_eq!(history[0], ["epoch", "train_loss", "val_loss", "lr"]);
    assert_eq!(history.len(), 3);
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["test_mse"].as_f64().unwrap().is_finite());

    let ckpt = out.join("checkpoint.json");
    let o = stos(&dir.path().join("b"), &["bounds", "--checkpoint", ckpt.to_str().unwrap(), "--inputs", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("b/bounds.json")).unwrap()).unwrap();
    assert_eq!(report["fingerprint"], metrics["fingerprint"]);
}

#[test]
fn experiment_resumes_from_markers() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("grid.json");
    fs::write(
        &config,
        r#"{"grid": {"sizes": {"train": 32, "val": 8, "test": 8}, "hidden_dim": 4,
                     "tasks": ["copy_last"], "topologies": ["standard", "normalized"]}}"#,
    )
    .unwrap();
    let out = dir.path().join("fig3");
    let args = ["--config", config.to_str().unwrap(), "experiment", "fig3", "--seeds", "1", "--epochs", "1", "--depths", "1..2"];
    assert_eq!(code(&stos(&out, &args)), 0);
    let rows = read_csv(&out.join("fig3.csv"));
    assert_eq!(rows[0][..10], ["task", "graph", "topology", "P", "L", "L_T", "L_S", "k", "i", "seed"]);
    assert_eq!(rows.len(), 1 + 2 * 2);
    let markers: Vec<_> = fs::read_dir(out.join("cells")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(markers.len(), 4);

    // Tamper with one marker: a rerun must reuse it rather than retrain.
    let mut cell: serde_json::Value = serde_json::from_slice(&fs::read(&markers[0]).unwrap()).unwrap();
    cell["epochs_run"] = serde_json::json!(999);
    fs::write(&markers[0], serde_json::to_vec(&cell).unwrap()).unwrap();
    let csv_before = fs::read_to_string(out.join("fig3.csv")).unwrap();
    assert_eq!(code(&stos(&out, &args)), 0);
    let csv_after = fs::read_to_string(out.join("fig3.csv")).unwrap();
    assert!(csv_after.contains(",999,"));
    assert_eq!(csv_before.lines().count(), csv_after.lines().count());
    let aggregate: serde_json::Value = serde_json::from_slice(&fs::read(out.join("fig3.json")).unwrap()).unwrap();
    assert_eq!(aggregate["experiment"], "fig3");
}
