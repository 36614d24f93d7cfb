use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use camtrap_core::project::{load_project, ORACLE_FILE};

mod common;

fn camtrap(project: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camtrap"))
        .env("CAMTRAP_PROJECT", project)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let run = camtrap(
            dir.path(),
            &["simulate", "--strategy", "entropy", "--seed", "42", "--out", out.to_str().unwrap()],
        );
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    }
    let first = fs::read(&a).unwrap();
    assert_eq!(first, fs::read(&b).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("labels_used,accuracy,macro_precision,macro_recall,macro_f1\n"));
    assert!(text.lines().count() > 10);

    let stdout = camtrap(dir.path(), &["simulate", "--seed", "42", "--budget", "80"]);
    assert_eq!(code(&stdout), 0);
    let rows: Vec<&str> = std::str::from_utf8(&stdout.stdout).unwrap().lines().skip(1).collect();
    let used: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(used, ["29", "54", "79", "80"]);
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&camtrap(dir.path(), &["--help"])), 0);
    assert_eq!(code(&camtrap(dir.path(), &["--version"])), 0);
    assert_eq!(code(&camtrap(dir.path(), &[])), 1);
    assert_eq!(code(&camtrap(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&camtrap(dir.path(), &["simulate", "--budget", "lots"])), 1);
    assert_eq!(code(&camtrap(dir.path(), &["simulate", "--strategy", "vibes"])), 1);
    assert_eq!(code(&camtrap(dir.path(), &["embed", "--provider", "precomputed"])), 1);

    let missing = camtrap(dir.path(), &["batch"]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("not a project"));
    assert_eq!(code(&camtrap(dir.path(), &["train"])), 2);
    assert_eq!(code(&camtrap(dir.path(), &["import-labels", "nope.csv"])), 2);
    assert_eq!(code(&camtrap(dir.path(), &["embed", "--provider", "synthetic"])), 2);
}

#[test]
fn synthetic_project_round_trip_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let init = camtrap(p, &["init-project", "--synthetic", "--budget", "80", "--seed", "3"]);
    assert_eq!(code(&init), 0, "{}", String::from_utf8_lossy(&init.stderr));
    let view = stdout_json(&init);
    assert_eq!(view["pending"].as_array().unwrap().len(), 30);
    let oracle_before = fs::read(p.join(ORACLE_FILE)).unwrap();
    assert_eq!(code(&camtrap(p, &["init-project", "--synthetic"])), 2);
    assert_eq!(fs::read(p.join(ORACLE_FILE)).unwrap(), oracle_before);

    // Answer the seed batch from the oracle file via a label CSV.
    let oracle = fs::read_to_string(p.join(ORACLE_FILE)).unwrap();
    let pending: Vec<String> = view["pending"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["crop_id"].as_str().unwrap().to_string())
        .collect();
    let mut lines = oracle.lines();
    let mut csv = format!("{}\n", lines.next().unwrap());
    for line in lines.filter(|l| l.split(',').nth(2).is_some_and(|id| pending.iter().any(|p| p == id))) {
        csv.push_str(line);
        csv.push('\n');
    }
    let answers = p.join("answers.csv");
    fs::write(&answers, &csv).unwrap();
    let import = camtrap(p, &["import-labels", answers.to_str().unwrap()]);
    assert_eq!(code(&import), 0, "{}", String::from_utf8_lossy(&import.stderr));
    assert_eq!(stdout_json(&import)["applied"], 30);
    // A second import of the same rows is rejected as a whole.
    assert_eq!(code(&camtrap(p, &["import-labels", answers.to_str().unwrap()])), 2);

    let train = camtrap(p, &["train"]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    assert_eq!(stdout_json(&train)["round"], 1);
    let state = load_project(p).unwrap();
    assert_eq!(state.history.len(), 1);
    assert_eq!(state.pending.as_ref().unwrap().items.len(), 25);

    let curve = camtrap(p, &["export-curve"]);
    assert_eq!(code(&curve), 0);
    let text = String::from_utf8(curve.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("30,"));

    let exported = p.join("labels.out.csv");
    assert_eq!(code(&camtrap(p, &["export-labels", "--out", exported.to_str().unwrap()])), 0);
    assert_eq!(fs::read_to_string(&exported).unwrap(), csv);

    let oracle_path = p.join(ORACLE_FILE);
    let cm_path = p.join("cm.csv");
    let eval = camtrap(
        p,
        &["evaluate", oracle_path.to_str().unwrap(), "--confusion-csv", cm_path.to_str().unwrap()],
    );
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let report = stdout_json(&eval);
    let accuracy = report["report"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&accuracy));
    assert!(report["flagged"].is_array());
    assert!(cm_path.exists());
}

#[test]
fn ingest_then_embed_then_init() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    let project = dir.path().join("project");
    fs::create_dir_all(images.join("site1")).unwrap();
    fs::write(images.join("site1/a.png"), common::PNG_1X1).unwrap();
    let detections = dir.path().join("detections.json");
    fs::write(
        &detections,
        serde_json::json!({
            "images": [{
                "file": "site1/a.png",
                "detections": [{"category": "1", "conf": 0.9, "bbox": [0.0, 0.0, 1.0, 1.0]}]
            }, {
                "file": "site1/missing.png",
                "detections": [{"category": "1", "conf": 0.9, "bbox": [0.0, 0.0, 1.0, 1.0]}]
            }],
            "detection_categories": {"1": "animal", "2": "person", "3": "vehicle"}
        })
        .to_string(),
    )
    .unwrap();

    let ingest = camtrap(&project, &["ingest", detections.to_str().unwrap(), images.to_str().unwrap()]);
    assert_eq!(code(&ingest), 0, "{}", String::from_utf8_lossy(&ingest.stderr));
    assert_eq!(stdout_json(&ingest)["records"], 2);
    let manifest = fs::read_to_string(project.join("crops.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 2);

    let embed = camtrap(&project, &["embed", "--provider", "synthetic", "--dim", "8", "--seed", "1"]);
    assert_eq!(code(&embed), 0, "{}", String::from_utf8_lossy(&embed.stderr));
    assert_eq!(stdout_json(&embed)["embedded"], 1);

    let init = camtrap(&project, &["init-project", "--classes", "Deer,Fox", "--seed-set-size", "1"]);
    assert_eq!(code(&init), 0, "{}", String::from_utf8_lossy(&init.stderr));
    let view = stdout_json(&init);
    assert_eq!(view["class_names"], serde_json::json!(["Deer", "Fox"]));
    assert_eq!(view["pending"][0]["image_url"].as_str().unwrap().len(), "/api/v1/crops/".len() + 32);

    // Embeddings are frozen once a project exists.
    assert_eq!(code(&camtrap(&project, &["embed", "--provider", "synthetic"])), 2);
}
