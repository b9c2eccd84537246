//! End-to-end tests against the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn splatport(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatport"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Shrink the schedule so binary tests stay quick; the full-length run is
/// covered by the library's acceptance suite.
fn lighten_config(dir: &Path) {
    let path = dir.join("config.json");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    cfg["edit"]["schedule"]["rounds"] = 1.into();
    cfg["edit"]["schedule"]["steps_per_round"] = 12.into();
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

fn generate_inputs(root: &Path) -> (String, String, String, Vec<String>) {
    let scenedir = root.join("scenedir");
    assert_ok(&splatport(&[
        "generate-scene",
        "--preset",
        "toy",
        "--out",
        path_str(&scenedir),
    ]));
    lighten_config(&scenedir);

    let scene = scenedir.join("scene.json").display().to_string();
    let cameras = scenedir.join("cameras.json").display().to_string();
    let config = scenedir.join("config.json").display().to_string();

    let mut evidence = Vec::new();
    for view in 0..3 {
        let dir = root.join(format!("ev{view}")).display().to_string();
        assert_ok(&splatport(&[
            "generate-evidence",
            "--scene",
            &scene,
            "--cameras",
            &cameras,
            "--view",
            &view.to_string(),
            "--config",
            &config,
            "--out",
            &dir,
        ]));
        evidence.push(dir);
    }
    (scene, cameras, config, evidence)
}

#[test]
fn six_stage_pipeline_composes() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let (scene, _cameras, config, evidence) = generate_inputs(root);

    let protos = root.join("prototypes.json").display().to_string();
    assert_ok(&splatport(&[
        "extract-prototypes",
        "--evidence-dir",
        &evidence[0],
        "--view",
        "0",
        "--config",
        &config,
        "--out",
        &protos,
    ]));
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&protos).unwrap()).unwrap();
    assert!(!parsed.as_array().unwrap().is_empty());

    let transport = root.join("transport.json").display().to_string();
    assert_ok(&splatport(&[
        "solve-transport",
        "--scene",
        &scene,
        "--evidence-dir",
        &evidence[0],
        "--view",
        "0",
        "--config",
        &config,
        "--out",
        &transport,
    ]));

    let fused = root.join("fused.json").display().to_string();
    assert_ok(&splatport(&[
        "fuse",
        "--scene",
        &scene,
        "--evidence-dir",
        &evidence[0],
        "--evidence-dir",
        &evidence[1],
        "--evidence-dir",
        &evidence[2],
        "--config",
        &config,
        "--out",
        &fused,
    ]));
    let fused: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&fused).unwrap()).unwrap();
    assert_eq!(fused["gaussian_ids"].as_array().unwrap().len(), 12);
    for gate in fused["gates"].as_array().unwrap() {
        let g = gate.as_f64().unwrap();
        assert!(g > 0.0 && g <= 1.0);
    }

    let editout = root.join("editout");
    assert_ok(&splatport(&[
        "edit",
        "--scene",
        &scene,
        "--evidence-dir",
        &evidence[0],
        "--evidence-dir",
        &evidence[1],
        "--evidence-dir",
        &evidence[2],
        "--config",
        &config,
        "--out",
        path_str(&editout),
    ]));
    for artifact in ["report.json", "scene_edited.json", "trace.csv"] {
        assert!(editout.join(artifact).exists(), "missing {artifact}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(editout.join("report.json")).unwrap()).unwrap();
    assert!(report["target_color_error"].as_f64().unwrap().is_finite());
    assert_eq!(report["final_scene"].as_array().unwrap().len(), 12);
}

#[test]
fn edit_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let (scene, _cameras, config, evidence) = generate_inputs(root);

    let mut reports = Vec::new();
    for run in 0..2 {
        let out = root.join(format!("edit{run}"));
        let mut args = vec!["edit", "--scene", &scene];
        for dir in &evidence {
            args.push("--evidence-dir");
            args.push(dir);
        }
        args.extend_from_slice(&["--config", &config, "--out", path_str(&out)]);
        assert_ok(&splatport(&args));
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(
        reports[0], reports[1],
        "same inputs, different report bytes"
    );
}

#[test]
fn malformed_cost_shape_exits_two() {
    let tmp = TempDir::new().unwrap();
    let problem = tmp.path().join("problem.json");
    fs::write(
        &problem,
        r#"{
            "cost": [[1.0, 2.0], [3.0]],
            "source_mass": [0.5, 0.5],
            "target_mass": [0.5, 0.5],
            "epsilon": 0.05,
            "tau_source": 1.0,
            "tau_target": 1.0,
            "prototype_semantics": [[1.0], [0.5]]
        }"#,
    )
    .unwrap();
    let out = tmp.path().join("solution.json").display().to_string();
    let result = splatport(&[
        "solve-transport",
        "--problem",
        path_str(&problem),
        "--out",
        &out,
    ]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("row 1"), "stderr: {stderr}");
}

#[test]
fn well_formed_problem_solves() {
    let tmp = TempDir::new().unwrap();
    let problem = tmp.path().join("problem.json");
    fs::write(
        &problem,
        r#"{
            "cost": [[0.1, 2.0], [2.0, 0.1]],
            "source_mass": [0.5, 0.5],
            "target_mass": [0.5, 0.5],
            "epsilon": 0.05,
            "tau_source": 1.0,
            "tau_target": 1.0,
            "prototype_semantics": [[1.0, 0.0], [0.0, 1.0]]
        }"#,
    )
    .unwrap();
    let out = tmp.path().join("solution.json");
    assert_ok(&splatport(&[
        "solve-transport",
        "--problem",
        path_str(&problem),
        "--out",
        path_str(&out),
    ]));
    let solution: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    // Cheap diagonal should carry most of the mass.
    let plan = solution["plan"].as_array().unwrap();
    let at = |i: usize, j: usize| plan[i].as_array().unwrap()[j].as_f64().unwrap();
    assert!(at(0, 0) > at(0, 1));
    assert!(at(1, 1) > at(1, 0));
}

#[test]
fn verify_reports_checks_and_exit_status() {
    let out = splatport(&["verify", "--suite", "gate-properties"]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("[pass] gate-properties"),
        "stdout: {stdout}"
    );
    assert!(stdout.contains("ok  "), "stdout: {stdout}");

    let unknown = splatport(&["verify", "--suite", "no-such-suite"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn sweep_rejects_an_empty_grid() {
    let tmp = TempDir::new().unwrap();
    let grid = tmp.path().join("grid.json");
    fs::write(&grid, "{}").unwrap();
    let out = tmp.path().join("sweep.csv").display().to_string();
    let result = splatport(&["sweep", "--grid", path_str(&grid), "--out", &out]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("empty parameter grid"), "stderr: {stderr}");
}
