//! One function per subcommand; all I/O goes through the library's atomic
//! writers so interrupted runs never leave half-written artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::{Deserialize, Serialize};
use splatport::edit::{run_edit, trace_csv};
use splatport::error::PipelineError;
use splatport::evidence::{generate_synthetic_evidence, store_evidence, EditSpec};
use splatport::fsio::{read_json, write_bytes_atomic, write_json_atomic};
use splatport::pipeline::{fuse_views, process_view, process_views, ViewInput};
use splatport::prototypes::extract_prototypes;
use splatport::scene::{load_scene, save_scene, Camera, CameraRecord};
use splatport::seeding::derive_seed;
use splatport::sweep::{run_sweep, sweep_csv, ParamGrid};
use splatport::toy::standard_scenario;
use splatport::uot::{solve_uot, SolveOptions};
use splatport::verify::{parse_suites, run_suite};
use splatport::{config::EditConfig, edit::EditTarget};

use crate::records;

/// Everything a run needs besides the scene and evidence: hyperparameters,
/// the fabricated edit, and the edit target. Every field has a default
/// (the standard toy scenario), so partial files work.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub edit: EditConfig,
    pub edit_spec: EditSpec,
    pub target: EditTarget,
    pub appearance_dim: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        let s = standard_scenario();
        HarnessConfig {
            edit: s.config,
            edit_spec: s.edit_spec,
            target: s.target,
            appearance_dim: s.appearance_dim,
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<HarnessConfig, PipelineError> {
    let mut cfg: HarnessConfig = read_json(path)?;
    if let Some(seed) = seed {
        cfg.edit_spec.seed = seed;
        cfg.edit.schedule.seed = seed;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir.display().to_string(), e))
}

fn load_views(dirs: &[PathBuf]) -> Result<Vec<ViewInput>, PipelineError> {
    dirs.iter().map(|d| ViewInput::load(d)).collect()
}

pub fn generate_scene(preset: &str, seed: Option<u64>, out: &Path) -> Result<(), PipelineError> {
    if preset != "toy" {
        return Err(PipelineError::invalid(format!(
            "unknown preset '{preset}'; available presets: toy"
        )));
    }
    let scenario = standard_scenario();
    let mut config = HarnessConfig {
        edit: scenario.config,
        edit_spec: scenario.edit_spec,
        target: scenario.target,
        appearance_dim: scenario.appearance_dim,
    };
    if let Some(seed) = seed {
        config.edit_spec.seed = seed;
        config.edit.schedule.seed = seed;
    }

    ensure_dir(out)?;
    let scene_path = out.join("scene.json");
    save_scene(&scene_path, &scenario.scene)?;
    let cameras: Vec<CameraRecord> = scenario.cameras.iter().map(CameraRecord::from).collect();
    let cameras_path = out.join("cameras.json");
    write_json_atomic(&cameras_path, &cameras)?;
    let config_path = out.join("config.json");
    write_json_atomic(&config_path, &config)?;

    println!(
        "wrote {} ({} gaussians), {} ({} cameras), {}",
        scene_path.display(),
        scenario.scene.len(),
        cameras_path.display(),
        cameras.len(),
        config_path.display()
    );
    Ok(())
}

pub fn generate_evidence(
    scene: &Path,
    cameras: &Path,
    view: usize,
    config: &Path,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), PipelineError> {
    let scene = load_scene(scene)?;
    let records: Vec<CameraRecord> = read_json(cameras)?;
    let camera: Camera = records
        .into_iter()
        .nth(view)
        .ok_or_else(|| PipelineError::invalid(format!("view {view} out of range")))?
        .try_into()
        .map_err(PipelineError::from)?;
    let cfg = load_config(config, seed)?;

    let mut spec = cfg.edit_spec.clone();
    spec.seed = derive_seed(cfg.edit_spec.seed, "view-evidence", view as u64);
    let evidence = generate_synthetic_evidence(
        &scene,
        &camera,
        &spec,
        &cfg.edit.render,
        cfg.appearance_dim,
        false,
    )?;
    store_evidence(out, &evidence, &camera)?;
    println!("wrote evidence for view {view} to {}", out.display());
    Ok(())
}

pub fn extract_prototypes_cmd(
    evidence_dir: &Path,
    view: usize,
    config: &Path,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), PipelineError> {
    let (evidence, _camera) = splatport::evidence::load_evidence(evidence_dir)?;
    let cfg = load_config(config, seed)?;
    let clustering_seed = derive_seed(cfg.edit.schedule.seed, "clustering", view as u64);
    let view_prototypes = extract_prototypes(&evidence, &cfg.edit.prototype, clustering_seed)?;
    let records = records::prototype_records(&view_prototypes);
    write_json_atomic(out, &records)?;
    println!("wrote {} prototypes to {}", records.len(), out.display());
    Ok(())
}

pub struct TransportArgs {
    pub problem: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub evidence_dir: Option<PathBuf>,
    pub view: usize,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub fn solve_transport(args: TransportArgs) -> Result<(), PipelineError> {
    let cfg = match &args.config {
        Some(path) => load_config(path, args.seed)?,
        None => HarnessConfig::default(),
    };

    let record = match (&args.problem, &args.scene, &args.evidence_dir) {
        (Some(problem), None, None) => {
            let record: records::ProblemRecord = read_json(problem)?;
            let (problem, semantics) = record.build()?;
            let t = &cfg.edit.transport;
            let opts = SolveOptions {
                max_iters: t.max_iters,
                tolerance: t.tolerance,
                ..SolveOptions::default()
            };
            let solution = solve_uot(&problem, &semantics, &opts)?;
            records::solution_record(&problem, &solution)
        }
        (None, Some(scene), Some(dir)) => {
            let scene = load_scene(scene)?;
            let view = ViewInput::load(dir)?;
            let artifacts = process_view(&scene, &view, &cfg.edit, args.view)?;
            records::solution_record(&artifacts.problem, &artifacts.solution)
        }
        _ => {
            return Err(PipelineError::invalid(
                "pass either --problem, or --scene with --evidence-dir",
            ))
        }
    };

    write_json_atomic(&args.out, &record)?;
    println!(
        "wrote transport solution ({} rows, objective {:.6}) to {}",
        record.plan.len(),
        record.objective,
        args.out.display()
    );
    Ok(())
}

pub fn fuse(
    scene: &Path,
    evidence_dirs: &[PathBuf],
    config: &Path,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), PipelineError> {
    let scene = load_scene(scene)?;
    let cfg = load_config(config, seed)?;
    let views = load_views(evidence_dirs)?;
    let artifacts = process_views(&scene, &views, &cfg.edit)?;
    let fused = fuse_views(&scene, &artifacts, &cfg.edit)?;
    let record = records::fusion_record(&scene, fused);
    write_json_atomic(out, &record)?;
    println!(
        "wrote canonical field for {} gaussians to {}",
        record.gaussian_ids.len(),
        out.display()
    );
    Ok(())
}

pub fn edit(
    scene: &Path,
    evidence_dirs: &[PathBuf],
    config: &Path,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), PipelineError> {
    let scene = load_scene(scene)?;
    let cfg = load_config(config, seed)?;
    let views = load_views(evidence_dirs)?;
    let (edited, report) = run_edit(&scene, &views, &cfg.edit, &cfg.target)?;

    ensure_dir(out)?;
    save_scene(&out.join("scene_edited.json"), &edited)?;
    write_json_atomic(&out.join("report.json"), &report)?;
    write_bytes_atomic(&out.join("trace.csv"), trace_csv(&report.trace).as_bytes())?;

    println!(
        "edit finished: target_color_error {:.6}, leakage {:.6} ({} rounds x {} steps)",
        report.target_color_error, report.leakage, report.rounds, report.steps_per_round
    );
    println!(
        "wrote report.json, scene_edited.json, trace.csv to {}",
        out.display()
    );
    Ok(())
}

pub fn verify(suite: &str, seed: u64, out: Option<&Path>) -> Result<ExitCode, PipelineError> {
    let suites = parse_suites(suite)?;
    let mut reports = Vec::with_capacity(suites.len());
    for s in suites {
        let report = run_suite(s, seed);
        println!(
            "[{}] {:<22} ({:.2}s)",
            if report.passed { "pass" } else { "FAIL" },
            report.suite,
            report.elapsed_seconds
        );
        for check in &report.checks {
            println!(
                "    {} {}: {}",
                if check.passed { "ok  " } else { "FAIL" },
                check.name,
                check.details
            );
        }
        reports.push(report);
    }
    if let Some(path) = out {
        write_json_atomic(path, &reports)?;
    }
    let all_passed = reports.iter().all(|r| r.passed);
    Ok(if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

pub fn sweep(grid: &Path, seed: u64, out: &Path) -> Result<(), PipelineError> {
    let grid: ParamGrid = read_json(grid)?;
    let rows = run_sweep(&grid, seed)?;
    write_bytes_atomic(out, sweep_csv(&rows).as_bytes())?;
    println!("wrote {} sweep rows to {}", rows.len(), out.display());
    Ok(())
}
