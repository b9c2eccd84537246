//! `splatport`: generate toy scenes and evidence, run the pipeline stage by
//! stage or end to end, verify the math, and sweep hyperparameters.
//!
//! Exit codes: 0 on success, 1 when a verify check fails, 2 on bad input.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod records;

#[derive(Parser)]
#[command(
    name = "splatport",
    version,
    about = "Gated multi-view editing of Gaussian-splat scenes"
)]
struct Cli {
    /// Worker threads for per-view work (0 keeps the rayon default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a preset scene with its cameras and a full config file.
    GenerateScene {
        /// Scene preset name.
        #[arg(long, default_value = "toy")]
        preset: String,
        /// Root seed recorded in the config (defaults to the preset's).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for scene.json, cameras.json, config.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fabricate edited-view evidence rasters for one camera.
    GenerateEvidence {
        #[arg(long)]
        scene: PathBuf,
        /// Camera list file (cameras.json).
        #[arg(long)]
        cameras: PathBuf,
        /// Index into the camera list.
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long)]
        config: PathBuf,
        /// Root seed; overrides the one in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output evidence directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster one view's evidence into prototypes.
    ExtractPrototypes {
        #[arg(long)]
        evidence_dir: PathBuf,
        /// View index the evidence belongs to (seeds the clustering).
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output prototypes JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one view's unbalanced transport problem.
    SolveTransport {
        /// Standalone problem JSON (cost, masses, penalties).
        #[arg(long, conflicts_with_all = ["scene", "evidence_dir"])]
        problem: Option<PathBuf>,
        /// Scene file; requires --evidence-dir.
        #[arg(long, requires = "evidence_dir")]
        scene: Option<PathBuf>,
        /// Evidence directory; requires --scene.
        #[arg(long, requires = "scene")]
        evidence_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output solution JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse per-view transport into canonical targets and gates.
    Fuse {
        #[arg(long)]
        scene: PathBuf,
        /// One per view, repeatable.
        #[arg(long = "evidence-dir", required = true)]
        evidence_dirs: Vec<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output canonical-field JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full gated edit loop.
    Edit {
        #[arg(long)]
        scene: PathBuf,
        /// One per view, repeatable.
        #[arg(long = "evidence-dir", required = true)]
        evidence_dirs: Vec<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for report.json, scene_edited.json, trace.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a verification suite and report each check.
    Verify {
        /// Suite name, or "all".
        #[arg(long, default_value = "all")]
        suite: String,
        /// Seed for the randomized trials.
        #[arg(long, default_value_t = splatport::verify::VERIFY_SEED)]
        seed: u64,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the toy edit over a hyperparameter grid and emit CSV.
    Sweep {
        /// Grid JSON: values for any of lambda_sem, lambda_leak, epsilon,
        /// tau_r, rho.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if cli.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
        if let Err(e) = pool {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }

    let result =
        match cli.command {
            Command::GenerateScene { preset, seed, out } => {
                commands::generate_scene(&preset, seed, &out).map(|()| ExitCode::SUCCESS)
            }
            Command::GenerateEvidence {
                scene,
                cameras,
                view,
                config,
                seed,
                out,
            } => commands::generate_evidence(&scene, &cameras, view, &config, seed, &out)
                .map(|()| ExitCode::SUCCESS),
            Command::ExtractPrototypes {
                evidence_dir,
                view,
                config,
                seed,
                out,
            } => commands::extract_prototypes_cmd(&evidence_dir, view, &config, seed, &out)
                .map(|()| ExitCode::SUCCESS),
            Command::SolveTransport {
                problem,
                scene,
                evidence_dir,
                view,
                config,
                seed,
                out,
            } => commands::solve_transport(commands::TransportArgs {
                problem,
                scene,
                evidence_dir,
                view,
                config,
                seed,
                out,
            })
            .map(|()| ExitCode::SUCCESS),
            Command::Fuse {
                scene,
                evidence_dirs,
                config,
                seed,
                out,
            } => commands::fuse(&scene, &evidence_dirs, &config, seed, &out)
                .map(|()| ExitCode::SUCCESS),
            Command::Edit {
                scene,
                evidence_dirs,
                config,
                seed,
                out,
            } => commands::edit(&scene, &evidence_dirs, &config, seed, &out)
                .map(|()| ExitCode::SUCCESS),
            Command::Verify { suite, seed, out } => commands::verify(&suite, seed, out.as_deref()),
            Command::Sweep { grid, seed, out } => {
                commands::sweep(&grid, seed, &out).map(|()| ExitCode::SUCCESS)
            }
        };

    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
