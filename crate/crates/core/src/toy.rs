//! The standard toy scenario used by presets, examples, and checks.
//!
//! Twelve isotropic Gaussians sit on a 2x2x3 lattice; the front layer of
//! four is the edit target, the two layers behind it are bystanders that
//! every camera sees only through the front layer. Three cameras watch
//! from a quarter arc of radius five. Evidence is fabricated from a
//! recolor edit toward red with mild noise, so a full run has known
//! ground truth: targets should turn red, everything else should stay
//! put. The occluded layers are the interesting part: their pixels are
//! dominated by the targets in front, so image evidence alone cannot pin
//! their colors down, and they only hold still when the leakage penalty
//! acts through their closed gates.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::Array1;

use crate::config::EditConfig;
use crate::edit::EditTarget;
use crate::error::PipelineError;
use crate::evidence::{generate_synthetic_evidence, EditSpec};
use crate::pipeline::ViewInput;
use crate::scene::{Camera, Gaussian};
use crate::seeding::derive_seed;

/// Semantic latent dimension of the toy scene.
pub const SEMANTIC_DIM: usize = 16;
/// Appearance descriptor channels of the toy evidence.
pub const APPEARANCE_DIM: usize = 8;
/// Image side length of the toy cameras.
pub const IMAGE_SIZE: u32 = 32;

/// A ready-to-run scenario: scene, cameras, edit description, and config.
#[derive(Debug, Clone)]
pub struct ToyScenario {
    pub scene: Vec<Gaussian>,
    pub cameras: Vec<Camera>,
    pub edit_spec: EditSpec,
    pub target: EditTarget,
    pub config: EditConfig,
    pub appearance_dim: usize,
}

fn grid_color(id: u64) -> Vector3<f64> {
    Vector3::new(
        0.35 + 0.03 * (id % 4) as f64,
        0.42 + 0.02 * (id % 3) as f64,
        0.55 - 0.02 * (id % 5) as f64,
    )
}

/// Gaussian ids of the edit targets (the front 2x2 layer).
pub const TARGET_IDS: [u64; 4] = [0, 1, 2, 3];

fn toy_scene() -> Vec<Gaussian> {
    // Two semantic classes: the front layer shares one latent direction,
    // the occluded layers another. Transport can then tell the rows apart
    // before any editing has happened, which is what closes the gates on
    // the back layers and keeps them open on the front.
    let mut back_class = Array1::<f64>::zeros(SEMANTIC_DIM);
    back_class[0] = 0.5;
    let mut front_class = Array1::<f64>::zeros(SEMANTIC_DIM);
    front_class[1] = 0.5;
    let mut scene = Vec::with_capacity(12);
    for layer in 0..3u64 {
        for corner in 0..4u64 {
            let id = layer * 4 + corner;
            let color = grid_color(id);
            let front = layer == 0;
            scene.push(Gaussian {
                id,
                center: Vector3::new(
                    0.4 * ((corner % 2) as f64 - 0.5),
                    0.4 * ((corner / 2) as f64 - 0.5),
                    0.35 * layer as f64,
                ),
                // The back layers are small and faint on purpose: the
                // image pins them only weakly, which is the regime where
                // the leakage penalty has to do the work.
                covariance: Matrix3::identity() * if front { 0.012 } else { 0.0025 },
                color,
                opacity: if front { 0.85 } else { 0.35 },
                semantic_latent: if front {
                    front_class.clone()
                } else {
                    back_class.clone()
                },
                original_color: color,
            });
        }
    }
    scene
}

fn toy_cameras() -> Vec<Camera> {
    [-45.0f64, 0.0, 45.0]
        .iter()
        .map(|deg| {
            let theta = deg.to_radians();
            let position = Vector3::new(-5.0 * theta.sin(), 0.0, -5.0 * theta.cos());
            Camera::look_at(
                position,
                Vector3::zeros(),
                Vector3::new(0.0, 1.0, 0.0),
                Vector2::new(60.0, 60.0),
                Vector2::new(15.5, 15.5),
                IMAGE_SIZE,
                IMAGE_SIZE,
            )
        })
        .collect()
}

/// Color the fabricated edit paints on the targets.
pub const TARGET_COLOR: [f64; 3] = [0.85, 0.12, 0.08];

/// The standard scenario with its tuned configuration.
pub fn standard_scenario() -> ToyScenario {
    let target_ids: BTreeSet<u64> = BTreeSet::from_iter(TARGET_IDS);
    // The recolor keeps the block's semantic class; only the color moves.
    let mut target_semantic = vec![0.0; SEMANTIC_DIM];
    target_semantic[1] = 0.5;
    let edit_spec = EditSpec {
        target_region: target_ids.clone(),
        target_semantic,
        target_color: TARGET_COLOR,
        attention_noise_sigma: 0.01,
        feature_noise_sigma: 0.05,
        seed: 42,
    };

    let mut config = EditConfig::default();
    config.prototype.num_prototypes = 4;
    config.gate.tau_r = 0.01;
    config.schedule.rounds = 2;
    config.schedule.steps_per_round = 320;
    config.schedule.step_size = 0.00125;
    config.schedule.seed = 42;

    ToyScenario {
        scene: toy_scene(),
        cameras: toy_cameras(),
        target: EditTarget {
            ids: target_ids,
            color: Some(TARGET_COLOR),
        },
        edit_spec,
        config,
        appearance_dim: APPEARANCE_DIM,
    }
}

/// Fabricate evidence for every camera, one derived seed per view.
pub fn scenario_views(scenario: &ToyScenario) -> Result<Vec<ViewInput>, PipelineError> {
    scenario
        .cameras
        .iter()
        .enumerate()
        .map(|(v, camera)| {
            let mut spec = scenario.edit_spec.clone();
            spec.seed = derive_seed(scenario.edit_spec.seed, "view-evidence", v as u64);
            let evidence = generate_synthetic_evidence(
                &scenario.scene,
                camera,
                &spec,
                &scenario.config.render,
                scenario.appearance_dim,
                false,
            )?;
            Ok(ViewInput {
                camera: camera.clone(),
                evidence,
            })
        })
        .collect()
}
