//! Per-view processing and cross-view fusion.
//!
//! [`process_view`] runs one view through render, prototype extraction,
//! and transport. [`fuse_views`] walks the scene Gaussians, gathers their
//! per-view masses and semantic targets, and produces fused canonical
//! targets plus residual gates. Views are independent, so processing runs
//! in parallel with order-preserving collection; all randomness is derived
//! from the schedule seed and the view index.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::config::EditConfig;
use crate::error::PipelineError;
use crate::evidence::{load_evidence, EditedViewEvidence, EvidenceError};
use crate::fusion::{
    canonical_target, fusion_weights, CanonicalEntry, CanonicalField, FusionError,
};
use crate::gating::{residuals_and_gate, GateState};
use crate::prototypes::{extract_prototypes, ViewPrototypes};
use crate::scene::{render_view, Camera, Gaussian, RenderOutput};
use crate::seeding::derive_seed;
use crate::uot::{
    cost_matrix, semantics_matrix, solve_uot, source_masses, top_k_support, ScalingInit,
    SolveOptions, TransportProblem, TransportSolution,
};

/// One view's inputs: a camera and its edit evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewInput {
    pub camera: Camera,
    pub evidence: EditedViewEvidence,
}

impl ViewInput {
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let (evidence, camera) = load_evidence(dir)?;
        Ok(ViewInput { camera, evidence })
    }
}

/// Everything one view contributes to a fusion round.
#[derive(Debug, Clone)]
pub struct ViewArtifacts {
    pub render: RenderOutput,
    pub prototypes: ViewPrototypes,
    pub problem: TransportProblem,
    pub solution: TransportSolution,
    row_of: BTreeMap<u64, usize>,
}

impl ViewArtifacts {
    pub fn transport_row(&self, id: u64) -> Option<usize> {
        self.row_of.get(&id).copied()
    }
}

/// Render, extract prototypes, and solve transport for one view.
pub fn process_view(
    scene: &[Gaussian],
    view: &ViewInput,
    cfg: &EditConfig,
    view_index: usize,
) -> Result<ViewArtifacts, PipelineError> {
    if view.evidence.height() != view.camera.height as usize
        || view.evidence.width() != view.camera.width as usize
    {
        return Err(EvidenceError::ShapeMismatch {
            field: "attention",
            expected: vec![view.camera.height as usize, view.camera.width as usize],
            actual: vec![view.evidence.height(), view.evidence.width()],
        }
        .into());
    }
    let render = render_view(scene, &view.camera, &cfg.render)?;
    let clustering_seed = derive_seed(cfg.schedule.seed, "clustering", view_index as u64);
    let prototypes = extract_prototypes(&view.evidence, &cfg.prototype, clustering_seed)?;

    let (ids, source_mass) = source_masses(&render, scene)?;
    let cost = cost_matrix(
        scene,
        &view.camera,
        &render,
        &ids,
        &prototypes.prototypes,
        &view.evidence.appearance_features,
        &cfg.transport.weights,
        cfg.render.depth_epsilon,
    )?;
    let target_mass = Array1::from_iter(prototypes.prototypes.iter().map(|p| p.mass));
    let support = cfg.transport.top_k.map(|k| top_k_support(&cost, k));
    let problem = TransportProblem::new(
        cost,
        source_mass,
        target_mass,
        cfg.transport.epsilon,
        cfg.transport.tau_source,
        cfg.transport.tau_target,
        ids,
    )?;
    let opts = SolveOptions {
        max_iters: cfg.transport.max_iters,
        tolerance: cfg.transport.tolerance,
        init: ScalingInit::Zeros,
        support,
        eps_target: cfg.transport.eps_target,
    };
    let solution = solve_uot(&problem, &semantics_matrix(&prototypes.prototypes), &opts)?;
    let row_of = problem
        .gaussian_ids
        .iter()
        .enumerate()
        .map(|(row, &id)| (id, row))
        .collect();

    Ok(ViewArtifacts {
        render,
        prototypes,
        problem,
        solution,
        row_of,
    })
}

/// Process all views in parallel. A view whose evidence yields no usable
/// support (empty after thresholding, or identically zero attention)
/// returns `None` and simply sits out the round.
pub fn process_views(
    scene: &[Gaussian],
    views: &[ViewInput],
    cfg: &EditConfig,
) -> Result<Vec<Option<ViewArtifacts>>, PipelineError> {
    views
        .par_iter()
        .enumerate()
        .map(
            |(index, view)| match process_view(scene, view, cfg, index) {
                Ok(artifacts) => Ok(Some(artifacts)),
                Err(PipelineError::Prototype(
                    crate::prototypes::PrototypeError::EmptySupport
                    | crate::prototypes::PrototypeError::AllZeroAttention,
                )) => Ok(None),
                Err(e) => Err(e),
            },
        )
        .collect()
}

/// Fusion output for the whole scene, rows in scene order.
#[derive(Debug, Clone)]
pub struct FusedState {
    pub canonical: Array2<f64>,
    pub gates: Vec<f64>,
    pub gate_states: Vec<GateState>,
    pub field: CanonicalField,
}

/// Fuse per-view transport results into canonical targets and gates.
///
/// A Gaussian with no view support keeps its own latent as target and an
/// open gate.
pub fn fuse_views(
    scene: &[Gaussian],
    artifacts: &[Option<ViewArtifacts>],
    cfg: &EditConfig,
) -> Result<FusedState, PipelineError> {
    let dim = scene.first().map_or(0, |g| g.semantic_latent.len());
    let mut canonical = Array2::<f64>::zeros((scene.len(), dim));
    let mut gates = Vec::with_capacity(scene.len());
    let mut gate_states = Vec::with_capacity(scene.len());
    let mut entries = BTreeMap::new();

    for (i, g) in scene.iter().enumerate() {
        let mut source_mass = BTreeMap::new();
        let mut transported = BTreeMap::new();
        let mut targets = BTreeMap::new();
        for (view_index, artifact) in artifacts.iter().enumerate() {
            let Some(artifact) = artifact else { continue };
            let Some(row) = artifact.transport_row(g.id) else {
                continue;
            };
            source_mass.insert(view_index, artifact.problem.source_mass[row]);
            transported.insert(view_index, artifact.solution.support_mass[row]);
            targets.insert(
                view_index,
                artifact.solution.semantic_target.row(row).to_owned(),
            );
        }

        let weights = match fusion_weights(&transported, cfg.fusion.delta) {
            Ok(w) => w,
            Err(FusionError::NoValidViews) => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        let z = if weights.is_empty() {
            g.semantic_latent.clone()
        } else {
            let weighted_targets: BTreeMap<usize, Array1<f64>> =
                weights.keys().map(|v| (*v, targets[v].clone())).collect();
            canonical_target(
                &weights,
                &weighted_targets,
                &g.semantic_latent.view(),
                cfg.fusion.rho,
            )?
        };
        let state = residuals_and_gate(&source_mass, &transported, &weights, &cfg.gate)?;

        canonical.row_mut(i).assign(&z);
        gates.push(state.gate);
        entries.insert(
            g.id,
            CanonicalEntry {
                valid_views: weights.keys().copied().collect(),
                weights: weights.clone(),
                canonical_target: z,
            },
        );
        gate_states.push(state);
    }

    Ok(FusedState {
        canonical,
        gates,
        gate_states,
        field: CanonicalField {
            rho: cfg.fusion.rho,
            entries,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;

    #[test]
    fn toy_view_processes_end_to_end() {
        let scenario = toy::standard_scenario();
        let views = toy::scenario_views(&scenario).unwrap();
        let artifacts = process_view(&scenario.scene, &views[0], &scenario.config, 0).unwrap();
        assert_eq!(
            artifacts.prototypes.prototypes.len(),
            scenario.config.prototype.num_prototypes
        );
        // Transport coupled every visible gaussian to every prototype.
        assert!(artifacts.solution.plan.iter().all(|&t| t > 0.0));
        let fused = fuse_views(&scenario.scene, &[Some(artifacts)], &scenario.config).unwrap();
        assert_eq!(fused.gates.len(), scenario.scene.len());
        assert!(fused.gates.iter().all(|g| (0.0..=1.0).contains(g)));
    }

    #[test]
    fn fusion_with_no_artifacts_keeps_latents() {
        let scenario = toy::standard_scenario();
        let fused = fuse_views(&scenario.scene, &[None], &scenario.config).unwrap();
        for (i, g) in scenario.scene.iter().enumerate() {
            assert_eq!(fused.canonical.row(i), g.semantic_latent.view());
            assert_eq!(fused.gates[i], 1.0);
        }
    }

    #[test]
    fn mismatched_evidence_shape_is_rejected() {
        let scenario = toy::standard_scenario();
        let mut views = toy::scenario_views(&scenario).unwrap();
        views[0].camera.width = 16;
        let err = process_view(&scenario.scene, &views[0], &scenario.config, 0).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::Evidence(EvidenceError::ShapeMismatch { .. })
        ));
    }
}
