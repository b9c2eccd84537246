//! JSON shapes for the per-stage artifact files.
//!
//! The library works in `ndarray`/`nalgebra` types; these records are the
//! plain row-major forms the stage commands read and write.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use splatport::error::PipelineError;
use splatport::fusion::CanonicalField;
use splatport::gating::GateState;
use splatport::pipeline::FusedState;
use splatport::prototypes::ViewPrototypes;
use splatport::scene::Gaussian;
use splatport::uot::{TransportProblem, TransportSolution};

pub fn matrix_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn rectangular(field: &str, rows: &[Vec<f64>]) -> Result<Array2<f64>, PipelineError> {
    let width = rows.first().map_or(0, Vec::len);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(PipelineError::invalid(format!(
                "{field}: row {i} has {} entries, expected {width}",
                row.len()
            )));
        }
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), width), flat)
        .map_err(|e| PipelineError::invalid(format!("{field}: {e}")))
}

/// One extracted prototype.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub position: [f64; 2],
    pub mass: f64,
    pub pixel_count: usize,
    pub semantic: Vec<f64>,
    pub appearance: Vec<f64>,
}

pub fn prototype_records(view: &ViewPrototypes) -> Vec<PrototypeRecord> {
    view.prototypes
        .iter()
        .map(|p| PrototypeRecord {
            position: [p.position.x, p.position.y],
            mass: p.mass,
            pixel_count: p.pixel_count,
            semantic: p.semantic.to_vec(),
            appearance: p.appearance.to_vec(),
        })
        .collect()
}

/// A standalone transport problem file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemRecord {
    pub cost: Vec<Vec<f64>>,
    pub source_mass: Vec<f64>,
    pub target_mass: Vec<f64>,
    pub epsilon: f64,
    pub tau_source: f64,
    pub tau_target: f64,
    /// Source row labels; defaults to 0..n.
    #[serde(default)]
    pub gaussian_ids: Option<Vec<u64>>,
    pub prototype_semantics: Vec<Vec<f64>>,
}

impl ProblemRecord {
    pub fn build(self) -> Result<(TransportProblem, Array2<f64>), PipelineError> {
        let cost = rectangular("cost", &self.cost)?;
        let semantics = rectangular("prototype_semantics", &self.prototype_semantics)?;
        if semantics.nrows() != cost.ncols() {
            return Err(PipelineError::invalid(format!(
                "prototype_semantics has {} rows, cost has {} columns",
                semantics.nrows(),
                cost.ncols()
            )));
        }
        let ids = self
            .gaussian_ids
            .unwrap_or_else(|| (0..cost.nrows() as u64).collect());
        let problem = TransportProblem::new(
            cost,
            self.source_mass.into(),
            self.target_mass.into(),
            self.epsilon,
            self.tau_source,
            self.tau_target,
            ids,
        )?;
        Ok((problem, semantics))
    }
}

/// Solved transport for one view.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gaussian_ids: Vec<u64>,
    /// Transported mass per source row (plan row sums).
    pub support_mass: Vec<f64>,
    pub plan: Vec<Vec<f64>>,
    /// Mass-weighted semantic target per source row.
    pub semantic_target: Vec<Vec<f64>>,
}

pub fn solution_record(problem: &TransportProblem, solution: &TransportSolution) -> SolutionRecord {
    SolutionRecord {
        objective: solution.objective,
        iterations: solution.iterations,
        converged: solution.converged,
        gaussian_ids: problem.gaussian_ids.clone(),
        support_mass: solution.support_mass.to_vec(),
        plan: matrix_rows(&solution.plan),
        semantic_target: matrix_rows(&solution.semantic_target),
    }
}

/// Fused canonical targets and gates for the whole scene, rows in scene
/// order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionRecord {
    pub gaussian_ids: Vec<u64>,
    pub canonical: Vec<Vec<f64>>,
    pub gates: Vec<f64>,
    pub gate_states: Vec<GateState>,
    pub field: CanonicalField,
}

pub fn fusion_record(scene: &[Gaussian], fused: FusedState) -> FusionRecord {
    FusionRecord {
        gaussian_ids: scene.iter().map(|g| g.id).collect(),
        canonical: matrix_rows(&fused.canonical),
        gates: fused.gates,
        gate_states: fused.gate_states,
        field: fused.field,
    }
}
