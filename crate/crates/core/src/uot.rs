//! Entropic unbalanced optimal transport between scene Gaussians and view
//! prototypes.
//!
//! The problem solved per view is
//!
//! ```text
//! min_{T >= 0}  <C, T> + eps * KL(T || a b^T)
//!             + tau_s * KL(T 1 || a) + tau_t * KL(T^T 1 || b)
//! ```
//!
//! with the generalized divergence `KL(x || y) = sum x ln(x/y) - x + y`.
//! Relaxed marginals let mass appear or vanish, so Gaussians untouched by
//! the edit simply receive little mass instead of being force-matched.
//!
//! [`solve_uot`] runs Sinkhorn-style scaling iterations in the log domain:
//! with kernel `K = a b^T exp(-C / eps)` and `T = diag(u) K diag(v)`, the
//! damped updates are `u = (a ./ Kv)^(tau_s/(tau_s+eps))` and
//! `v = (b ./ K^T u)^(tau_t/(tau_t+eps))`, evaluated via log-sum-exp so
//! small `eps` stays finite. The objective is strictly convex, so the
//! optimum is unique and independent of initialization.

use nalgebra::Vector2;
use ndarray::{Array1, Array2, Axis};
use rand::RngExt;
use thiserror::Error;

use crate::config::{AppearanceMetric, CostWeights};
use crate::prototypes::Prototype;
use crate::scene::{Camera, Gaussian, RenderOutput};
use crate::seeding::stage_rng;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cost matrix is {rows}x{cols} but masses have lengths {a_len} and {b_len}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        a_len: usize,
        b_len: usize,
    },
    #[error("transport problem must have at least one source and one target")]
    EmptyProblem,
    #[error("source mass {0} is not strictly positive")]
    NonPositiveSourceMass(f64),
    #[error("target mass {0} is not strictly positive")]
    NonPositiveTargetMass(f64),
    #[error("epsilon and both tau values must be strictly positive")]
    NonPositiveRegularization,
    #[error("non-finite value in transport inputs")]
    NonFinite,
    #[error("gaussian id list has length {0}, expected {1}")]
    IdLength(usize, usize),
    #[error("scaling iterations overflowed; problem is too stiff")]
    NumericalOverflow,
    #[error("no gaussian is visible in this view")]
    NoVisibleGaussians,
    #[error("gaussian {0} is not visible in this view")]
    NotVisible(u64),
    #[error("gaussian {0} is not in the scene")]
    UnknownGaussian(u64),
    #[error("gaussian {0} footprint carries no composited mass")]
    ZeroFootprintMass(u64),
    #[error("projection of gaussian {0} fell behind the camera")]
    ProjectionFailed(u64),
    #[error("descriptor dimensions disagree: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("plan shape {actual:?} does not match problem shape {expected:?}")]
    PlanShape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("plan entry {0} is negative")]
    NegativePlanEntry(f64),
    #[error("semantic matrix has {0} rows, expected one per prototype ({1})")]
    SemanticRows(usize, usize),
}

/// One view's transport problem between visible Gaussians and prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    /// `(num_gaussians, num_prototypes)` pairing costs.
    pub cost: Array2<f64>,
    /// Source masses, one per visible Gaussian, strictly positive.
    pub source_mass: Array1<f64>,
    /// Target masses, one per prototype, strictly positive.
    pub target_mass: Array1<f64>,
    pub epsilon: f64,
    pub tau_source: f64,
    pub tau_target: f64,
    /// Gaussian ids, parallel to `source_mass`.
    pub gaussian_ids: Vec<u64>,
}

impl TransportProblem {
    pub fn new(
        cost: Array2<f64>,
        source_mass: Array1<f64>,
        target_mass: Array1<f64>,
        epsilon: f64,
        tau_source: f64,
        tau_target: f64,
        gaussian_ids: Vec<u64>,
    ) -> Result<Self, TransportError> {
        let (rows, cols) = cost.dim();
        if rows == 0 || cols == 0 {
            return Err(TransportError::EmptyProblem);
        }
        if source_mass.len() != rows || target_mass.len() != cols {
            return Err(TransportError::ShapeMismatch {
                rows,
                cols,
                a_len: source_mass.len(),
                b_len: target_mass.len(),
            });
        }
        if gaussian_ids.len() != rows {
            return Err(TransportError::IdLength(gaussian_ids.len(), rows));
        }
        if !cost.iter().all(|v| v.is_finite()) {
            return Err(TransportError::NonFinite);
        }
        for &a in &source_mass {
            if !a.is_finite() {
                return Err(TransportError::NonFinite);
            }
            if a <= 0.0 {
                return Err(TransportError::NonPositiveSourceMass(a));
            }
        }
        for &b in &target_mass {
            if !b.is_finite() {
                return Err(TransportError::NonFinite);
            }
            if b <= 0.0 {
                return Err(TransportError::NonPositiveTargetMass(b));
            }
        }
        if !(epsilon > 0.0 && tau_source > 0.0 && tau_target > 0.0)
            || !epsilon.is_finite()
            || !tau_source.is_finite()
            || !tau_target.is_finite()
        {
            return Err(TransportError::NonPositiveRegularization);
        }
        Ok(TransportProblem {
            cost,
            source_mass,
            target_mass,
            epsilon,
            tau_source,
            tau_target,
            gaussian_ids,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.cost.nrows()
    }

    pub fn num_targets(&self) -> usize {
        self.cost.ncols()
    }
}

/// Starting point of the scaling iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingInit {
    /// Log-scalings start at zero.
    Zeros,
    /// Log-scalings start uniform in `[-1, 1)` from the given seed.
    Random(u64),
}

/// Solver knobs; `support` masks forbidden pairings when sparsification is
/// on.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_iters: usize,
    pub tolerance: f64,
    pub init: ScalingInit,
    pub support: Option<Array2<bool>>,
    /// Stabilizer when dividing transported semantics by row mass.
    pub eps_target: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iters: 30,
            tolerance: 1e-7,
            init: ScalingInit::Zeros,
            support: None,
            eps_target: 1e-8,
        }
    }
}

impl SolveOptions {
    /// Iterate until the scalings genuinely stop moving. The verification
    /// suites use this; the edit loop keeps the cheap default budget.
    pub fn strict() -> Self {
        Self {
            max_iters: 500_000,
            tolerance: 1e-12,
            ..Self::default()
        }
    }
}

/// Solved coupling plus the per-Gaussian quantities later stages consume.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution {
    pub plan: Array2<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Row sums of the plan: transported mass per Gaussian.
    pub support_mass: Array1<f64>,
    /// `(num_gaussians, d_e)` mass-weighted semantic targets.
    pub semantic_target: Array2<f64>,
}

/// Source masses for one view: visibility times opacity, normalized to sum
/// to one over visible Gaussians.
///
/// Returns ids parallel to the masses. Gaussians whose composited footprint
/// mass underflowed to zero are omitted; they cannot carry transport mass.
pub fn source_masses(
    render: &RenderOutput,
    scene: &[Gaussian],
) -> Result<(Vec<u64>, Array1<f64>), TransportError> {
    let opacity_of = |id: u64| -> Result<f64, TransportError> {
        scene
            .iter()
            .find(|g| g.id == id)
            .map(|g| g.opacity)
            .ok_or(TransportError::UnknownGaussian(id))
    };
    let mut ids = Vec::new();
    let mut raw = Vec::new();
    for (idx, &id) in render.visible.iter().enumerate() {
        let nu = render.visibility[idx];
        let value = nu * opacity_of(id)?;
        if value > 0.0 {
            ids.push(id);
            raw.push(value);
        }
    }
    let total: f64 = raw.iter().sum();
    if ids.is_empty() || total.is_nan() || total <= 0.0 {
        return Err(TransportError::NoVisibleGaussians);
    }
    Ok((ids, Array1::from_vec(raw) / total))
}

/// Footprint-weighted average of the appearance raster under a Gaussian,
/// unit-normalized with stabilizer `eps`.
pub fn gaussian_appearance_descriptor(
    render: &RenderOutput,
    appearance: &ndarray::Array3<f64>,
    id: u64,
    eps: f64,
) -> Result<Array1<f64>, TransportError> {
    let idx = render.index_of(id).ok_or(TransportError::NotVisible(id))?;
    let channels = appearance.shape()[2];
    let mut acc = Array1::<f64>::zeros(channels);
    let mut mass = 0.0;
    for p in &render.footprints[idx].pixels {
        let (y, x) = (p.y as usize, p.x as usize);
        mass += p.kappa;
        for c in 0..channels {
            acc[c] += p.kappa * appearance[[y, x, c]];
        }
    }
    if mass.is_nan() || mass <= 0.0 {
        return Err(TransportError::ZeroFootprintMass(id));
    }
    acc.mapv_inplace(|v| v / mass);
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(acc.mapv(|v| v / (norm + eps)))
}

fn cosine_distance(a: &Array1<f64>, b: &Array1<f64>, delta: f64) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    1.0 - dot / (na * nb + delta)
}

/// Pairing costs between the listed Gaussians and the view's prototypes.
///
/// Geometry compares the projected center against the prototype centroid
/// with pixel distances divided by the image diagonal; semantics and
/// appearance use stabilized cosine distance (appearance optionally squared
/// Euclidean).
#[allow(clippy::too_many_arguments)]
pub fn cost_matrix(
    scene: &[Gaussian],
    camera: &Camera,
    render: &RenderOutput,
    ids: &[u64],
    prototypes: &[Prototype],
    appearance: &ndarray::Array3<f64>,
    weights: &CostWeights,
    depth_epsilon: f64,
) -> Result<Array2<f64>, TransportError> {
    if ids.is_empty() || prototypes.is_empty() {
        return Err(TransportError::EmptyProblem);
    }
    let semantic_dim = scene.first().map_or(0, |g| g.semantic_latent.len());
    for p in prototypes {
        if p.semantic.len() != semantic_dim {
            return Err(TransportError::DimensionMismatch(
                p.semantic.len(),
                semantic_dim,
            ));
        }
        if p.appearance.len() != appearance.shape()[2] {
            return Err(TransportError::DimensionMismatch(
                p.appearance.len(),
                appearance.shape()[2],
            ));
        }
    }
    let diag = f64::from(camera.width).hypot(f64::from(camera.height));
    let mut cost = Array2::<f64>::zeros((ids.len(), prototypes.len()));
    for (i, &id) in ids.iter().enumerate() {
        let g = scene
            .iter()
            .find(|g| g.id == id)
            .ok_or(TransportError::UnknownGaussian(id))?;
        let projected: Vector2<f64> = camera
            .project(&g.center, depth_epsilon)
            .map_err(|_| TransportError::ProjectionFailed(id))?;
        let descriptor = gaussian_appearance_descriptor(render, appearance, id, weights.delta)?;
        for (m, proto) in prototypes.iter().enumerate() {
            let geo = ((projected - proto.position) / diag).norm_squared();
            let sem = cosine_distance(&g.semantic_latent, &proto.semantic, weights.delta);
            let app = match weights.appearance_metric {
                AppearanceMetric::Cosine => {
                    cosine_distance(&descriptor, &proto.appearance, weights.delta)
                }
                AppearanceMetric::SquaredL2 => descriptor
                    .iter()
                    .zip(proto.appearance.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum(),
            };
            cost[[i, m]] =
                weights.lambda_geo * geo + weights.lambda_sem * sem + weights.lambda_app * app;
        }
    }
    Ok(cost)
}

/// Keep the `k` cheapest Gaussians per prototype; everything else is
/// forbidden. Ties break toward lower row index.
pub fn top_k_support(cost: &Array2<f64>, k: usize) -> Array2<bool> {
    let (n, m) = cost.dim();
    let mut support = Array2::<bool>::from_elem((n, m), false);
    for j in 0..m {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| cost[[a, j]].total_cmp(&cost[[b, j]]).then(a.cmp(&b)));
        for &i in order.iter().take(k.max(1)) {
            support[[i, j]] = true;
        }
    }
    support
}

/// Generalized KL divergence `sum x ln(x/y) - x + y` with `0 ln 0 = 0`.
fn generalized_kl<'a>(pairs: impl Iterator<Item = (&'a f64, &'a f64)>) -> f64 {
    let mut total = 0.0;
    for (&x, &y) in pairs {
        if x > 0.0 {
            total += x * (x / y).ln() - x + y;
        } else {
            total += y;
        }
    }
    total
}

/// Objective value of an arbitrary non-negative plan for this problem.
pub fn uot_objective(
    plan: &Array2<f64>,
    problem: &TransportProblem,
) -> Result<f64, TransportError> {
    if plan.dim() != problem.cost.dim() {
        return Err(TransportError::PlanShape {
            expected: problem.cost.dim(),
            actual: plan.dim(),
        });
    }
    if let Some(&bad) = plan.iter().find(|&&t| t < 0.0 || !t.is_finite()) {
        return Err(TransportError::NegativePlanEntry(bad));
    }
    let transport_cost: f64 = plan
        .iter()
        .zip(problem.cost.iter())
        .map(|(&t, &c)| t * c)
        .sum();

    let mut entropic = 0.0;
    for i in 0..problem.num_sources() {
        for j in 0..problem.num_targets() {
            let t = plan[[i, j]];
            let ab = problem.source_mass[i] * problem.target_mass[j];
            entropic += if t > 0.0 {
                t * (t / ab).ln() - t + ab
            } else {
                ab
            };
        }
    }

    let row = plan.sum_axis(Axis(1));
    let col = plan.sum_axis(Axis(0));
    let source_kl = generalized_kl(row.iter().zip(problem.source_mass.iter()));
    let target_kl = generalized_kl(col.iter().zip(problem.target_mass.iter()));

    Ok(transport_cost
        + problem.epsilon * entropic
        + problem.tau_source * source_kl
        + problem.tau_target * target_kl)
}

/// Solve the relaxed coupling and pool prototype semantics through it.
///
/// `prototype_semantics` is `(num_prototypes, d_e)`, one row per prototype.
/// Row `i` of the returned `semantic_target` is
/// `sum_m T[i, m] e_m / (support_mass[i] + eps_target)`.
pub fn solve_uot(
    problem: &TransportProblem,
    prototype_semantics: &Array2<f64>,
    opts: &SolveOptions,
) -> Result<TransportSolution, TransportError> {
    let (n, m) = problem.cost.dim();
    if prototype_semantics.nrows() != m {
        return Err(TransportError::SemanticRows(prototype_semantics.nrows(), m));
    }
    if let Some(support) = &opts.support {
        if support.dim() != (n, m) {
            return Err(TransportError::PlanShape {
                expected: (n, m),
                actual: support.dim(),
            });
        }
    }
    let active = |i: usize, j: usize| opts.support.as_ref().is_none_or(|s| s[[i, j]]);

    let eps = problem.epsilon;
    let f_source = problem.tau_source / (problem.tau_source + eps);
    let f_target = problem.tau_target / (problem.tau_target + eps);
    let log_a: Vec<f64> = problem.source_mass.iter().map(|a| a.ln()).collect();
    let log_b: Vec<f64> = problem.target_mass.iter().map(|b| b.ln()).collect();

    let row_active: Vec<bool> = (0..n).map(|i| (0..m).any(|j| active(i, j))).collect();
    let col_active: Vec<bool> = (0..m).map(|j| (0..n).any(|i| active(i, j))).collect();

    let (mut log_u, mut log_v) = match opts.init {
        ScalingInit::Zeros => (vec![0.0; n], vec![0.0; m]),
        ScalingInit::Random(seed) => {
            let mut rng = stage_rng(seed, "transport-init", 0);
            let mut draw = |len: usize| -> Vec<f64> {
                (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            (draw(n), draw(m))
        }
    };
    for (i, lu) in log_u.iter_mut().enumerate() {
        if !row_active[i] {
            *lu = 0.0;
        }
    }
    for (j, lv) in log_v.iter_mut().enumerate() {
        if !col_active[j] {
            *lv = 0.0;
        }
    }

    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..opts.max_iters {
        iterations += 1;
        let mut delta = 0.0f64;

        for i in 0..n {
            if !row_active[i] {
                continue;
            }
            // log (Kv)_i - log a_i = LSE_j [ log b_j - C_ij/eps + log v_j ]
            let mut peak = f64::NEG_INFINITY;
            for j in 0..m {
                if active(i, j) {
                    peak = peak.max(log_b[j] - problem.cost[[i, j]] / eps + log_v[j]);
                }
            }
            let mut sum = 0.0;
            for j in 0..m {
                if active(i, j) {
                    sum += (log_b[j] - problem.cost[[i, j]] / eps + log_v[j] - peak).exp();
                }
            }
            let next = -f_source * (peak + sum.ln());
            if !next.is_finite() {
                return Err(TransportError::NumericalOverflow);
            }
            delta = delta.max((next - log_u[i]).abs());
            log_u[i] = next;
        }

        for j in 0..m {
            if !col_active[j] {
                continue;
            }
            let mut peak = f64::NEG_INFINITY;
            for i in 0..n {
                if active(i, j) {
                    peak = peak.max(log_a[i] - problem.cost[[i, j]] / eps + log_u[i]);
                }
            }
            let mut sum = 0.0;
            for i in 0..n {
                if active(i, j) {
                    sum += (log_a[i] - problem.cost[[i, j]] / eps + log_u[i] - peak).exp();
                }
            }
            let next = -f_target * (peak + sum.ln());
            if !next.is_finite() {
                return Err(TransportError::NumericalOverflow);
            }
            delta = delta.max((next - log_v[j]).abs());
            log_v[j] = next;
        }

        if delta < opts.tolerance {
            converged = true;
            break;
        }
    }

    let mut plan = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            if active(i, j) && row_active[i] && col_active[j] {
                plan[[i, j]] =
                    (log_u[i] + log_v[j] + log_a[i] + log_b[j] - problem.cost[[i, j]] / eps).exp();
            }
        }
    }
    if !plan.iter().all(|t| t.is_finite()) {
        return Err(TransportError::NumericalOverflow);
    }

    let support_mass = plan.sum_axis(Axis(1));
    let mut semantic_target = plan.dot(prototype_semantics);
    for (mut row, &w) in semantic_target
        .rows_mut()
        .into_iter()
        .zip(support_mass.iter())
    {
        row.mapv_inplace(|v| v / (w + opts.eps_target));
    }
    let objective = uot_objective(&plan, problem)?;

    Ok(TransportSolution {
        plan,
        objective,
        iterations,
        converged,
        support_mass,
        semantic_target,
    })
}

/// Stack prototype semantic descriptors into a `(num_prototypes, d_e)` matrix.
pub fn semantics_matrix(prototypes: &[Prototype]) -> Array2<f64> {
    let m = prototypes.len();
    let d = prototypes.first().map_or(0, |p| p.semantic.len());
    let mut out = Array2::<f64>::zeros((m, d));
    for (i, p) in prototypes.iter().enumerate() {
        out.row_mut(i).assign(&p.semantic);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Footprint, FootprintPixel};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};

    // Per Gaussian: id and its (x, y, weight, kappa) pixels.
    type FakeSplats = Vec<(u64, Vec<(u32, u32, f64, f64)>)>;

    fn fake_render(entries: FakeSplats) -> RenderOutput {
        let mut visible = Vec::new();
        let mut footprints = Vec::new();
        let mut visibility = Vec::new();
        for (id, pixels) in entries {
            visible.push(id);
            let pixels: Vec<FootprintPixel> = pixels
                .into_iter()
                .map(|(y, x, weight, kappa)| FootprintPixel {
                    y,
                    x,
                    weight,
                    kappa,
                })
                .collect();
            let w: f64 = pixels.iter().map(|p| p.weight).sum();
            let k: f64 = pixels.iter().map(|p| p.kappa).sum();
            visibility.push((k / w).clamp(0.0, 1.0));
            footprints.push(Footprint { pixels });
        }
        RenderOutput {
            image: Array3::zeros((4, 4, 3)),
            visible,
            footprints,
            visibility,
        }
    }

    fn plain_gaussian(id: u64, opacity: f64) -> Gaussian {
        Gaussian {
            id,
            center: nalgebra::Vector3::new(0.0, 0.0, 2.0),
            covariance: nalgebra::Matrix3::identity() * 1e-2,
            color: nalgebra::Vector3::new(0.5, 0.5, 0.5),
            opacity,
            semantic_latent: Array1::from_vec(vec![1.0, 0.0]),
            original_color: nalgebra::Vector3::new(0.5, 0.5, 0.5),
        }
    }

    #[test]
    fn source_masses_multiply_visibility_and_opacity() {
        let render = fake_render(vec![
            (1, vec![(0, 0, 1.0, 1.0)]),
            (2, vec![(0, 1, 1.0, 0.5)]),
            (3, vec![(0, 2, 1.0, 0.25)]),
        ]);
        let scene: Vec<Gaussian> = [1, 2, 3].map(|id| plain_gaussian(id, 0.8)).to_vec();
        let (ids, masses) = source_masses(&render, &scene).unwrap();
        assert_eq!(ids, vec![1, 2, 3]);
        assert_abs_diff_eq!(masses[0], 4.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(masses[1], 2.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(masses[2], 1.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(masses.sum(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn fully_occluded_gaussian_is_dropped_from_masses() {
        let render = fake_render(vec![
            (1, vec![(0, 0, 1.0, 1.0)]),
            (2, vec![(0, 0, 1.0, 0.0)]),
        ]);
        let scene: Vec<Gaussian> = [1, 2].map(|id| plain_gaussian(id, 0.5)).to_vec();
        let (ids, masses) = source_masses(&render, &scene).unwrap();
        assert_eq!(ids, vec![1]);
        assert_abs_diff_eq!(masses[0], 1.0);
    }

    #[test]
    fn appearance_descriptor_pools_by_kappa() {
        let render = fake_render(vec![(5, vec![(0, 0, 0.3, 0.3), (0, 1, 0.2, 0.1)])]);
        let mut raster = Array3::<f64>::zeros((4, 4, 2));
        raster[[0, 0, 0]] = 1.0;
        raster[[0, 1, 1]] = 1.0;
        let desc = gaussian_appearance_descriptor(&render, &raster, 5, 0.0).unwrap();
        // Pooled vector (0.75, 0.25), then unit-normalized.
        let norm = (0.75f64 * 0.75 + 0.25 * 0.25).sqrt();
        assert_abs_diff_eq!(desc[0], 0.75 / norm, epsilon = 1e-12);
        assert_abs_diff_eq!(desc[1], 0.25 / norm, epsilon = 1e-12);
        assert!(matches!(
            gaussian_appearance_descriptor(&render, &raster, 9, 0.0),
            Err(TransportError::NotVisible(9))
        ));
    }

    #[test]
    fn aligned_pair_costs_nothing_orthogonal_semantics_cost_one() {
        let camera = Camera {
            rotation: nalgebra::Matrix3::identity(),
            translation: nalgebra::Vector3::zeros(),
            focal: nalgebra::Vector2::new(2.0, 2.0),
            principal_point: nalgebra::Vector2::new(2.0, 2.0),
            width: 4,
            height: 4,
        };
        let g = plain_gaussian(1, 0.5);
        let render = fake_render(vec![(1, vec![(2, 2, 0.5, 0.5)])]);
        let mut raster = Array3::<f64>::zeros((4, 4, 2));
        raster[[2, 2, 0]] = 1.0;
        let aligned = Prototype {
            position: nalgebra::Vector2::new(2.0, 2.0),
            semantic: Array1::from_vec(vec![1.0, 0.0]),
            appearance: Array1::from_vec(vec![1.0, 0.0]),
            mass: 1.0,
            pixel_count: 1,
        };
        let mut orthogonal = aligned.clone();
        orthogonal.semantic = Array1::from_vec(vec![0.0, 1.0]);
        let cost = cost_matrix(
            &[g],
            &camera,
            &render,
            &[1],
            &[aligned, orthogonal],
            &raster,
            &CostWeights::default(),
            1e-6,
        )
        .unwrap();
        // Perfect geometric, semantic and appearance match.
        assert_abs_diff_eq!(cost[[0, 0]], 0.0, epsilon = 1e-7);
        // Same position/appearance but orthogonal semantics adds lambda_sem * 1.
        assert_abs_diff_eq!(cost[[0, 1]], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn geometry_term_is_normalized_by_image_diagonal() {
        let camera = Camera {
            rotation: nalgebra::Matrix3::identity(),
            translation: nalgebra::Vector3::zeros(),
            focal: nalgebra::Vector2::new(2.0, 2.0),
            principal_point: nalgebra::Vector2::new(0.0, 0.0),
            width: 3,
            height: 4,
        };
        let g = plain_gaussian(1, 0.5);
        let render = fake_render(vec![(1, vec![(0, 0, 0.5, 0.5)])]);
        let raster = Array3::<f64>::from_elem((4, 3, 1), 1.0);
        let proto = Prototype {
            position: nalgebra::Vector2::new(0.0, 5.0),
            semantic: Array1::from_vec(vec![1.0, 0.0]),
            appearance: Array1::from_vec(vec![1.0]),
            mass: 1.0,
            pixel_count: 1,
        };
        let weights = CostWeights {
            lambda_geo: 1.0,
            lambda_sem: 0.0,
            lambda_app: 0.0,
            ..CostWeights::default()
        };
        let cost = cost_matrix(
            &[g],
            &camera,
            &render,
            &[1],
            &[proto],
            &raster,
            &weights,
            1e-6,
        )
        .unwrap();
        // Projection lands at (0, 0); offset 5px over a 5px diagonal.
        assert_abs_diff_eq!(cost[[0, 0]], 1.0, epsilon = 1e-12);
    }

    fn toy_problem() -> TransportProblem {
        TransportProblem::new(
            array![[0.1, 1.0], [0.8, 0.2], [0.5, 0.5]],
            array![0.5, 0.3, 0.2],
            array![0.6, 0.4],
            0.1,
            1.0,
            1.0,
            vec![10, 11, 12],
        )
        .unwrap()
    }

    #[test]
    fn zero_cost_unit_masses_couple_independently() {
        // With C = 0 and both marginals summing to one, T = a b^T reaches
        // objective zero, which is the unique optimum.
        let problem = TransportProblem::new(
            Array2::zeros((2, 2)),
            array![0.5, 0.5],
            array![0.3, 0.7],
            0.5,
            1.0,
            2.0,
            vec![0, 1],
        )
        .unwrap();
        let semantics = Array2::zeros((2, 3));
        let sol = solve_uot(&problem, &semantics, &SolveOptions::strict()).unwrap();
        assert!(sol.converged);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(
                    sol.plan[[i, j]],
                    problem.source_mass[i] * problem.target_mass[j],
                    epsilon = 1e-9
                );
            }
        }
        assert_abs_diff_eq!(sol.objective, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn solution_bookkeeping_holds() {
        let problem = toy_problem();
        let semantics = array![[1.0, 0.0], [0.0, 1.0]];
        let sol = solve_uot(&problem, &semantics, &SolveOptions::strict()).unwrap();
        assert!(sol.converged);
        assert!(sol.plan.iter().all(|&t| t > 0.0));
        for i in 0..3 {
            let w: f64 = (0..2).map(|j| sol.plan[[i, j]]).sum();
            assert_abs_diff_eq!(sol.support_mass[i], w, epsilon = 1e-15);
            // y_i is a slightly shrunk convex combination of the rows of e.
            let y0 = sol.semantic_target[[i, 0]];
            let y1 = sol.semantic_target[[i, 1]];
            assert_abs_diff_eq!(y0 + y1, w / (w + 1e-8), epsilon = 1e-12);
            assert!(y0 >= 0.0 && y1 >= 0.0);
        }
    }

    #[test]
    fn objective_matches_direct_formula() {
        let problem = TransportProblem::new(
            array![[2.0]],
            array![0.4],
            array![1.0],
            0.5,
            1.0,
            2.0,
            vec![7],
        )
        .unwrap();
        let plan = array![[0.2]];
        let value = uot_objective(&plan, &problem).unwrap();
        let kl = |x: f64, y: f64| x * (x / y).ln() - x + y;
        let expected = 0.2 * 2.0 + 0.5 * kl(0.2, 0.4) + 1.0 * kl(0.2, 0.4) + 2.0 * kl(0.2, 1.0);
        assert_abs_diff_eq!(value, expected, epsilon = 1e-14);
    }

    #[test]
    fn empty_plan_pays_the_marginal_penalties() {
        let problem = toy_problem();
        let plan = Array2::zeros((3, 2));
        let value = uot_objective(&plan, &problem).unwrap();
        let sum_ab: f64 = 1.0; // masses each sum to one
        let expected = problem.epsilon * sum_ab + problem.tau_source + problem.tau_target;
        assert_abs_diff_eq!(value, expected, epsilon = 1e-12);
    }

    #[test]
    fn unconverged_run_reports_it() {
        let problem = toy_problem();
        let semantics = array![[1.0, 0.0], [0.0, 1.0]];
        let opts = SolveOptions {
            max_iters: 1,
            tolerance: 1e-16,
            ..SolveOptions::default()
        };
        let sol = solve_uot(&problem, &semantics, &opts).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn masked_pairs_carry_no_mass() {
        let problem = toy_problem();
        let semantics = array![[1.0, 0.0], [0.0, 1.0]];
        let mut support = Array2::from_elem((3, 2), true);
        support[[2, 0]] = false;
        support[[2, 1]] = false; // row 2 fully masked
        support[[1, 0]] = false;
        let opts = SolveOptions {
            support: Some(support),
            ..SolveOptions::strict()
        };
        let sol = solve_uot(&problem, &semantics, &opts).unwrap();
        assert_eq!(sol.plan[[2, 0]], 0.0);
        assert_eq!(sol.plan[[2, 1]], 0.0);
        assert_eq!(sol.plan[[1, 0]], 0.0);
        assert!(sol.plan[[0, 0]] > 0.0);
        assert_eq!(sol.support_mass[2], 0.0);
        // Masked-out row gets a zero semantic target.
        assert_eq!(sol.semantic_target[[2, 0]], 0.0);
    }

    #[test]
    fn top_k_keeps_cheapest_rows_per_column() {
        let cost = array![[0.5, 0.9], [0.1, 0.9], [0.7, 0.2]];
        let support = top_k_support(&cost, 1);
        assert_eq!(
            support,
            array![[false, false], [true, false], [false, true]]
        );
        let all = top_k_support(&cost, 10);
        assert!(all.iter().all(|&s| s));
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let err = TransportProblem::new(
            array![[0.0]],
            array![0.0],
            array![1.0],
            0.1,
            1.0,
            1.0,
            vec![1],
        )
        .unwrap_err();
        assert!(matches!(err, TransportError::NonPositiveSourceMass(_)));

        let err = TransportProblem::new(
            array![[f64::NAN]],
            array![1.0],
            array![1.0],
            0.1,
            1.0,
            1.0,
            vec![1],
        )
        .unwrap_err();
        assert!(matches!(err, TransportError::NonFinite));

        let err = TransportProblem::new(
            array![[0.0]],
            array![1.0],
            array![1.0],
            0.0,
            1.0,
            1.0,
            vec![1],
        )
        .unwrap_err();
        assert!(matches!(err, TransportError::NonPositiveRegularization));

        let err = TransportProblem::new(
            array![[0.0, 1.0]],
            array![1.0],
            array![1.0],
            0.1,
            1.0,
            1.0,
            vec![1],
        )
        .unwrap_err();
        assert!(matches!(err, TransportError::ShapeMismatch { .. }));
    }
}
