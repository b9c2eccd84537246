//! Residual gating and the edit losses.
//!
//! A Gaussian that wanted more transport mass than it received is weakly
//! explained by the edit evidence; its unmatched demand is the residual
//! `r = sum_v omega_v max(a_v - w_v, 0)` (or the clipped weighted mean,
//! depending on mode). The gate `gamma = exp(-r / (tau_r + delta))` scales
//! how much of the fused target the Gaussian adopts, and also how strongly
//! the leakage penalty pins its color to the original.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{GateConfig, LeakNorm, LossWeights, ResidualMode};
use crate::scene::{Gaussian, RenderOutput};

#[derive(Debug, Error)]
pub enum GatingError {
    #[error("source and transported mass view sets differ")]
    MisalignedViews,
    #[error("fusion weights refer to view {0} with no mass entry")]
    UnknownView(usize),
    #[error("gate scale tau_r + delta must be positive")]
    NonPositiveScale,
    #[error("gate value {0} outside [0, 1]")]
    InvalidGate(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("per-gaussian arrays have length {got}, scene has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("view {view}: rendered and edited image shapes differ")]
    ImageShape { view: usize },
    #[error("gaussian {0} from a footprint is missing from the scene")]
    UnknownGaussian(u64),
}

/// Residuals and gate of one Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    /// Clipped per-view residuals `max(a_v - w_v, 0)` for every aligned view.
    pub view_residuals: BTreeMap<usize, f64>,
    /// Fusion-weighted aggregate the gate is computed from.
    pub aggregated_residual: f64,
    pub gate: f64,
}

/// Compute per-view residuals and the gate for one Gaussian.
///
/// `source_mass` and `transported_mass` must cover the same views; the
/// aggregation runs over the views present in `weights` (the valid views).
/// With no valid views the residual is zero and the gate stays fully open.
pub fn residuals_and_gate(
    source_mass: &BTreeMap<usize, f64>,
    transported_mass: &BTreeMap<usize, f64>,
    weights: &BTreeMap<usize, f64>,
    cfg: &GateConfig,
) -> Result<GateState, GatingError> {
    if source_mass.keys().ne(transported_mass.keys()) {
        return Err(GatingError::MisalignedViews);
    }
    let scale = cfg.tau_r + cfg.delta;
    if scale.is_nan() || scale <= 0.0 {
        return Err(GatingError::NonPositiveScale);
    }
    let mut view_residuals = BTreeMap::new();
    for (&view, &a) in source_mass {
        let w = transported_mass[&view];
        view_residuals.insert(view, (a - w).max(0.0));
    }

    let mut aggregated = 0.0;
    for (&view, &omega) in weights {
        let a = source_mass
            .get(&view)
            .ok_or(GatingError::UnknownView(view))?;
        let w = transported_mass[&view];
        match cfg.residual_mode {
            ResidualMode::ClipThenAggregate => aggregated += omega * (a - w).max(0.0),
            ResidualMode::AggregateThenClip => aggregated += omega * (a - w),
        }
    }
    if cfg.residual_mode == ResidualMode::AggregateThenClip {
        aggregated = aggregated.max(0.0);
    }

    Ok(GateState {
        view_residuals,
        aggregated_residual: aggregated,
        gate: (-aggregated / scale).exp(),
    })
}

/// Blend the fused target with the current latent: `gamma z + (1 - gamma) s`.
pub fn gated_target(
    gate: f64,
    canonical: &ArrayView1<f64>,
    latent: &ArrayView1<f64>,
) -> Result<Array1<f64>, GatingError> {
    if !(0.0..=1.0).contains(&gate) {
        return Err(GatingError::InvalidGate(gate));
    }
    if canonical.len() != latent.len() {
        return Err(GatingError::DimensionMismatch(
            canonical.len(),
            latent.len(),
        ));
    }
    Ok(canonical * gate + latent * (1.0 - gate))
}

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_img: f64,
    pub l_sem: f64,
    pub l_uot: f64,
    pub l_leak: f64,
    pub total: f64,
}

/// One view's contribution to the losses.
#[derive(Debug)]
pub struct ViewLossInputs<'a> {
    pub render: &'a RenderOutput,
    pub edited_image: &'a Array3<f64>,
    pub transport_objective: f64,
}

/// Everything the losses see at one step. `gates` and rows of `canonical`
/// are per Gaussian in scene order.
#[derive(Debug)]
pub struct SceneLossInputs<'a> {
    pub scene: &'a [Gaussian],
    pub views: &'a [ViewLossInputs<'a>],
    pub gates: &'a [f64],
    pub canonical: &'a Array2<f64>,
}

fn check_inputs(inputs: &SceneLossInputs) -> Result<(), GatingError> {
    let n = inputs.scene.len();
    if inputs.gates.len() != n {
        return Err(GatingError::LengthMismatch {
            expected: n,
            got: inputs.gates.len(),
        });
    }
    if inputs.canonical.nrows() != n {
        return Err(GatingError::LengthMismatch {
            expected: n,
            got: inputs.canonical.nrows(),
        });
    }
    let dim = inputs.scene.first().map_or(0, |g| g.semantic_latent.len());
    if inputs.canonical.ncols() != dim {
        return Err(GatingError::DimensionMismatch(
            inputs.canonical.ncols(),
            dim,
        ));
    }
    if let Some(&g) = inputs.gates.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(GatingError::InvalidGate(g));
    }
    for (view, v) in inputs.views.iter().enumerate() {
        if v.render.image.shape() != v.edited_image.shape() {
            return Err(GatingError::ImageShape { view });
        }
    }
    Ok(())
}

/// Evaluate the four loss terms and their weighted total.
///
/// The semantic term treats the canonical targets as constants; the
/// transport term is the sum of per-view solved objectives, also constant
/// within a step.
pub fn compute_losses(
    inputs: &SceneLossInputs,
    weights: &LossWeights,
) -> Result<LossReport, GatingError> {
    check_inputs(inputs)?;

    let mut l_img = 0.0;
    let mut l_uot = 0.0;
    for v in inputs.views {
        l_img += v
            .render
            .image
            .iter()
            .zip(v.edited_image.iter())
            .map(|(r, e)| (r - e).abs())
            .sum::<f64>();
        l_uot += v.transport_objective;
    }

    let mut l_sem = 0.0;
    let mut l_leak = 0.0;
    for (i, g) in inputs.scene.iter().enumerate() {
        let gamma = inputs.gates[i];
        let dz = &g.semantic_latent - &inputs.canonical.row(i);
        l_sem += gamma * dz.iter().map(|v| v * v).sum::<f64>();
        let drift = g.color - g.original_color;
        l_leak += (1.0 - gamma)
            * match weights.leak_norm {
                LeakNorm::L1 => drift.iter().map(|v| v.abs()).sum::<f64>(),
                LeakNorm::SquaredL2 => drift.norm_squared(),
            };
    }

    Ok(LossReport {
        l_img,
        l_sem,
        l_uot,
        l_leak,
        total: weights.lambda_img * l_img
            + weights.lambda_sem * l_sem
            + weights.lambda_uot * l_uot
            + weights.lambda_leak * l_leak,
    })
}

/// Analytic gradients of the weighted total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    /// `(num_gaussians, d_e)` gradient w.r.t. semantic latents.
    pub semantic: Array2<f64>,
    /// `(num_gaussians, 3)` gradient w.r.t. colors.
    pub color: Array2<f64>,
}

fn subgradient_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients w.r.t. each Gaussian's semantic latent and color.
///
/// Latents feel only the gated semantic pull `2 lambda_sem gamma (s - z)`.
/// Colors feel the image term through the composited footprints (the image
/// is linear in colors with coefficient `kappa`) plus the gated leakage
/// pull toward the original color. Transport plans are constants within a
/// step, so the transport term contributes nothing.
pub fn loss_gradients(
    inputs: &SceneLossInputs,
    weights: &LossWeights,
) -> Result<LossGradients, GatingError> {
    check_inputs(inputs)?;
    let n = inputs.scene.len();
    let dim = inputs.scene.first().map_or(0, |g| g.semantic_latent.len());
    let mut semantic = Array2::<f64>::zeros((n, dim));
    let mut color = Array2::<f64>::zeros((n, 3));

    let index_of: BTreeMap<u64, usize> = inputs
        .scene
        .iter()
        .enumerate()
        .map(|(i, g)| (g.id, i))
        .collect();

    for (i, g) in inputs.scene.iter().enumerate() {
        let gamma = inputs.gates[i];
        let pull = 2.0 * weights.lambda_sem * gamma;
        let dz = &g.semantic_latent - &inputs.canonical.row(i);
        semantic.row_mut(i).assign(&(dz * pull));

        let drift = g.color - g.original_color;
        for c in 0..3 {
            color[[i, c]] = weights.lambda_leak
                * (1.0 - gamma)
                * match weights.leak_norm {
                    LeakNorm::L1 => subgradient_sign(drift[c]),
                    LeakNorm::SquaredL2 => 2.0 * drift[c],
                };
        }
    }

    for v in inputs.views {
        for (slot, &id) in v.render.visible.iter().enumerate() {
            let &i = index_of.get(&id).ok_or(GatingError::UnknownGaussian(id))?;
            for p in &v.render.footprints[slot].pixels {
                let (y, x) = (p.y as usize, p.x as usize);
                for c in 0..3 {
                    let diff = v.render.image[[y, x, c]] - v.edited_image[[y, x, c]];
                    color[[i, c]] += weights.lambda_img * subgradient_sign(diff) * p.kappa;
                }
            }
        }
    }

    Ok(LossGradients { semantic, color })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Footprint, FootprintPixel};
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix3, Vector3};
    use ndarray::{array, Array3};

    fn map(pairs: Vec<(usize, f64)>) -> BTreeMap<usize, f64> {
        pairs.into_iter().collect()
    }

    #[test]
    fn unmatched_demand_closes_the_gate() {
        let cfg = GateConfig::default();
        let state = residuals_and_gate(
            &map(vec![(0, 0.4)]),
            &map(vec![(0, 0.1)]),
            &map(vec![(0, 1.0)]),
            &cfg,
        )
        .unwrap();
        assert_abs_diff_eq!(state.aggregated_residual, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(state.gate, (-0.3f64 / (0.1 + 1e-8)).exp(), epsilon = 1e-15);
        assert!(state.gate < 0.05);
    }

    #[test]
    fn satisfied_demand_keeps_the_gate_fully_open() {
        let cfg = GateConfig::default();
        let state = residuals_and_gate(
            &map(vec![(0, 0.2), (1, 0.3)]),
            &map(vec![(0, 0.2), (1, 0.5)]),
            &map(vec![(0, 0.5), (1, 0.5)]),
            &cfg,
        )
        .unwrap();
        assert_eq!(state.aggregated_residual, 0.0);
        assert_eq!(state.gate, 1.0);
    }

    #[test]
    fn clip_order_changes_the_residual() {
        // One view over-satisfied, one under-satisfied, equal weights.
        let source = map(vec![(0, 0.5), (1, 0.2)]);
        let transported = map(vec![(0, 0.2), (1, 0.5)]);
        let weights = map(vec![(0, 0.5), (1, 0.5)]);
        let mut cfg = GateConfig::default();

        let clipped = residuals_and_gate(&source, &transported, &weights, &cfg).unwrap();
        assert_abs_diff_eq!(clipped.aggregated_residual, 0.15, epsilon = 1e-15);
        assert_eq!(clipped.view_residuals[&0], 0.3);
        assert_eq!(clipped.view_residuals[&1], 0.0);

        cfg.residual_mode = ResidualMode::AggregateThenClip;
        let signed = residuals_and_gate(&source, &transported, &weights, &cfg).unwrap();
        assert_eq!(signed.aggregated_residual, 0.0);
        assert_eq!(signed.gate, 1.0);
        // Per-view residuals stay clipped in both modes.
        assert_eq!(signed.view_residuals[&0], 0.3);
    }

    #[test]
    fn no_valid_views_means_open_gate() {
        let cfg = GateConfig::default();
        let state = residuals_and_gate(
            &map(vec![(0, 0.4)]),
            &map(vec![(0, 0.0)]),
            &BTreeMap::new(),
            &cfg,
        )
        .unwrap();
        assert_eq!(state.gate, 1.0);
    }

    #[test]
    fn misaligned_views_are_rejected() {
        let cfg = GateConfig::default();
        assert!(matches!(
            residuals_and_gate(
                &map(vec![(0, 0.4)]),
                &map(vec![(1, 0.4)]),
                &BTreeMap::new(),
                &cfg
            ),
            Err(GatingError::MisalignedViews)
        ));
        assert!(matches!(
            residuals_and_gate(
                &map(vec![(0, 0.4)]),
                &map(vec![(0, 0.4)]),
                &map(vec![(3, 1.0)]),
                &cfg
            ),
            Err(GatingError::UnknownView(3))
        ));
    }

    #[test]
    fn gated_target_blends_linearly() {
        let z = array![1.0, 0.0];
        let s = array![0.0, 1.0];
        assert_eq!(gated_target(1.0, &z.view(), &s.view()).unwrap(), z);
        assert_eq!(gated_target(0.0, &z.view(), &s.view()).unwrap(), s);
        let half = gated_target(0.25, &z.view(), &s.view()).unwrap();
        assert_abs_diff_eq!(half[0], 0.25);
        assert_abs_diff_eq!(half[1], 0.75);
        assert!(gated_target(1.5, &z.view(), &s.view()).is_err());
    }

    fn gaussian_with(id: u64, latent: Vec<f64>, color: [f64; 3], original: [f64; 3]) -> Gaussian {
        Gaussian {
            id,
            center: Vector3::new(0.0, 0.0, 1.0),
            covariance: Matrix3::identity() * 1e-2,
            color: Vector3::new(color[0], color[1], color[2]),
            opacity: 0.5,
            semantic_latent: Array1::from_vec(latent),
            original_color: Vector3::new(original[0], original[1], original[2]),
        }
    }

    fn one_pixel_render(id: u64, kappa: f64) -> RenderOutput {
        RenderOutput {
            image: Array3::from_elem((1, 1, 3), 0.75),
            visible: vec![id],
            footprints: vec![Footprint {
                pixels: vec![FootprintPixel {
                    y: 0,
                    x: 0,
                    weight: kappa,
                    kappa,
                }],
            }],
            visibility: vec![1.0],
        }
    }

    #[test]
    fn losses_match_hand_computation() {
        let scene = vec![gaussian_with(
            1,
            vec![1.0, 0.0],
            [0.5, 0.5, 0.5],
            [0.4, 0.5, 0.5],
        )];
        let render = one_pixel_render(1, 0.6);
        let edited = Array3::from_elem((1, 1, 3), 0.25);
        let views = [ViewLossInputs {
            render: &render,
            edited_image: &edited,
            transport_objective: 2.5,
        }];
        let canonical = array![[0.0, 0.0]];
        let inputs = SceneLossInputs {
            scene: &scene,
            views: &views,
            gates: &[0.5],
            canonical: &canonical,
        };
        let weights = LossWeights::default();
        let report = compute_losses(&inputs, &weights).unwrap();
        assert_abs_diff_eq!(report.l_img, 3.0 * 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(report.l_sem, 0.5 * 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(report.l_uot, 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(report.l_leak, 0.5 * 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(
            report.total,
            1.0 * 1.5 + 1.0 * 0.5 + 0.01 * 2.5 + 0.5 * 0.05,
            epsilon = 1e-12
        );
    }

    #[test]
    fn semantic_gradient_vanishes_at_the_target() {
        let scene = vec![gaussian_with(1, vec![0.3, -0.2], [0.5; 3], [0.5; 3])];
        let render = one_pixel_render(1, 0.0);
        let edited = Array3::from_elem((1, 1, 3), 0.75);
        let views = [ViewLossInputs {
            render: &render,
            edited_image: &edited,
            transport_objective: 0.0,
        }];
        let canonical = array![[0.3, -0.2]];
        let inputs = SceneLossInputs {
            scene: &scene,
            views: &views,
            gates: &[0.8],
            canonical: &canonical,
        };
        let grads = loss_gradients(&inputs, &LossWeights::default()).unwrap();
        assert_eq!(grads.semantic, Array2::<f64>::zeros((1, 2)));
        // Color drift is zero and render matches edited, so no color pull.
        assert_eq!(grads.color, Array2::<f64>::zeros((1, 3)));
    }

    #[test]
    fn color_gradient_combines_image_sign_and_leak_pull() {
        let scene = vec![gaussian_with(
            1,
            vec![0.0],
            [0.6, 0.2, 0.5],
            [0.5, 0.5, 0.5],
        )];
        // Render brighter than edited in all channels: sign = +1.
        let render = one_pixel_render(1, 0.6);
        let edited = Array3::from_elem((1, 1, 3), 0.25);
        let views = [ViewLossInputs {
            render: &render,
            edited_image: &edited,
            transport_objective: 0.0,
        }];
        let canonical = array![[0.0]];
        let inputs = SceneLossInputs {
            scene: &scene,
            views: &views,
            gates: &[0.25],
            canonical: &canonical,
        };
        let weights = LossWeights::default();
        let grads = loss_gradients(&inputs, &weights).unwrap();
        // lambda_img * kappa + lambda_leak * (1 - gamma) * sign(drift)
        assert_abs_diff_eq!(grads.color[[0, 0]], 0.6 + 0.5 * 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(grads.color[[0, 1]], 0.6 - 0.5 * 0.75, epsilon = 1e-12);
        // Zero drift: leak subgradient is zero at the kink.
        assert_abs_diff_eq!(grads.color[[0, 2]], 0.6, epsilon = 1e-12);
    }

    #[test]
    fn squared_leak_norm_scales_with_drift() {
        let scene = vec![gaussian_with(1, vec![0.0], [0.7, 0.5, 0.5], [0.5; 3])];
        let render = one_pixel_render(1, 0.0);
        let edited = render.image.clone();
        let views = [ViewLossInputs {
            render: &render,
            edited_image: &edited,
            transport_objective: 0.0,
        }];
        let canonical = array![[0.0]];
        let inputs = SceneLossInputs {
            scene: &scene,
            views: &views,
            gates: &[0.0],
            canonical: &canonical,
        };
        let weights = LossWeights {
            leak_norm: LeakNorm::SquaredL2,
            ..LossWeights::default()
        };
        let report = compute_losses(&inputs, &weights).unwrap();
        assert_abs_diff_eq!(report.l_leak, 0.2 * 0.2, epsilon = 1e-12);
        let grads = loss_gradients(&inputs, &weights).unwrap();
        assert_abs_diff_eq!(grads.color[[0, 0]], 0.5 * 2.0 * 0.2, epsilon = 1e-12);
    }
}
