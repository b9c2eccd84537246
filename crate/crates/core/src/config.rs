//! Run configuration.
//!
//! Every tunable lives here with its default pinned, so a config file only
//! has to name the fields it overrides. All structs deserialize with
//! `serde(default)` and round-trip through JSON.

use serde::{Deserialize, Serialize};

/// Splat renderer knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Gaussians whose total footprint mass in a view falls below this are
    /// treated as invisible in that view.
    pub footprint_min: f64,
    /// Camera-space depth below this counts as behind the camera.
    pub depth_epsilon: f64,
    /// Splat support radius in units of the largest 2D standard deviation.
    pub cutoff_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            footprint_min: 1e-4,
            depth_epsilon: 1e-6,
            cutoff_sigma: 5.0,
        }
    }
}

/// How prototype masses are scaled.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MassMode {
    /// Region attention divided by total support attention; masses sum to 1.
    Normalized,
    /// Raw region attention sums.
    Raw,
}

/// Prototype extraction knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeConfig {
    /// Keep pixels whose normalized attention reaches this value.
    pub attention_threshold: f64,
    /// Drop 4-connected support components smaller than this many pixels.
    pub min_component: usize,
    /// Number of prototypes extracted per view.
    pub num_prototypes: usize,
    pub max_lloyd_iters: usize,
    pub mass_mode: MassMode,
    /// Stabilizer added to the attention maximum before normalizing.
    pub eps_attention: f64,
    /// Stabilizer in the semantic-descriptor unit normalization.
    pub eps_semantic: f64,
    /// Stabilizer in the appearance-descriptor unit normalization.
    pub eps_appearance: f64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            attention_threshold: 0.3,
            min_component: 4,
            num_prototypes: 32,
            max_lloyd_iters: 50,
            mass_mode: MassMode::Normalized,
            eps_attention: 1e-8,
            eps_semantic: 1e-8,
            eps_appearance: 1e-8,
        }
    }
}

/// Appearance term of the transport cost.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum AppearanceMetric {
    /// One minus stabilized cosine similarity.
    Cosine,
    /// Squared Euclidean distance between descriptors.
    SquaredL2,
}

/// Weights of the three transport cost terms.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub lambda_geo: f64,
    pub lambda_sem: f64,
    pub lambda_app: f64,
    pub appearance_metric: AppearanceMetric,
    /// Stabilizer in cosine denominators.
    pub delta: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda_geo: 1.0,
            lambda_sem: 1.0,
            lambda_app: 0.5,
            appearance_metric: AppearanceMetric::Cosine,
            delta: 1e-8,
        }
    }
}

/// Unbalanced transport solver knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    /// Entropic regularization strength.
    pub epsilon: f64,
    /// Source marginal relaxation strength.
    pub tau_source: f64,
    /// Target marginal relaxation strength.
    pub tau_target: f64,
    pub max_iters: usize,
    /// Scaling-update sup-norm threshold that counts as converged.
    pub tolerance: f64,
    /// Optional sparsification: keep this many cheapest Gaussians per
    /// prototype and forbid every other pairing. `None` solves dense.
    pub top_k: Option<usize>,
    pub weights: CostWeights,
    /// Stabilizer in the per-Gaussian appearance descriptor average.
    pub eps_descriptor: f64,
    /// Stabilizer when normalizing transported semantics by plan mass.
    pub eps_target: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            tau_source: 1.0,
            tau_target: 1.0,
            max_iters: 30,
            tolerance: 1e-7,
            top_k: None,
            weights: CostWeights::default(),
            eps_descriptor: 1e-8,
            eps_target: 1e-8,
        }
    }
}

/// Canonical fusion knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Anchor strength pulling the fused target toward the current latent.
    pub rho: f64,
    /// Stabilizer in the fusion-weight normalization.
    pub delta: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            delta: 1e-8,
        }
    }
}

/// Where the positive-part clip sits in residual aggregation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Clip each view's residual, then average: `sum_v w_v * max(a_v - m_v, 0)`.
    ClipThenAggregate,
    /// Average signed residuals, then clip the mean.
    AggregateThenClip,
}

/// Residual gate knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    /// Residual scale; larger values keep gates open longer.
    pub tau_r: f64,
    /// Stabilizer added to `tau_r` in the gate exponent.
    pub delta: f64,
    pub residual_mode: ResidualMode,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            tau_r: 0.1,
            delta: 1e-8,
            residual_mode: ResidualMode::ClipThenAggregate,
        }
    }
}

/// Norm used by the leakage penalty on color drift.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LeakNorm {
    L1,
    SquaredL2,
}

/// Loss term weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_img: f64,
    pub lambda_sem: f64,
    pub lambda_uot: f64,
    pub lambda_leak: f64,
    pub leak_norm: LeakNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_img: 1.0,
            lambda_sem: 1.0,
            lambda_uot: 0.01,
            lambda_leak: 0.5,
            leak_norm: LeakNorm::L1,
        }
    }
}

/// Full configuration of an edit run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub schedule: ScheduleConfig,
    pub render: RenderConfig,
    pub prototype: PrototypeConfig,
    pub transport: TransportConfig,
    pub fusion: FusionConfig,
    pub gate: GateConfig,
    pub losses: LossWeights,
}

/// Outer-loop schedule of an edit run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Transport/fusion refresh rounds.
    pub rounds: usize,
    /// Gradient steps per round.
    pub steps_per_round: usize,
    pub step_size: f64,
    /// Momentum of the exponential moving average over canonical targets.
    pub ema_momentum: f64,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            steps_per_round: 100,
            step_size: 0.05,
            ema_momentum: 0.9,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = EditConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: EditConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_config_keeps_defaults_elsewhere() {
        let cfg: EditConfig =
            serde_json::from_str(r#"{"transport": {"epsilon": 0.2}, "fusion": {"rho": 1.0}}"#)
                .unwrap();
        assert_eq!(cfg.transport.epsilon, 0.2);
        assert_eq!(cfg.fusion.rho, 1.0);
        assert_eq!(cfg.transport.tau_source, 1.0);
        assert_eq!(cfg.losses.lambda_leak, 0.5);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<EditConfig>(r#"{"typo_field": 1}"#).is_err());
        assert!(serde_json::from_str::<TransportConfig>(r#"{"epsilonn": 0.1}"#).is_err());
    }
}
