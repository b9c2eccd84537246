//! Verification suites.
//!
//! Every mathematical claim the pipeline relies on is checked here against
//! an independent computation: the transport solver against a
//! multiplicative-gradient minimizer, the closed-form fusion against plain
//! gradient descent, analytic loss gradients against central differences,
//! clustering against exhaustive enumeration, and the statistical claims
//! against Monte-Carlo estimates. Each suite reports one or more named
//! check outcomes; the whole set is deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::{Array1, Array2, Array3};
use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EditConfig, GateConfig, PrototypeConfig};
use crate::edit::run_edit;
use crate::error::PipelineError;
use crate::evidence::{generate_synthetic_evidence, EditSpec};
use crate::fusion::{canonical_target, fusion_weights, stability_gap, variance_experiment};
use crate::gating::{
    compute_losses, loss_gradients, residuals_and_gate, SceneLossInputs, ViewLossInputs,
};
use crate::pipeline::{fuse_views, process_views, ViewInput};
use crate::prototypes::{
    build_prototypes, cluster_support, clustering_objective, extract_support, normalize_attention,
};
use crate::scene::{render_view, Camera, Gaussian, RenderOutput};
use crate::seeding::{derive_seed, stage_rng};
use crate::toy;
use crate::uot::{solve_uot, ScalingInit, SolveOptions, TransportProblem};

/// Root seed of every verification stream.
pub const VERIFY_SEED: u64 = 1001;

/// One named pass/fail outcome inside a suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub details: String,
}

/// Result of one verification suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub elapsed_seconds: f64,
    pub checks: Vec<CheckOutcome>,
}

/// The available verification suites, in acceptance order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    UotOptimality,
    UotUniqueness,
    FusionClosedForm,
    StabilityBound,
    VarianceRate,
    GateProperties,
    GradientCheck,
    PrototypeProperties,
    LeakageAblation,
    Determinism,
}

impl Suite {
    pub const ALL: [Suite; 10] = [
        Suite::UotOptimality,
        Suite::UotUniqueness,
        Suite::FusionClosedForm,
        Suite::StabilityBound,
        Suite::VarianceRate,
        Suite::GateProperties,
        Suite::GradientCheck,
        Suite::PrototypeProperties,
        Suite::LeakageAblation,
        Suite::Determinism,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::UotOptimality => "uot-optimality",
            Suite::UotUniqueness => "uot-uniqueness",
            Suite::FusionClosedForm => "fusion-closed-form",
            Suite::StabilityBound => "stability-bound",
            Suite::VarianceRate => "variance-rate",
            Suite::GateProperties => "gate-properties",
            Suite::GradientCheck => "gradient-check",
            Suite::PrototypeProperties => "prototype-properties",
            Suite::LeakageAblation => "leakage-ablation",
            Suite::Determinism => "determinism",
        }
    }
}

/// Resolve a suite name from the command line; `all` selects every suite.
pub fn parse_suites(name: &str) -> Result<Vec<Suite>, PipelineError> {
    if name == "all" {
        return Ok(Suite::ALL.to_vec());
    }
    Suite::ALL
        .iter()
        .copied()
        .find(|s| s.name() == name)
        .map(|s| vec![s])
        .ok_or_else(|| {
            PipelineError::invalid(format!(
                "unknown suite '{name}'; expected all or one of: {}",
                Suite::ALL.map(Suite::name).join(", ")
            ))
        })
}

fn check(name: &str, passed: bool, details: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        details,
    }
}

fn run_checked(
    suite: Suite,
    body: impl FnOnce() -> Result<Vec<CheckOutcome>, PipelineError>,
) -> SuiteReport {
    let started = Instant::now();
    let checks = match body() {
        Ok(checks) => checks,
        Err(e) => vec![check("suite execution", false, format!("error: {e}"))],
    };
    SuiteReport {
        suite: suite.name().to_string(),
        passed: checks.iter().all(|c| c.passed),
        elapsed_seconds: started.elapsed().as_secs_f64(),
        checks,
    }
}

/// Run one suite and collect its outcomes.
///
/// The seed drives the random trials; the two scenario suites (leakage
/// ablation, determinism) are pinned to the standard toy scenario and
/// ignore it.
pub fn run_suite(suite: Suite, seed: u64) -> SuiteReport {
    match suite {
        Suite::UotOptimality => run_checked(suite, || uot_optimality_checks(seed)),
        Suite::UotUniqueness => run_checked(suite, || uot_uniqueness_checks(seed)),
        Suite::FusionClosedForm => run_checked(suite, || fusion_closed_form_checks(seed)),
        Suite::StabilityBound => run_checked(suite, || stability_bound_checks(seed)),
        Suite::VarianceRate => run_checked(suite, || variance_rate_checks(seed)),
        Suite::GateProperties => run_checked(suite, || gate_properties_checks(seed)),
        Suite::GradientCheck => run_checked(suite, || gradient_check_checks(seed)),
        Suite::PrototypeProperties => run_checked(suite, || prototype_properties_checks(seed)),
        Suite::LeakageAblation => run_checked(suite, leakage_ablation_checks),
        Suite::Determinism => run_checked(suite, determinism_checks),
    }
}

/// Run several suites in order with a shared seed.
pub fn run_suites(suites: &[Suite], seed: u64) -> Vec<SuiteReport> {
    suites.iter().map(|&s| run_suite(s, seed)).collect()
}

pub mod oracle {
    //! Independent minimizers the pipeline formulas are checked against.
    //! Nothing here shares code with the solvers under test.

    use std::collections::BTreeMap;

    use ndarray::{Array1, Array2, Axis};
    use rand::RngExt;

    use crate::seeding::stage_rng;
    use crate::uot::{uot_objective, TransportError, TransportProblem};

    /// Final state of the multiplicative-gradient minimization.
    #[derive(Debug, Clone)]
    pub struct EgSolution {
        pub plan: Array2<f64>,
        pub objective: f64,
        pub grad_sup_norm: f64,
        pub iterations: usize,
    }

    fn transport_gradient(
        problem: &TransportProblem,
        log_plan: &Array2<f64>,
        plan: &Array2<f64>,
        grad: &mut Array2<f64>,
    ) -> f64 {
        let (n, m) = plan.dim();
        let row = plan.sum_axis(Axis(1));
        let col = plan.sum_axis(Axis(0));
        let mut sup = 0.0f64;
        for i in 0..n {
            let row_term = problem.tau_source * (row[i] / problem.source_mass[i]).ln();
            for j in 0..m {
                let g = problem.cost[[i, j]]
                    + problem.epsilon
                        * (log_plan[[i, j]]
                            - problem.source_mass[i].ln()
                            - problem.target_mass[j].ln())
                    + row_term
                    + problem.tau_target * (col[j] / problem.target_mass[j]).ln();
                grad[[i, j]] = g;
                sup = sup.max(g.abs());
            }
        }
        sup
    }

    /// Minimize the relaxed transport objective by exponentiated gradient
    /// steps on the plan itself, with no scaling iterations involved.
    ///
    /// The constant step `1 / (epsilon + tau_source + tau_target)` descends
    /// monotonically: the objective is relatively smooth with that constant
    /// in the entropic geometry, so no line search is required. A guard
    /// still halves the step if rounding ever breaks the descent. Restarts
    /// beyond the first perturb the starting plan; the best final plan by
    /// objective wins.
    pub fn eg_minimize_uot(
        problem: &TransportProblem,
        restarts: usize,
        grad_tol: f64,
        max_iters: usize,
        seed: u64,
    ) -> Result<EgSolution, TransportError> {
        let (n, m) = (problem.num_sources(), problem.num_targets());
        let step = 1.0 / (problem.epsilon + problem.tau_source + problem.tau_target);
        let mut log_ab = Array2::<f64>::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                log_ab[[i, j]] = problem.source_mass[i].ln() + problem.target_mass[j].ln();
            }
        }

        let mut best: Option<EgSolution> = None;
        for restart in 0..restarts.max(1) {
            let mut log_plan = log_ab.clone();
            if restart > 0 {
                let mut rng = stage_rng(seed, "eg-restart", restart as u64);
                log_plan.mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
            }
            let mut plan = log_plan.mapv(f64::exp);
            let mut grad = Array2::<f64>::zeros((n, m));
            let mut current_step = step;
            let mut f_prev = uot_objective(&plan, problem)?;
            let mut sup = f64::INFINITY;
            let mut iterations = 0;

            for iter in 0..max_iters {
                iterations = iter + 1;
                sup = transport_gradient(problem, &log_plan, &plan, &mut grad);
                if sup < grad_tol {
                    break;
                }
                log_plan.zip_mut_with(&grad, |l, &g| *l = (*l - current_step * g).max(-700.0));
                plan = log_plan.mapv(f64::exp);
                if iter % 512 == 511 {
                    let f = uot_objective(&plan, problem)?;
                    if f > f_prev + 1e-9 {
                        current_step *= 0.5;
                    }
                    f_prev = f;
                }
            }

            let objective = uot_objective(&plan, problem)?;
            if best.as_ref().is_none_or(|b| objective < b.objective) {
                best = Some(EgSolution {
                    plan,
                    objective,
                    grad_sup_norm: sup,
                    iterations,
                });
            }
        }
        Ok(best.expect("ran at least one restart"))
    }

    /// Plain gradient descent on the anchored weighted least-squares
    /// objective whose closed form the fusion stage implements.
    pub fn gd_minimize_barycenter(
        weights: &BTreeMap<usize, f64>,
        targets: &BTreeMap<usize, Array1<f64>>,
        latent: &Array1<f64>,
        rho: f64,
        grad_tol: f64,
        max_iters: usize,
    ) -> Array1<f64> {
        let weight_sum: f64 = weights.values().sum();
        let step = 0.35 / (2.0 * (weight_sum + rho));
        let mut z = Array1::<f64>::zeros(latent.len());
        for _ in 0..max_iters {
            let mut grad = (&z - latent) * (2.0 * rho);
            for (view, &w) in weights {
                grad += &((&z - &targets[view]) * (2.0 * w));
            }
            let sup = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if sup < grad_tol {
                break;
            }
            z.scaled_add(-step, &grad);
        }
        z
    }
}

/// Deterministic random transport problems spanning the acceptance grid of
/// sizes, regularization strengths, and marginal relaxations.
fn oracle_problems(count: usize, seed: u64) -> Vec<TransportProblem> {
    let eps_grid = [0.01, 0.05, 0.2];
    let tau_grid = [0.5, 1.0, 5.0];
    (0..count)
        .map(|k| {
            let mut rng = stage_rng(seed, "transport-oracle-problem", k as u64);
            let n = rng.random_range(2..=16usize);
            let m = rng.random_range(2..=16usize);
            let cost = Array2::from_shape_fn((n, m), |_| rng.random_range(0.0..2.0));
            let mut a = Array1::from_shape_fn(n, |_| rng.random_range(0.05..1.0));
            let mut b = Array1::from_shape_fn(m, |_| rng.random_range(0.05..1.0));
            let a_sum = a.sum();
            let b_sum = b.sum();
            a.mapv_inplace(|v| v / a_sum);
            b.mapv_inplace(|v| v / b_sum);
            TransportProblem::new(
                cost,
                a,
                b,
                eps_grid[k % eps_grid.len()],
                tau_grid[(k / 3) % tau_grid.len()],
                tau_grid[(k / 9) % tau_grid.len()],
                (0..n as u64).collect(),
            )
            .expect("generated problems are valid")
        })
        .collect()
}

fn uot_optimality_checks(seed: u64) -> Result<Vec<CheckOutcome>, PipelineError> {
    let started = Instant::now();
    let problems = oracle_problems(50, seed);

    let results: Vec<(f64, f64)> = problems
        .par_iter()
        .enumerate()
        .map(|(k, p)| -> Result<(f64, f64), PipelineError> {
            let semantics = Array2::<f64>::zeros((p.num_targets(), 1));
            let solved = solve_uot(p, &semantics, &SolveOptions::strict())?;
            let reference = oracle::eg_minimize_uot(
                p,
                5,
                1e-10,
                400_000,
                derive_seed(seed, "eg-oracle", k as u64),
            )?;
            let rel_gap =
                (solved.objective - reference.objective) / reference.objective.abs().max(1.0);
            Ok((rel_gap, reference.grad_sup_norm))
        })
        .collect::<Result<_, _>>()?;

    let max_gap = results
        .iter()
        .map(|r| r.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let worst_grad = results.iter().map(|r| r.1).fold(0.0f64, f64::max);
    let elapsed = started.elapsed().as_secs_f64();

    Ok(vec![
        check(
            "solver objective within 1e-4 relative of the oracle",
            max_gap <= 1e-4,
            format!(
                "max relative gap {max_gap:.3e} over {} problems",
                results.len()
            ),
        ),
        check(
            "oracle reached gradient sup-norm 1e-10",
            worst_grad < 1e-10,
            format!("worst oracle gradient sup-norm {worst_grad:.3e}"),
        ),
        check(
            "runtime under 30 s",
            elapsed < 30.0,
            format!("{elapsed:.2} s"),
        ),
    ])
}

fn uot_uniqueness_checks(seed: u64) -> Result<Vec<CheckOutcome>, PipelineError> {
    let problems = oracle_problems(50, seed);
    let diffs: Vec<f64> = problems
        .par_iter()
        .enumerate()
        .map(|(k, p)| -> Result<f64, PipelineError> {
            let semantics = Array2::<f64>::zeros((p.num_targets(), 1));
            let from_zeros = solve_uot(p, &semantics, &SolveOptions::strict())?;
            let mut opts = SolveOptions::strict();
            opts.init = ScalingInit::Random(derive_seed(seed, "uniqueness-init", k as u64));
            let from_random = solve_uot(p, &semantics, &opts)?;
            Ok(from_zeros
                .plan
                .iter()
                .zip(from_random.plan.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max))
        })
        .collect::<Result<_, _>>()?;

    let max_diff = diffs.iter().copied().fold(0.0f64, f64::max);
    Ok(vec![check(
        "plans from different initializations coincide within 1e-6",
        max_diff < 1e-6,
        format!(
            "max plan difference {max_diff:.3e} over {} problems",
            diffs.len()
        ),
    )])
}

fn fusion_closed_form_checks(seed: u64) -> Result<Vec<CheckOutcome>, PipelineError> {
    let rho_grid = [0.0, 0.1, 1.0];
    let dim = 16;
    let mut max_dev = 0.0f64;
    for k in 0..100u64 {
        let mut rng = stage_rng(seed, "fusion-oracle", k);
        let views = rng.random_range(1..=8usize);
        let rho = rho_grid[(k as usize) % rho_grid.len()];
        let masses: BTreeMap<usize, f64> = (0..views)
            .map(|v| (v, rng.random_range(0.05..2.0)))
            .collect();
        let weights = fusion_weights(&masses, 1e-8)?;
        let targets: BTreeMap<usize, Array1<f64>> = (0..views)
            .map(|v| {
                (
                    v,
                    Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0)),
                )
            })
            .collect();
        let latent = Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0));

        let closed = canonical_target(&weights, &targets, &latent.view(), rho)?;
        let descended =
            oracle::gd_minimize_barycenter(&weights, &targets, &latent, rho, 1e-13, 100_000);
        let dev = closed
            .iter()
            .zip(descended.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        max_dev = max_dev.max(dev);
    }
    Ok(vec![check(
        "closed form matches gradient descent within 1e-8",
        max_dev <= 1e-8,
        format!("max deviation {max_dev:.3e} over 100 instances"),
    )])
}

fn stability_bound_checks(seed: u64) -> Result<Vec<CheckOutcome>, PipelineError> {
    let rho_grid = [0.0, 0.1, 1.0];
    let mut worst_violation = f64::NEG_INFINITY;
    for k in 0..1000u64 {
        let mut rng = stage_rng(seed, "stability-trial", k);
        let views = rng.random_range(1..=6usize);
        let dim = rng.random_range(1..=16usize);
        let rho = rho_grid[rng.random_range(0..rho_grid.len())];
        let masses: BTreeMap<usize, f64> = (0..views)
            .map(|v| (v, rng.random_range(0.05..2.0)))
            .collect();
        let weights = fusion_weights(&masses, 1e-8)?;
        let mut targets = BTreeMap::new();
        let mut perturbed = BTreeMap::new();
        for v in 0..views {
            let y = Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0));
            let dy = Array1::from_shape_fn(dim, |_| rng.random_range(-0.5..0.5));
            perturbed.insert(v, &y + &dy);
            targets.insert(v, y);
        }
        let latent = Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0));
        let latent_pert = &latent + &Array1::from_shape_fn(dim, |_| rng.random_range(-0.5..0.5));

        let (gap, bound) = stability_gap(
            &weights,
            &targets,
            &perturbed,
            &latent.view(),
            &latent_pert.view(),
            rho,
        )?;
        worst_violation = worst_violation.max(gap - bound);
    }

    // Perturbations along one common direction make the bound tight.
    let mut min_ratio = f64::INFINITY;
    for k in 0..32u64 {
        let mut rng = stage_rng(seed, "stability-equality", k);
        let views = rng.random_range(1..=6usize);
        let dim = rng.random_range(2..=16usize);
        let rho = rho_grid[rng.random_range(0..rho_grid.len())];
        let masses: BTreeMap<usize, f64> = (0..views)
            .map(|v| (v, rng.random_range(0.05..2.0)))
            .collect();
        let weights = fusion_weights(&masses, 1e-8)?;
        let mut direction = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        direction.mapv_inplace(|v| v / norm);

        let mut targets = BTreeMap::new();
        let mut perturbed = BTreeMap::new();
        for v in 0..views {
            let y = Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0));
            let scale = rng.random_range(0.1..1.0);
            perturbed.insert(v, &y + &(&direction * scale));
            targets.insert(v, y);
        }
        let latent = Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0));
        let latent_pert = &latent + &(&direction * rng.random_range(0.1..1.0));

        let (gap, bound) = stability_gap(
            &weights,
            &targets,
            &perturbed,
            &latent.view(),
            &latent_pert.view(),
            rho,
        )?;
        min_ratio = min_ratio.min(gap / bound);
    }

    Ok(vec![
        check(
            "gap never exceeds the bound beyond 1e-12 slack",
            worst_violation <= 1e-12,
            format!("worst gap minus bound {worst_violation:.3e} over 1000 trials"),
        ),
        check(
            "colinear perturbations reach at least 0.999 of the bound",
            min_ratio >= 0.999,
            format!("min gap/bound ratio {min_ratio:.6} over 32 trials"),
        ),
    ])
}

fn variance_rate_checks(seed: u64) -> Result<Vec<CheckOutcome>, PipelineError> {
    let started = Instant::now();
    let trials = 10_000;
    let dim = 8;
    let sigma = 1.0;
    let rows = variance_experiment(&[1, 2, 4, 8, 16], sigma, trials, 0.0, dim, seed)?;

    let ratios_ok = rows
        .iter()
        .all(|r| r.mse_times_v_over_sigma2 >= 0.9 && r.mse_times_v_over_sigma2 <= 1.1);
    let table = rows
        .iter()
        .map(|r| format!("V={} ratio={:.4}", r.num_views, r.mse_times_v_over_sigma2))
        .collect::<Vec<_>>()
        .join(", ");

    // Wide tail bound on the norm of the trial-averaged error
    // (chi-square with `dim` degrees of freedom below 40).
    let clt_ok = rows.iter().all(|r| {
        let band = sigma * (40.0 / (dim as f64 * r.num_views as f64 * trials as f64)).sqrt();
        r.mean_deviation <= band
    });
    let deviations = rows
        .iter()
        .map(|r| {
            let band = sigma * (40.0 / (dim as f64 * r.num_views as f64 * trials as f64)).sqrt();
            format!(
                "V={} dev={:.2e} band={:.2e}",
                r.num_views, r.mean_deviation, band
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    let elapsed = started.elapsed().as_secs_f64();

    Ok(vec![
        check(
            "mse times view count stays within [0.9, 1.1] of sigma squared",
            ratios_ok,
            table,
        ),
        check("trial-mean error within the CLT band", clt_ok, deviations),
        check(
            "runtime under 60 s",
            elapsed < 60.0,
            format!("{elapsed:.2} s"),
        ),
    ])
}

fn gate_properties_checks(seed: u64) -> Result<Vec<CheckOutcome>, PipelineError> {
    let cfg = GateConfig::default();
    let map = |pairs: &[(usize, f64)]| -> BTreeMap<usize, f64> { pairs.iter().copied().collect() };

    let matched = residuals_and_gate(
        &map(&[(0, 0.25), (1, 0.5), (2, 0.125)]),
        &map(&[(0, 0.25), (1, 0.5), (2, 0.125)]),
        &map(&[(0, 0.4), (1, 0.35), (2, 0.25)]),
        &cfg,
    )?;
    let exact_open = matched.gate == 1.0 && matched.aggregated_residual == 0.0;

    let mut strict_decrease = true;
    let mut worst_pair = (0.0, 0.0);
    for k in 0..1000u64 {
        let mut rng = stage_rng(seed, "gate-monotone", k);
        let w = rng.random_range(0.0..0.5);
        let r_small = rng.random_range(1e-6..0.5);
        let r_large = r_small + rng.random_range(0.01..0.5);
        let weights = map(&[(0, 1.0)]);
        let small = residuals_and_gate(&map(&[(0, w + r_small)]), &map(&[(0, w)]), &weights, &cfg)?;
        let large = residuals_and_gate(&map(&[(0, w + r_large)]), &map(&[(0, w)]), &weights, &cfg)?;
        if small.gate <= large.gate {
            strict_decrease = false;
            worst_pair = (small.gate, large.gate);
        }
    }

    let mut opens_with_tau = true;
    for k in 0..1000u64 {
        let mut rng = stage_rng(seed, "gate-tau", k);
        let w = rng.random_range(0.0..0.5);
        let r = rng.random_range(0.01..1.0);
        let tau_small = rng.random_range(0.01..0.3);
        let tau_large = tau_small + rng.random_range(0.05..1.0);
        let weights = map(&[(0, 1.0)]);
        let tight = residuals_and_gate(
            &map(&[(0, w + r)]),
            &map(&[(0, w)]),
            &weights,
            &GateConfig {
                tau_r: tau_small,
                ..cfg.clone()
            },
        )?;
        let loose = residuals_and_gate(
            &map(&[(0, w + r)]),
            &map(&[(0, w)]),
            &weights,
            &GateConfig {
                tau_r: tau_large,
                ..cfg.clone()
            },
        )?;
        if loose.gate <= tight.gate {
            opens_with_tau = false;
        }
    }

    Ok(vec![
        check(
            "zero residual leaves the gate exactly fully open",
            exact_open,
            format!(
                "gate {} residual {}",
                matched.gate, matched.aggregated_residual
            ),
        ),
        check(
            "gate strictly decreases in the residual",
            strict_decrease,
            if strict_decrease {
                "1000 ordered pairs".to_string()
            } else {
                format!("violated: gates {} vs {}", worst_pair.0, worst_pair.1)
            },
        ),
        check(
            "gate strictly opens as tau_r grows",
            opens_with_tau,
            "1000 ordered pairs".to_string(),
        ),
    ])
}

struct GradCheckCase {
    scene: Vec<Gaussian>,
    views: Vec<ViewInput>,
    config: EditConfig,
}

/// A random two-view scene of sixteen Gaussians on a jittered grid, with
/// fabricated recolor evidence. Small enough that finite differences over
/// every latent component and color channel stay cheap.
fn gradcheck_case(seed: u64) -> Result<GradCheckCase, PipelineError> {
    let mut rng = stage_rng(seed, "gradcheck-scene", 0);
    let dim = 16;
    let mut scene = Vec::with_capacity(16);
    for row in 0..4u64 {
        for col in 0..4u64 {
            let id = row * 4 + col;
            let center = Vector3::new(
                0.5 * (col as f64 - 1.5) + rng.random_range(-0.08..0.08),
                0.5 * (row as f64 - 1.5) + rng.random_range(-0.08..0.08),
                rng.random_range(-0.05..0.05),
            );
            let color = Vector3::new(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
            );
            let latent = Array1::from_shape_fn(dim, |_| rng.random_range(-0.3..0.3));
            scene.push(Gaussian {
                id,
                center,
                covariance: Matrix3::identity() * 0.05,
                color,
                opacity: 0.7,
                semantic_latent: latent,
                original_color: color,
            });
        }
    }

    let cameras = [
        Camera::look_at(
            Vector3::new(-1.0, 0.4, -5.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            Vector2::new(24.0, 24.0),
            Vector2::new(7.5, 7.5),
            16,
            16,
        ),
        Camera::look_at(
            Vector3::new(1.2, -0.3, -4.6),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            Vector2::new(24.0, 24.0),
            Vector2::new(7.5, 7.5),
            16,
            16,
        ),
    ];

    let mut target_region = BTreeSet::new();
    while target_region.len() < 4 {
        target_region.insert(rng.random_range(0..16u64));
    }
    let mut target_semantic = vec![0.0; dim];
    target_semantic[1] = 1.0;
    let spec = EditSpec {
        target_region,
        target_semantic,
        target_color: [0.9, 0.15, 0.1],
        attention_noise_sigma: 0.01,
        feature_noise_sigma: 0.03,
        seed: derive_seed(seed, "gradcheck-evidence", 0),
    };

    let mut config = EditConfig::default();
    config.prototype.num_prototypes = 3;

    let views = cameras
        .iter()
        .enumerate()
        .map(|(v, camera)| {
            let mut view_spec = spec.clone();
            view_spec.seed = derive_seed(spec.seed, "view-evidence", v as u64);
            let evidence =
                generate_synthetic_evidence(&scene, camera, &view_spec, &config.render, 8, false)?;
            Ok(ViewInput {
                camera: camera.clone(),
                evidence,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;

    Ok(GradCheckCase {
        scene,
        views,
        config,
    })
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn gradient_check_checks(seed: u64) -> Result<Vec<CheckOutcome>, PipelineError> {
    let started = Instant::now();
    let mut worst_sem = 0.0f64;
    let mut worst_col = 0.0f64;

    for case_index in 0..3u64 {
        let case = gradcheck_case(derive_seed(seed, "gradcheck-case", case_index))?;
        let artifacts = process_views(&case.scene, &case.views, &case.config)?;
        let fused = fuse_views(&case.scene, &artifacts, &case.config)?;
        let objectives: Vec<f64> = artifacts
            .iter()
            .map(|a| a.as_ref().map_or(0.0, |a| a.solution.objective))
            .collect();

        // Nudge the state away from the evidence so residuals and drifts
        // are generic rather than exactly zero.
        let mut scene = case.scene.clone();
        let mut rng = stage_rng(seed, "gradcheck-nudge", case_index);
        for g in &mut scene {
            for s in g.semantic_latent.iter_mut() {
                *s += rng.random_range(-0.1..0.1);
            }
            for c in 0..3 {
                g.color[c] = (g.color[c] + rng.random_range(-0.05..0.05)).clamp(0.05, 0.95);
            }
        }

        let total_loss = |scene: &[Gaussian]| -> Result<f64, PipelineError> {
            let renders: Vec<RenderOutput> = case
                .views
                .iter()
                .map(|v| render_view(scene, &v.camera, &case.config.render))
                .collect::<Result<_, _>>()?;
            let view_inputs: Vec<ViewLossInputs> = renders
                .iter()
                .zip(&case.views)
                .zip(&objectives)
                .map(|((render, view), &objective)| ViewLossInputs {
                    render,
                    edited_image: &view.evidence.edited_image,
                    transport_objective: objective,
                })
                .collect();
            let report = compute_losses(
                &SceneLossInputs {
                    scene,
                    views: &view_inputs,
                    gates: &fused.gates,
                    canonical: &fused.canonical,
                },
                &case.config.losses,
            )?;
            Ok(report.total)
        };

        let analytic = {
            let renders: Vec<RenderOutput> = case
                .views
                .iter()
                .map(|v| render_view(&scene, &v.camera, &case.config.render))
                .collect::<Result<_, _>>()?;
            let view_inputs: Vec<ViewLossInputs> = renders
                .iter()
                .zip(&case.views)
                .zip(&objectives)
                .map(|((render, view), &objective)| ViewLossInputs {
                    render,
                    edited_image: &view.evidence.edited_image,
                    transport_objective: objective,
                })
                .collect();
            loss_gradients(
                &SceneLossInputs {
                    scene: &scene,
                    views: &view_inputs,
                    gates: &fused.gates,
                    canonical: &fused.canonical,
                },
                &case.config.losses,
            )?
        };

        let dim = scene[0].semantic_latent.len();
        let h_sem = 1e-5;
        let mut fd_sem = Array2::<f64>::zeros((scene.len(), dim));
        for i in 0..scene.len() {
            for k in 0..dim {
                let orig = scene[i].semantic_latent[k];
                scene[i].semantic_latent[k] = orig + h_sem;
                let plus = total_loss(&scene)?;
                scene[i].semantic_latent[k] = orig - h_sem;
                let minus = total_loss(&scene)?;
                scene[i].semantic_latent[k] = orig;
                fd_sem[[i, k]] = (plus - minus) / (2.0 * h_sem);
            }
        }
        let sem_err = frobenius(&(&fd_sem - &analytic.semantic))
            / frobenius(&analytic.semantic)
                .max(frobenius(&fd_sem))
                .max(1e-30);
        worst_sem = worst_sem.max(sem_err);

        let h_col = 1e-6;
        let mut fd_col = Array2::<f64>::zeros((scene.len(), 3));
        for i in 0..scene.len() {
            for c in 0..3 {
                let orig = scene[i].color[c];
                scene[i].color[c] = orig + h_col;
                let plus = total_loss(&scene)?;
                scene[i].color[c] = orig - h_col;
                let minus = total_loss(&scene)?;
                scene[i].color[c] = orig;
                fd_col[[i, c]] = (plus - minus) / (2.0 * h_col);
            }
        }
        let col_err = frobenius(&(&fd_col - &analytic.color))
            / frobenius(&analytic.color)
                .max(frobenius(&fd_col))
                .max(1e-30);
        worst_col = worst_col.max(col_err);
    }

    let elapsed = started.elapsed().as_secs_f64();
    Ok(vec![
        check(
            "semantic gradients match central differences within 1e-4 relative",
            worst_sem < 1e-4,
            format!("worst relative error {worst_sem:.3e} over 3 scenes"),
        ),
        check(
            "color gradients through the renderer match central differences within 1e-3 relative",
            worst_col < 1e-3,
            format!("worst relative error {worst_col:.3e} over 3 scenes"),
        ),
        check(
            "runtime under 60 s",
            elapsed < 60.0,
            format!("{elapsed:.2} s"),
        ),
    ])
}

/// Smooth random attention map built from a few bumps; guarantees a
/// non-trivial support at the default threshold.
fn bump_attention(rng: &mut impl RngExt, h: usize, w: usize) -> Array2<f64> {
    let mut attention = Array2::<f64>::zeros((h, w));
    for _ in 0..3 {
        let cy = rng.random_range(4.0..(h as f64 - 4.0));
        let cx = rng.random_range(4.0..(w as f64 - 4.0));
        let spread = rng.random_range(1.5..3.5);
        let amp = rng.random_range(0.5..1.0);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                attention[[y, x]] += amp * (-d2 / (2.0 * spread * spread)).exp();
            }
        }
    }
    attention
}

fn extract_all(
    attention: &Array2<f64>,
    semantic: &Array3<f64>,
    appearance: &Array3<f64>,
    cfg: &PrototypeConfig,
    seed: u64,
) -> Result<Vec<crate::prototypes::Prototype>, PipelineError> {
    let norm = normalize_attention(attention, cfg.eps_attention)?;
    let support = extract_support(&norm, cfg.attention_threshold, None, cfg.min_component)?;
    let partition = cluster_support(
        &support,
        &norm,
        cfg.num_prototypes,
        cfg.max_lloyd_iters,
        seed,
    )?;
    Ok(build_prototypes(
        &partition, &norm, semantic, appearance, cfg,
    )?)
}

fn prototype_properties_checks(seed: u64) -> Result<Vec<CheckOutcome>, PipelineError> {
    let cfg = PrototypeConfig {
        num_prototypes: 4,
        ..PrototypeConfig::default()
    };
    let (h, w) = (24usize, 24usize);

    let mut worst_mass_gap = 0.0f64;
    let mut worst_scale_dev = 0.0f64;
    for k in 0..20u64 {
        let mut rng = stage_rng(seed, "prototype-random", k);
        let attention = bump_attention(&mut rng, h, w);
        let semantic = Array3::from_shape_fn((h, w, 6), |_| rng.random_range(-1.0..1.0));
        let appearance = Array3::from_shape_fn((h, w, 5), |_| rng.random_range(-1.0..1.0));
        let seed = derive_seed(seed, "prototype-cluster", k);

        let base = extract_all(&attention, &semantic, &appearance, &cfg, seed)?;
        let mass_sum: f64 = base.iter().map(|p| p.mass).sum();
        worst_mass_gap = worst_mass_gap.max((mass_sum - 1.0).abs());

        for scale in [0.37, 12.0] {
            let scaled = extract_all(
                &attention.mapv(|v| v * scale),
                &semantic,
                &appearance,
                &cfg,
                seed,
            )?;
            if scaled.len() != base.len() {
                worst_scale_dev = f64::INFINITY;
                continue;
            }
            for (a, b) in base.iter().zip(&scaled) {
                worst_scale_dev = worst_scale_dev
                    .max((a.position - b.position).abs().max())
                    .max((a.mass - b.mass).abs());
            }
        }
    }

    // Two well-separated pixel blobs; exhaustive enumeration of every
    // 2-partition certifies the clustering found the global optimum.
    let mut rng = stage_rng(seed, "prototype-blobs", 0);
    let mut attention_norm = Array2::<f64>::zeros((16, 16));
    let mut support: Vec<(u32, u32)> = Vec::new();
    for (cy, cx) in [(3u32, 3u32), (12, 12)] {
        for dy in 0..3u32 {
            for dx in 0..3u32 {
                support.push((cy + dy - 1, cx + dx - 1));
            }
        }
        support.push((cy + 2, cx));
    }
    support.sort_unstable();
    for &(y, x) in &support {
        attention_norm[[y as usize, x as usize]] = rng.random_range(0.5..1.0);
    }
    let partition = cluster_support(
        &support,
        &attention_norm,
        2,
        50,
        derive_seed(seed, "prototype-blob-cluster", 0),
    )?;
    let clustered = clustering_objective(&partition.regions, &attention_norm);
    let best = exhaustive_two_cluster(&support, &attention_norm);
    let blob_gap = clustered - best;

    Ok(vec![
        check(
            "normalized prototype masses sum to one within 1e-9",
            worst_mass_gap <= 1e-9,
            format!("worst deviation {worst_mass_gap:.3e} over 20 instances"),
        ),
        check(
            "attention scaling leaves prototypes unchanged within 1e-7",
            worst_scale_dev <= 1e-7,
            format!("worst position/mass deviation {worst_scale_dev:.3e}"),
        ),
        check(
            "two-blob clustering matches the exhaustive optimum within 1e-9",
            blob_gap.abs() <= 1e-9,
            format!("objective {clustered:.12} vs exhaustive {best:.12}"),
        ),
    ])
}

/// Weighted two-cluster objective minimized over every labeling of the
/// support (the first pixel is pinned to break the label symmetry).
fn exhaustive_two_cluster(support: &[(u32, u32)], attention: &Array2<f64>) -> f64 {
    struct Pixel {
        w: f64,
        wn: f64,
        wx: f64,
        wy: f64,
    }
    let pixels: Vec<Pixel> = support
        .iter()
        .map(|&(y, x)| {
            let w = attention[[y as usize, x as usize]];
            let (xf, yf) = (f64::from(x), f64::from(y));
            Pixel {
                w,
                wn: w * (xf * xf + yf * yf),
                wx: w * xf,
                wy: w * yf,
            }
        })
        .collect();
    let n = pixels.len();
    assert!(
        (2..=24).contains(&n),
        "exhaustive search sized for small inputs"
    );

    let mut best = f64::INFINITY;
    for mask in 0..(1u32 << (n - 1)) {
        let mut acc = [[0.0f64; 4]; 2];
        for (i, p) in pixels.iter().enumerate() {
            let side = if i + 1 < n {
                ((mask >> i) & 1) as usize
            } else {
                0
            };
            acc[side][0] += p.w;
            acc[side][1] += p.wn;
            acc[side][2] += p.wx;
            acc[side][3] += p.wy;
        }
        let mut total = 0.0;
        for side in acc {
            if side[0] > 0.0 {
                total += side[1] - (side[2] * side[2] + side[3] * side[3]) / side[0];
            }
        }
        best = best.min(total);
    }
    best
}

fn leakage_ablation_checks() -> Result<Vec<CheckOutcome>, PipelineError> {
    let started = Instant::now();
    let scenario = toy::standard_scenario();
    let views = toy::scenario_views(&scenario)?;

    let mut without = scenario.config.clone();
    without.losses.lambda_leak = 0.0;
    let mut with = scenario.config.clone();
    with.losses.lambda_leak = 0.5;

    let (_, report_without) = run_edit(&scenario.scene, &views, &without, &scenario.target)?;
    let (_, report_with) = run_edit(&scenario.scene, &views, &with, &scenario.target)?;
    let elapsed = started.elapsed().as_secs_f64();

    Ok(vec![
        check(
            "leakage penalty at least halves non-target drift",
            report_with.leakage <= 0.5 * report_without.leakage,
            format!(
                "leakage {:.5} with penalty vs {:.5} without",
                report_with.leakage, report_without.leakage
            ),
        ),
        check(
            "target convergence stays within 1.3x",
            report_with.target_color_error <= 1.3 * report_without.target_color_error,
            format!(
                "target error {:.5} with penalty vs {:.5} without",
                report_with.target_color_error, report_without.target_color_error
            ),
        ),
        check(
            "runtime under 2 min",
            elapsed < 120.0,
            format!("{elapsed:.2} s"),
        ),
    ])
}

fn determinism_checks() -> Result<Vec<CheckOutcome>, PipelineError> {
    let scenario = toy::standard_scenario();
    let run = |threads: usize| -> Result<Vec<u8>, PipelineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| PipelineError::invalid(format!("thread pool: {e}")))?;
        pool.install(|| {
            let views = toy::scenario_views(&scenario)?;
            let (_, report) =
                run_edit(&scenario.scene, &views, &scenario.config, &scenario.target)?;
            serde_json::to_vec(&report)
                .map_err(|e| PipelineError::invalid(format!("serialize report: {e}")))
        })
    };

    let single = run(1)?;
    let first = run(4)?;
    let second = run(4)?;

    Ok(vec![
        check(
            "same seed twice gives byte-identical reports",
            first == second,
            format!("{} bytes each", first.len()),
        ),
        check(
            "thread count does not change the bytes",
            single == first,
            format!("1 thread vs 4 threads, {} bytes", single.len()),
        ),
    ])
}
