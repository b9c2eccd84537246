//! Fuse per-view semantic targets into one canonical target per Gaussian.
//!
//! Each view that gave Gaussian `i` transported mass `w_v` proposes a
//! target `y_v`. The fused target minimizes
//! `sum_v omega_v ||z - y_v||^2 + rho ||z - s||^2` over `z`, where `s` is
//! the current latent; the minimizer is the weighted barycenter
//!
//! ```text
//! z* = (sum_v omega_v y_v + rho s) / (sum_v omega_v + rho)
//! ```
//!
//! which is linear in the inputs, hence the perturbation bound checked by
//! [`stability_gap`] and the `sigma^2 / V` variance contraction measured by
//! [`variance_experiment`].

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::stage_rng;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no view contributed transported mass")]
    NoValidViews,
    #[error("view sets of weights and targets differ")]
    MismatchedViews,
    #[error("target dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("rho must be non-negative and finite, got {0}")]
    InvalidRho(f64),
    #[error("total fusion weight plus rho is not positive")]
    DegenerateDenominator,
    #[error("fusion weight {0} is negative or non-finite")]
    InvalidWeight(f64),
}

/// Normalize per-view transported masses into fusion weights.
///
/// Masses are damped by `delta` and then rescaled so the weights sum to
/// one; views with non-positive mass are dropped first.
pub fn fusion_weights(
    support_mass: &BTreeMap<usize, f64>,
    delta: f64,
) -> Result<BTreeMap<usize, f64>, FusionError> {
    let mut positive: BTreeMap<usize, f64> = BTreeMap::new();
    for (&view, &w) in support_mass {
        if !w.is_finite() {
            return Err(FusionError::InvalidWeight(w));
        }
        if w > 0.0 {
            positive.insert(view, w);
        }
    }
    if positive.is_empty() {
        return Err(FusionError::NoValidViews);
    }
    let total: f64 = positive.values().sum();
    let damped: Vec<f64> = positive.values().map(|w| w / (total + delta)).collect();
    let damped_total: f64 = damped.iter().sum();
    Ok(positive
        .keys()
        .zip(&damped)
        .map(|(&view, &w)| (view, w / damped_total))
        .collect())
}

/// Closed-form fused target; see the module docs.
pub fn canonical_target(
    weights: &BTreeMap<usize, f64>,
    targets: &BTreeMap<usize, Array1<f64>>,
    latent: &ArrayView1<f64>,
    rho: f64,
) -> Result<Array1<f64>, FusionError> {
    if !rho.is_finite() || rho < 0.0 {
        return Err(FusionError::InvalidRho(rho));
    }
    if weights.len() != targets.len() || weights.keys().ne(targets.keys()) {
        return Err(FusionError::MismatchedViews);
    }
    let dim = latent.len();
    let mut acc = Array1::<f64>::zeros(dim);
    let mut weight_sum = 0.0;
    for (&view, &w) in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(FusionError::InvalidWeight(w));
        }
        let y = &targets[&view];
        if y.len() != dim {
            return Err(FusionError::DimensionMismatch(y.len(), dim));
        }
        acc.scaled_add(w, y);
        weight_sum += w;
    }
    let denom = weight_sum + rho;
    if denom.is_nan() || denom <= 0.0 {
        return Err(FusionError::DegenerateDenominator);
    }
    acc.scaled_add(rho, latent);
    Ok(acc / denom)
}

/// Realized fusion shift under perturbed inputs, and its guaranteed bound.
///
/// Returns `(gap, bound)` with `gap = ||z - z~||` and
/// `bound = (sum_v omega_v ||y_v - y~_v|| + rho ||s - s~||) / (sum_v omega_v + rho)`.
/// Linearity of the closed form gives `gap <= bound` always, with equality
/// when every perturbation points along one common direction.
pub fn stability_gap(
    weights: &BTreeMap<usize, f64>,
    targets: &BTreeMap<usize, Array1<f64>>,
    perturbed_targets: &BTreeMap<usize, Array1<f64>>,
    latent: &ArrayView1<f64>,
    perturbed_latent: &ArrayView1<f64>,
    rho: f64,
) -> Result<(f64, f64), FusionError> {
    let z = canonical_target(weights, targets, latent, rho)?;
    let z_pert = canonical_target(weights, perturbed_targets, perturbed_latent, rho)?;
    let gap = (&z - &z_pert).iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut numer = 0.0;
    let mut weight_sum = 0.0;
    for (&view, &w) in weights {
        let dy = (&targets[&view] - &perturbed_targets[&view])
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        numer += w * dy;
        weight_sum += w;
    }
    let ds = (latent - perturbed_latent)
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    numer += rho * ds;
    Ok((gap, numer / (weight_sum + rho)))
}

/// One row of the fusion variance experiment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VarianceRow {
    pub num_views: usize,
    pub trials: usize,
    pub sigma: f64,
    pub mse: f64,
    /// `mse * num_views / sigma^2`; near one when fusion averages noise at
    /// the `sigma^2 / V` rate (`rho = 0`).
    pub mse_times_v_over_sigma2: f64,
    /// Norm of the trial-averaged fusion error; near zero when unbiased.
    pub mean_deviation: f64,
}

/// Monte-Carlo check of the variance contraction rate.
///
/// Per trial, a true target is drawn, each of `V` views observes it under
/// isotropic noise with total variance `sigma^2` (so `sigma^2 / dim` per
/// component), and the views are fused with uniform weights while the
/// anchor latent sits at the true target. Records the mean squared fusion
/// error per view count.
pub fn variance_experiment(
    view_counts: &[usize],
    sigma: f64,
    trials: usize,
    rho: f64,
    dim: usize,
    seed: u64,
) -> Result<Vec<VarianceRow>, FusionError> {
    if !rho.is_finite() || rho < 0.0 {
        return Err(FusionError::InvalidRho(rho));
    }
    let component_sigma = sigma / (dim as f64).sqrt();
    let mut rows = Vec::with_capacity(view_counts.len());
    for (block, &num_views) in view_counts.iter().enumerate() {
        let mut sq_err_sum = 0.0;
        let mut err_mean = Array1::<f64>::zeros(dim);
        for trial in 0..trials {
            let mut rng = stage_rng(
                seed,
                "variance-trial",
                ((block as u64) << 40) | trial as u64,
            );
            let truth_noise = Normal::new(0.0, 1.0).expect("unit normal");
            let truth = Array1::from_iter((0..dim).map(|_| truth_noise.sample(&mut rng)));

            let masses: BTreeMap<usize, f64> = (0..num_views).map(|v| (v, 1.0)).collect();
            let weights = fusion_weights(&masses, 1e-8)?;
            let mut targets = BTreeMap::new();
            for v in 0..num_views {
                let mut y = truth.clone();
                if sigma > 0.0 {
                    let noise = Normal::new(0.0, component_sigma).expect("finite sigma");
                    y.mapv_inplace(|t| t + noise.sample(&mut rng));
                }
                targets.insert(v, y);
            }
            let z = canonical_target(&weights, &targets, &truth.view(), rho)?;
            let err = &z - &truth;
            sq_err_sum += err.iter().map(|v| v * v).sum::<f64>();
            err_mean += &err;
        }
        let mse = sq_err_sum / trials as f64;
        err_mean /= trials as f64;
        rows.push(VarianceRow {
            num_views,
            trials,
            sigma,
            mse,
            mse_times_v_over_sigma2: if sigma > 0.0 {
                mse * num_views as f64 / (sigma * sigma)
            } else {
                0.0
            },
            mean_deviation: err_mean.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
    }
    Ok(rows)
}

/// Render variance rows as CSV with a fixed header.
pub fn variance_csv(rows: &[VarianceRow]) -> String {
    let mut out =
        String::from("num_views,trials,sigma,mse,mse_times_v_over_sigma2,mean_deviation\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.num_views, r.trials, r.sigma, r.mse, r.mse_times_v_over_sigma2, r.mean_deviation
        ));
    }
    out
}

/// Fused state of one Gaussian across views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalEntry {
    /// Views that contributed transported mass.
    pub valid_views: Vec<usize>,
    /// Normalized fusion weights per contributing view.
    pub weights: BTreeMap<usize, f64>,
    pub canonical_target: Array1<f64>,
}

/// Canonical targets for every Gaussian the fusion stage touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalField {
    pub rho: f64,
    pub entries: BTreeMap<u64, CanonicalEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn map<T>(pairs: Vec<(usize, T)>) -> BTreeMap<usize, T> {
        pairs.into_iter().collect()
    }

    #[test]
    fn weights_normalize_and_drop_empty_views() {
        let w = fusion_weights(&map(vec![(0, 1.0), (1, 3.0), (2, 0.0)]), 1e-8).unwrap();
        assert_eq!(w.len(), 2);
        assert_abs_diff_eq!(w[&0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(w[&1], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(w.values().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(matches!(
            fusion_weights(&map(vec![(0, 0.0)]), 1e-8),
            Err(FusionError::NoValidViews)
        ));
        assert!(matches!(
            fusion_weights(&BTreeMap::new(), 1e-8),
            Err(FusionError::NoValidViews)
        ));
    }

    #[test]
    fn barycenter_matches_hand_computation() {
        let weights = map(vec![(0, 0.25), (1, 0.75)]);
        let targets = map(vec![(0, array![1.0, 0.0]), (1, array![0.0, 1.0])]);
        let s = array![0.0, 0.0];
        let z = canonical_target(&weights, &targets, &s.view(), 1.0).unwrap();
        assert_abs_diff_eq!(z[0], 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(z[1], 0.375, epsilon = 1e-15);
        let z = canonical_target(&weights, &targets, &s.view(), 0.0).unwrap();
        assert_abs_diff_eq!(z[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(z[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn huge_rho_pins_the_target_to_the_latent() {
        let weights = map(vec![(0, 1.0)]);
        let targets = map(vec![(0, array![5.0, 5.0])]);
        let s = array![1.0, -1.0];
        let z = canonical_target(&weights, &targets, &s.view(), 1e12).unwrap();
        assert_abs_diff_eq!(z[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(z[1], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn no_views_with_anchor_returns_the_latent() {
        let s = array![0.3, -0.7];
        let z = canonical_target(&BTreeMap::new(), &BTreeMap::new(), &s.view(), 0.5).unwrap();
        assert_eq!(z, s);
        assert!(matches!(
            canonical_target(&BTreeMap::new(), &BTreeMap::new(), &s.view(), 0.0),
            Err(FusionError::DegenerateDenominator)
        ));
    }

    #[test]
    fn mismatched_view_sets_are_rejected() {
        let weights = map(vec![(0, 1.0)]);
        let targets = map(vec![(1, array![1.0])]);
        let s = array![0.0];
        assert!(matches!(
            canonical_target(&weights, &targets, &s.view(), 0.1),
            Err(FusionError::MismatchedViews)
        ));
    }

    #[test]
    fn stability_bound_holds_and_is_tight_for_colinear_shifts() {
        let weights = map(vec![(0, 0.6), (1, 0.4)]);
        let targets = map(vec![(0, array![1.0, 2.0]), (1, array![-1.0, 0.5])]);
        let s = array![0.2, 0.1];
        // Perturb everything along one direction with positive steps.
        let direction = array![0.6, 0.8];
        let perturbed = map(vec![
            (0, &targets[&0] + &(0.3 * &direction)),
            (1, &targets[&1] + &(0.7 * &direction)),
        ]);
        let s_pert = &s + &(0.2 * &direction);
        let (gap, bound) = stability_gap(
            &weights,
            &targets,
            &perturbed,
            &s.view(),
            &s_pert.view(),
            0.5,
        )
        .unwrap();
        assert!(gap <= bound + 1e-12);
        assert_abs_diff_eq!(gap, bound, epsilon = 1e-12);

        // Opposing perturbations leave slack.
        let opposed = map(vec![
            (0, &targets[&0] + &(0.3 * &direction)),
            (1, &targets[&1] - &(0.7 * &direction)),
        ]);
        let (gap, bound) =
            stability_gap(&weights, &targets, &opposed, &s.view(), &s.view(), 0.5).unwrap();
        assert!(gap < bound);
    }

    #[test]
    fn variance_rows_shrink_like_one_over_views() {
        let rows = variance_experiment(&[1, 4], 0.5, 2000, 0.0, 8, 99).unwrap();
        assert!(rows[0].mse_times_v_over_sigma2 > 0.8);
        assert!(rows[0].mse_times_v_over_sigma2 < 1.2);
        assert!(rows[1].mse_times_v_over_sigma2 > 0.8);
        assert!(rows[1].mse_times_v_over_sigma2 < 1.2);
        assert!(rows[1].mse < rows[0].mse);
    }

    #[test]
    fn zero_noise_fuses_to_machine_precision() {
        // The weighted average rounds, so the error is ulp-sized, not zero.
        let rows = variance_experiment(&[3], 0.0, 50, 0.0, 4, 1).unwrap();
        assert!(rows[0].mse < 1e-26);
        assert!(rows[0].mean_deviation < 1e-13);
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let rows = variance_experiment(&[1, 2], 0.1, 10, 0.0, 4, 0).unwrap();
        let text = variance_csv(&rows);
        let lines: Vec<&str> = text.trim().lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("num_views,trials,sigma,mse"));
    }
}
