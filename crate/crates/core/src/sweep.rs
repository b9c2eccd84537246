//! Hyperparameter sweeps over the standard scenario.
//!
//! A grid file lists candidate values for any subset of the exposed knobs;
//! the sweep runs the toy edit once per grid point and records how well
//! targets converged and how much color leaked elsewhere.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edit::run_edit;
use crate::error::PipelineError;
use crate::toy;

/// Candidate values per tunable. Absent fields keep the scenario default.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ParamGrid {
    pub lambda_sem: Option<Vec<f64>>,
    pub lambda_leak: Option<Vec<f64>>,
    pub epsilon: Option<Vec<f64>>,
    pub tau_r: Option<Vec<f64>>,
    pub rho: Option<Vec<f64>>,
}

impl ParamGrid {
    fn axes(&self) -> [(&'static str, &Option<Vec<f64>>); 5] {
        [
            ("lambda_sem", &self.lambda_sem),
            ("lambda_leak", &self.lambda_leak),
            ("epsilon", &self.epsilon),
            ("tau_r", &self.tau_r),
            ("rho", &self.rho),
        ]
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.axes().iter().all(|(_, v)| v.is_none()) {
            return Err(PipelineError::invalid(
                "empty parameter grid: list values for at least one of \
                 lambda_sem, lambda_leak, epsilon, tau_r, rho",
            ));
        }
        for (name, values) in self.axes() {
            if values.as_ref().is_some_and(|v| v.is_empty()) {
                return Err(PipelineError::invalid(format!(
                    "parameter grid lists no values for {name}"
                )));
            }
        }
        Ok(())
    }
}

/// One grid point and the edit outcome it produced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub lambda_sem: f64,
    pub lambda_leak: f64,
    pub epsilon: f64,
    pub tau_r: f64,
    pub rho: f64,
    pub target_color_error: f64,
    pub leakage: f64,
}

/// Run the toy edit once per grid point, in cartesian order.
pub fn run_sweep(grid: &ParamGrid, seed: u64) -> Result<Vec<SweepRow>, PipelineError> {
    grid.validate()?;
    let base = toy::standard_scenario();
    let axis = |values: &Option<Vec<f64>>, default: f64| -> Vec<f64> {
        values.clone().unwrap_or_else(|| vec![default])
    };
    let lambda_sem = axis(&grid.lambda_sem, base.config.losses.lambda_sem);
    let lambda_leak = axis(&grid.lambda_leak, base.config.losses.lambda_leak);
    let epsilon = axis(&grid.epsilon, base.config.transport.epsilon);
    let tau_r = axis(&grid.tau_r, base.config.gate.tau_r);
    let rho = axis(&grid.rho, base.config.fusion.rho);

    let mut points = Vec::new();
    for &ls in &lambda_sem {
        for &ll in &lambda_leak {
            for &eps in &epsilon {
                for &tr in &tau_r {
                    for &r in &rho {
                        points.push((ls, ll, eps, tr, r));
                    }
                }
            }
        }
    }

    points
        .par_iter()
        .map(|&(ls, ll, eps, tr, r)| {
            let mut scenario = toy::standard_scenario();
            scenario.edit_spec.seed = seed;
            scenario.config.schedule.seed = seed;
            scenario.config.losses.lambda_sem = ls;
            scenario.config.losses.lambda_leak = ll;
            scenario.config.transport.epsilon = eps;
            scenario.config.gate.tau_r = tr;
            scenario.config.fusion.rho = r;
            let views = toy::scenario_views(&scenario)?;
            let (_, report) =
                run_edit(&scenario.scene, &views, &scenario.config, &scenario.target)?;
            Ok(SweepRow {
                lambda_sem: ls,
                lambda_leak: ll,
                epsilon: eps,
                tau_r: tr,
                rho: r,
                target_color_error: report.target_color_error,
                leakage: report.leakage,
            })
        })
        .collect()
}

/// Render sweep rows as CSV with a fixed header.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("lambda_sem,lambda_leak,epsilon,tau_r,rho,target_color_error,leakage\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.lambda_sem, r.lambda_leak, r.epsilon, r.tau_r, r.rho, r.target_color_error, r.leakage
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_is_rejected() {
        let err = run_sweep(&ParamGrid::default(), 1).unwrap_err();
        assert!(err.to_string().contains("empty parameter grid"));

        let hollow = ParamGrid {
            epsilon: Some(vec![]),
            ..ParamGrid::default()
        };
        assert!(run_sweep(&hollow, 1).is_err());
    }

    #[test]
    fn grid_files_round_trip_and_reject_unknown_keys() {
        let grid: ParamGrid = serde_json::from_str(r#"{"lambda_leak": [0.0, 0.5]}"#).unwrap();
        assert_eq!(grid.lambda_leak.as_deref(), Some(&[0.0, 0.5][..]));
        assert!(serde_json::from_str::<ParamGrid>(r#"{"lambda": [1.0]}"#).is_err());
    }

    #[test]
    fn leak_penalty_axis_produces_ordered_rows() {
        let grid = ParamGrid {
            lambda_leak: Some(vec![0.0, 0.5]),
            ..ParamGrid::default()
        };
        let rows = run_sweep(&grid, 42).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].lambda_leak, 0.0);
        assert_eq!(rows[1].lambda_leak, 0.5);
        assert!(rows[1].leakage < rows[0].leakage);
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("lambda_sem,lambda_leak,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
