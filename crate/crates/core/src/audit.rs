//! The invariant suite run on one instance, and seeded sweeps over many.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{g_expectation_from_stage, martingale_residuals, StoppedValue};
use crate::driver::DriverSpec;
use crate::error::Result;
use crate::instance::{generate, GeneratorSpec, Instance};
use crate::io::{model_json, solution_csv, write_atomic};
use crate::oracle::{brute_force_value, count_stopping_times, EnumerationBudget};
use crate::process::{regularity_report, InstantMode};
use crate::rbsde::{solve_rbsde, solve_rbsde_picard, verify_rbsde, BarrierSide};
use crate::stopping::tau_tilde;

pub const MARTINGALE_RESIDUAL_TOL: f64 = 1e-12;
pub const PICARD_TOL: f64 = 1e-12;
pub const PICARD_MAX_ITER: usize = 50;
pub const AGREEMENT_TOL: f64 = 1e-8;
pub const ORACLE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceReport {
    pub seed: u64,
    pub stages: usize,
    pub nodes: usize,
    pub driver: DriverSpec,
    pub lusc: bool,
    pub p_right_dominated: bool,
    pub single_mark: bool,
    pub skorokhod_violations: usize,
    pub max_identity_residual: f64,
    pub max_martingale_residual: f64,
    /// Present when the obstacle is lower semicontinuous from the left.
    pub no_left_reflection: Option<bool>,
    /// Present on single-mark trees.
    pub no_mark_jump: Option<bool>,
    pub picard_iterations: usize,
    pub picard_distance: f64,
    /// `max |Y_0 - E^g_{0,τ̃}(ξ)|` for the doubled-mode `τ̃`.
    pub tau_tilde_gap: f64,
    pub tau_tilde_touches: bool,
    pub stopping_times: String,
    /// `max |Y_0 - oracle|`, present when the enumeration fits the budget.
    pub oracle_gap: Option<f64>,
    /// `max (grid oracle - Y_0)`, present with `oracle_gap`.
    pub grid_excess: Option<f64>,
    pub passed: bool,
}

/// Runs the solver checks on one instance.
pub fn audit_instance(inst: &Instance, budget: u64) -> Result<InstanceReport> {
    let (tree, xi, g) = (&inst.tree, &inst.obstacle, &inst.driver);
    let flags = regularity_report(tree, xi)?;
    let sol = solve_rbsde(tree, g, xi, BarrierSide::Lower)?;
    let check = verify_rbsde(tree, g, xi, &sol, BarrierSide::Lower);
    let mart = martingale_residuals(tree, &sol.d_mw, &sol.d_meta).max();
    let no_left_reflection = flags.lusc.then(|| sol.d_a.iter().flatten().all(|&x| x == 0.0));
    let single_mark = tree.is_single_mark();
    let no_mark_jump = single_mark.then(|| sol.d_meta.iter().flatten().all(|&x| x == 0.0));
    let (picard, picard_iterations) = solve_rbsde_picard(tree, g, xi, PICARD_TOL, PICARD_MAX_ITER)?;
    let picard_distance = sol.sup_distance(&picard);

    let tt = tau_tilde(tree, &sol, 0, InstantMode::Doubled)?;
    let attained = g_expectation_from_stage(tree, g, 0, &tt, xi)?;
    let tau_tilde_gap = (sol.y.value[0][0] - attained[0]).abs();
    let tau_tilde_touches = StoppedValue::sample(tree, &tt, &sol.y)?.max_abs_diff(&StoppedValue::sample(tree, &tt, xi)?) <= 1e-10;

    let count = count_stopping_times(tree, 0, InstantMode::Doubled)?;
    let (oracle_gap, grid_excess) = if count <= budget as u128 {
        let doubled = brute_force_value(tree, g, xi, 0, &EnumerationBudget::new(budget, InstantMode::Doubled))?;
        let grid = brute_force_value(tree, g, xi, 0, &EnumerationBudget::new(budget, InstantMode::Grid))?;
        (Some((doubled.values[0] - sol.y.value[0][0]).abs()), Some(grid.values[0] - sol.y.value[0][0]))
    } else {
        (None, None)
    };

    let monotone = inst.monotonicity_margin() < 1.0;
    let passed = check.is_empty()
        && mart <= MARTINGALE_RESIDUAL_TOL
        && no_left_reflection != Some(false)
        && no_mark_jump != Some(false)
        && picard_distance <= AGREEMENT_TOL
        && tau_tilde_gap <= ORACLE_TOL
        && tau_tilde_touches
        && (!monotone || oracle_gap.is_none_or(|x| x <= ORACLE_TOL))
        && (!monotone || grid_excess.is_none_or(|x| x <= 1e-12));

    Ok(InstanceReport {
        seed: inst.seed,
        stages: tree.stage_count(),
        nodes: tree.node_count(),
        driver: g.spec().clone(),
        lusc: flags.lusc,
        p_right_dominated: flags.p_right_dominated,
        single_mark,
        skorokhod_violations: check.violations.len(),
        max_identity_residual: check.max_identity_residual,
        max_martingale_residual: mart,
        no_left_reflection,
        no_mark_jump,
        picard_iterations,
        picard_distance,
        tau_tilde_gap,
        tau_tilde_touches,
        stopping_times: count.to_string(),
        oracle_gap,
        grid_excess,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub first_seed: u64,
    pub count: u64,
    pub passed: u64,
    pub failed_seeds: Vec<u64>,
    pub oracle_checked: u64,
    pub lusc_instances: u64,
    pub single_mark_instances: u64,
    pub reports: Vec<InstanceReport>,
}

/// Audits `count` instances with seeds `base.seed, base.seed + 1, ...`. When
/// `out` is given, writes one directory per seed (model, solution, report)
/// and a summary, all atomically.
pub fn run_sweep(base: &GeneratorSpec, count: u64, budget: u64, out: Option<&Path>) -> Result<SweepSummary> {
    let runs: Vec<(Instance, InstanceReport, String)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let spec = GeneratorSpec { seed: base.seed.wrapping_add(i), ..base.clone() };
            let inst = generate(&spec)?;
            let report = audit_instance(&inst, budget)?;
            let sol = solve_rbsde(&inst.tree, &inst.driver, &inst.obstacle, BarrierSide::Lower)?;
            let csv = solution_csv(&inst.tree, &inst.obstacle, &sol)?;
            Ok((inst, report, csv))
        })
        .collect::<Result<_>>()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for (inst, report, csv) in &runs {
            let sub = dir.join(format!("seed-{}", inst.seed));
            std::fs::create_dir_all(&sub)?;
            write_atomic(&sub.join("model.json"), model_json(&inst.tree, &inst.obstacle, Some(inst.driver.spec()))?.as_bytes())?;
            write_atomic(&sub.join("solution.csv"), csv.as_bytes())?;
            write_atomic(&sub.join("report.json"), serde_json::to_string_pretty(report)?.as_bytes())?;
        }
    }
    let reports: Vec<InstanceReport> = runs.into_iter().map(|(_, r, _)| r).collect();
    let summary = SweepSummary {
        first_seed: base.seed,
        count,
        passed: reports.iter().filter(|r| r.passed).count() as u64,
        failed_seeds: reports.iter().filter(|r| !r.passed).map(|r| r.seed).collect(),
        oracle_checked: reports.iter().filter(|r| r.oracle_gap.is_some()).count() as u64,
        lusc_instances: reports.iter().filter(|r| r.lusc).count() as u64,
        single_mark_instances: reports.iter().filter(|r| r.single_mark).count() as u64,
        reports,
    };
    if let Some(dir) = out {
        write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    }
    Ok(summary)
}
