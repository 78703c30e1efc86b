//! Nonlinear optimal stopping: the value function, the rules `τ^α`, `θ^α`
//! and `τ̃`, martingale windows, and the optimality criterion.

use serde::Serialize;

use crate::bsde::{g_expectation, g_expectation_from_stage, StoppedValue};
use crate::driver::{Generator, Site};
use crate::error::{Error, Result};
use crate::filtration::FiltrationTree;
use crate::process::{
    validate_stopping_time, AtomState, Decision, ExtendedStoppingTime, Instant, InstantMode, LadlagPredictableProcess, Side,
};
use crate::rbsde::{solve_rbsde, BarrierSide, RbsdeSolution};

pub const OPTIMALITY_TOL: f64 = 1e-9;
pub const MARTINGALE_TOL: f64 = 1e-10;

/// `Y_S` on the `G_S` atoms.
pub fn value_function<G: Generator + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    obstacle: &LadlagPredictableProcess,
    s: usize,
) -> Result<Vec<f64>> {
    check_stage(tree, s)?;
    Ok(solve_rbsde(tree, g, obstacle, BarrierSide::Lower)?.y.value[s].clone())
}

fn check_stage(tree: &FiltrationTree, s: usize) -> Result<()> {
    if s > tree.stage_count() {
        return Err(Error::InvalidArgument(format!("stage {s} is beyond the horizon {}", tree.stage_count())));
    }
    Ok(())
}

/// Pathwise `Σ_{j<k} g(t_j, Y_{j+}, π_j) dt` on the pre-nodes of each stage.
pub fn running_cost<G: Generator + ?Sized>(tree: &FiltrationTree, g: &G, sol: &RbsdeSolution) -> Vec<Vec<f64>> {
    let n = tree.stage_count();
    let mut out = vec![vec![0.0]];
    for k in 0..n {
        let t = tree.time(k);
        let next = tree
            .pre(k + 1)
            .iter()
            .map(|u| {
                let j = u.parent;
                let i0 = tree.post(k)[j].parent;
                let site = Site { stage: k, node: j, t };
                out[k][i0] + g.eval(site, sol.y_plus.values[k][j], sol.pi.values[k][j]) * tree.dt()
            })
            .collect();
        out.push(next);
    }
    out
}

/// Stops at the first instant `>= S` (scanning `S, (S+1)-, S+1, ...`) where
/// `test(instant, atom)` holds, and at `T` otherwise.
fn first_instant(tree: &FiltrationTree, s: usize, mut test: impl FnMut(Instant, usize) -> bool) -> ExtendedStoppingTime {
    let n = tree.stage_count();
    ExtendedStoppingTime::from_fn(tree, |k, i| {
        if k < s {
            Decision::Continue
        } else if k > s && test(Instant::left(k), i) {
            Decision::Left
        } else if k == n || test(Instant::value(k), i) {
            Decision::Value
        } else {
            Decision::Continue
        }
    })
}

/// `τ^α(S) = inf{t >= S : α Y_t + (α - 1) G_t <= ξ_t}` with `G` the running cost.
pub fn tau_alpha<G: Generator + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    obstacle: &LadlagPredictableProcess,
    sol: &RbsdeSolution,
    s: usize,
    alpha: f64,
) -> Result<ExtendedStoppingTime> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    check_stage(tree, s)?;
    let cost = running_cost(tree, g, sol);
    Ok(first_instant(tree, s, |inst, i| {
        alpha * sol.y.get(inst, i) + (alpha - 1.0) * cost[inst.stage][i] <= obstacle.get(inst, i)
    }))
}

/// `θ^α(S)`: the first instant `>= S` where `α Y <= ξ`.
pub fn theta_alpha(
    tree: &FiltrationTree,
    obstacle: &LadlagPredictableProcess,
    sol: &RbsdeSolution,
    s: usize,
    alpha: f64,
) -> Result<ExtendedStoppingTime> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidAlpha(alpha));
    }
    check_stage(tree, s)?;
    Ok(first_instant(tree, s, |inst, i| alpha * sol.y.get(inst, i) <= obstacle.get(inst, i)))
}

/// The latest stopping time keeping both reflections idle. In doubled mode it
/// stops at `m` when `dB_m > 0` and at `(m+1)-` when `dA_{m+1} > 0`; in grid
/// mode it stops at `m` as soon as either can happen next.
pub fn tau_tilde(tree: &FiltrationTree, sol: &RbsdeSolution, s: usize, mode: InstantMode) -> Result<ExtendedStoppingTime> {
    check_stage(tree, s)?;
    let n = tree.stage_count();
    Ok(ExtendedStoppingTime::from_fn(tree, |k, i| {
        if k < s {
            return Decision::Continue;
        }
        match mode {
            InstantMode::Doubled => {
                if k > s && sol.d_a[k][i] > 0.0 {
                    Decision::Left
                } else if k == n || sol.d_b[k][i] > 0.0 {
                    Decision::Value
                } else {
                    Decision::Continue
                }
            }
            InstantMode::Grid => {
                let a_ahead =
                    k < n && tree.pre_children(k, i).flat_map(|j| tree.post_children(k, j)).any(|c| sol.d_a[k + 1][c] > 0.0);
                if k == n || sol.d_b[k][i] > 0.0 || a_ahead {
                    Decision::Value
                } else {
                    Decision::Continue
                }
            }
        }
    }))
}

/// Largest pathwise increase of `A` over `]S, τ]` and of `B` over `[S-, τ-)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReflectionWindow {
    pub a_increase: f64,
    pub b_increase: f64,
}

pub fn reflection_window(
    tree: &FiltrationTree,
    sol: &RbsdeSolution,
    s: usize,
    tau: &ExtendedStoppingTime,
) -> Result<ReflectionWindow> {
    check_window(tree, s, tau)?;
    let states = tau.resolve(tree)?;
    let n = tree.stage_count();
    let mut a_increase: f64 = 0.0;
    let mut b_increase: f64 = 0.0;
    // running sums on pre-nodes of the current stage
    let mut a_sum = vec![0.0; tree.pre(s).len()];
    let mut b_sum = vec![0.0; tree.pre(s).len()];
    for k in s..=n {
        for (i, st) in states[k].iter().enumerate() {
            match *st {
                AtomState::Unreached => {}
                AtomState::Stop(side) => {
                    let a = if k > s && side == Side::Value { a_sum[i] + sol.d_a[k][i] } else { a_sum[i] };
                    a_increase = a_increase.max(a);
                    b_increase = b_increase.max(b_sum[i]);
                }
                AtomState::Continue => {
                    if k > s {
                        a_sum[i] += sol.d_a[k][i];
                    }
                    b_sum[i] += sol.d_b[k][i];
                }
            }
        }
        if k < n {
            let parent = |u: &crate::filtration::PreNode| tree.post(k)[u.parent].parent;
            a_sum = tree.pre(k + 1).iter().map(|u| a_sum[parent(u)]).collect();
            b_sum = tree.pre(k + 1).iter().map(|u| b_sum[parent(u)]).collect();
        }
    }
    Ok(ReflectionWindow { a_increase, b_increase })
}

fn check_window(tree: &FiltrationTree, s: usize, tau: &ExtendedStoppingTime) -> Result<()> {
    check_stage(tree, s)?;
    let report = validate_stopping_time(tree, tau, s);
    if let Some(v) = report.violations.first() {
        return Err(Error::BadStoppingTime(format!("{} at {}", v.rule, v.node)));
    }
    Ok(())
}

/// True when neither reflection moves on `[S, τ]`, so that `Y` solves the
/// plain equation there.
pub fn is_martingale_interval(tree: &FiltrationTree, sol: &RbsdeSolution, s: usize, tau: &ExtendedStoppingTime) -> Result<bool> {
    let w = reflection_window(tree, sol, s, tau)?;
    Ok(w.a_increase == 0.0 && w.b_increase == 0.0)
}

/// The intermediate times `S`, `τ ∧ j-` and `τ ∧ j` for `j > S`.
pub fn intermediate_times(tree: &FiltrationTree, s: usize, tau: &ExtendedStoppingTime) -> Result<Vec<ExtendedStoppingTime>> {
    check_window(tree, s, tau)?;
    let mut out = vec![ExtendedStoppingTime::at_stage(tree, s)?];
    for j in s + 1..=tree.stage_count() {
        for inst in [Instant::left(j), Instant::value(j)] {
            let c = ExtendedStoppingTime::constant(tree, inst)?;
            out.push(tau.pointwise_min(&c, tree)?);
        }
    }
    Ok(out)
}

/// Checks `E^g_{σ,τ}(Y_τ) = Y_σ` directly for every intermediate time `σ`.
pub fn martingale_interval_direct<G: Generator + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    sol: &RbsdeSolution,
    s: usize,
    tau: &ExtendedStoppingTime,
    tol: f64,
) -> Result<bool> {
    for sigma in intermediate_times(tree, s, tau)? {
        let lhs = g_expectation(tree, g, &sigma, tau, &sol.y)?;
        let rhs = StoppedValue::sample(tree, &sigma, &sol.y)?;
        if lhs.max_abs_diff(&rhs) > tol {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Criterion {
    pub a: bool,
    pub b: bool,
    pub c: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StoppingDiagnostics {
    #[serde(rename = "S")]
    pub s: usize,
    pub tau: ExtendedStoppingTime,
    /// `E^g_{S,τ}(ξ_τ)` per `G_S` atom.
    pub value_per_atom: Vec<f64>,
    /// `Y_S - E^g_{S,τ}(ξ_τ)` per atom.
    #[serde(skip)]
    pub gap: Vec<f64>,
    pub criterion: Criterion,
}

/// Evaluates the three equivalent forms of optimality of `τ*` for the problem
/// started at `S`:
/// (a) `Y_S = E^g_{S,τ*}(ξ_τ*)`;
/// (b) `Y_τ* = ξ_τ*` and `E^g_{0,S}(Y_S) = E^g_{0,τ*}(Y_τ*)`;
/// (c) `E^g_{0,S}(Y_S) = E^g_{0,τ*}(ξ_τ*)`.
pub fn optimality_report<G: Generator + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    obstacle: &LadlagPredictableProcess,
    sol: &RbsdeSolution,
    s: usize,
    tau: &ExtendedStoppingTime,
) -> Result<StoppingDiagnostics> {
    check_window(tree, s, tau)?;
    let tol = OPTIMALITY_TOL;
    let value_per_atom = g_expectation_from_stage(tree, g, s, tau, obstacle)?;
    let gap: Vec<f64> = sol.y.value[s].iter().zip(&value_per_atom).map(|(y, v)| y - v).collect();
    let a = gap.iter().all(|d| d.abs() <= tol);

    let at_s = ExtendedStoppingTime::at_stage(tree, s)?;
    let root = ExtendedStoppingTime::at_stage(tree, 0)?;
    let y_s = g_expectation(tree, g, &root, &at_s, &sol.y)?.values[0][0].expect("root stops at 0");
    let y_tau = g_expectation(tree, g, &root, tau, &sol.y)?.values[0][0].expect("root stops at 0");
    let xi_tau = g_expectation(tree, g, &root, tau, obstacle)?.values[0][0].expect("root stops at 0");
    let touches = StoppedValue::sample(tree, tau, &sol.y)?.max_abs_diff(&StoppedValue::sample(tree, tau, obstacle)?) <= tol;
    let b = touches && (y_s - y_tau).abs() <= tol;
    let c = (y_s - xi_tau).abs() <= tol;
    Ok(StoppingDiagnostics { s, tau: tau.canonical(tree)?, value_per_atom, gap, criterion: Criterion { a, b, c } })
}
