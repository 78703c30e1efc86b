//! Reflected solver with a lower (or upper) barrier: direct backward
//! recursion, the Picard variant, and verification of a candidate solution.

use serde::{Deserialize, Serialize};

use crate::bsde::{backward_step, check_contraction, martingale_residuals};
use crate::driver::{Frozen, Generator, Negated, Site};
use crate::error::{Error, Result};
use crate::filtration::{FiltrationTree, NodeRef, Violation};
use crate::process::{AdaptedProcess, LadlagPredictableProcess};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BarrierSide {
    #[default]
    Lower,
    Upper,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RbsdeSolution {
    pub y: LadlagPredictableProcess,
    /// Right limits `Y_{k+}` on post-nodes.
    pub y_plus: AdaptedProcess,
    pub pi: AdaptedProcess,
    pub d_mw: Vec<Vec<f64>>,
    pub d_meta: Vec<Vec<f64>>,
    /// `Y_{k-} - Y_k`
    pub d_a: Vec<Vec<f64>>,
    /// `Y_k - E[Y_{k+} | G_k]`
    pub d_b: Vec<Vec<f64>>,
    /// `E[Y_{k+} | G_k]`
    pub p_y_plus: Vec<Vec<f64>>,
}

impl RbsdeSolution {
    /// `sup |self - other|` over `Y` (both instants), `Y_{k+}` and `π`.
    pub fn sup_distance(&self, other: &RbsdeSolution) -> f64 {
        let d = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.iter().flatten().zip(b.iter().flatten()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
        };
        d(&self.y.left, &other.y.left)
            .max(d(&self.y.value, &other.y.value))
            .max(d(&self.y_plus.values, &other.y_plus.values))
            .max(d(&self.pi.values, &other.pi.values))
    }

    /// `^pY^+` as a process (left and value both equal to it).
    pub fn p_y_plus_process(&self) -> LadlagPredictableProcess {
        LadlagPredictableProcess { left: self.p_y_plus.clone(), value: self.p_y_plus.clone() }
    }

    fn negated(self) -> Self {
        let neg = |v: Vec<Vec<f64>>| v.into_iter().map(|r| r.into_iter().map(|x| -x).collect()).collect();
        RbsdeSolution {
            y: self.y.map(|x| -x),
            y_plus: AdaptedProcess { values: neg(self.y_plus.values) },
            pi: AdaptedProcess { values: neg(self.pi.values) },
            d_mw: neg(self.d_mw),
            d_meta: neg(self.d_meta),
            d_a: self.d_a,
            d_b: self.d_b,
            p_y_plus: neg(self.p_y_plus),
        }
    }
}

pub fn solve_rbsde<G: Generator + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    obstacle: &LadlagPredictableProcess,
    side: BarrierSide,
) -> Result<RbsdeSolution> {
    obstacle.check_shape(tree)?;
    check_contraction(tree, g)?;
    match side {
        BarrierSide::Lower => solve_lower(tree, g, obstacle),
        BarrierSide::Upper => Ok(solve_lower(tree, &Negated(g), &obstacle.map(|x| -x))?.negated()),
    }
}

fn solve_lower<G: Generator + ?Sized>(tree: &FiltrationTree, g: &G, xi: &LadlagPredictableProcess) -> Result<RbsdeSolution> {
    let n = tree.stage_count();
    let mut y_left = vec![Vec::new(); n + 1];
    let mut y_value = vec![Vec::new(); n + 1];
    let mut y_plus = vec![Vec::new(); n + 1];
    let mut pi = vec![Vec::new(); n + 1];
    let mut d_mw = vec![Vec::new(); n + 1];
    let mut d_meta = vec![Vec::new(); n + 1];
    let mut d_a = vec![Vec::new(); n + 1];
    let mut d_b = vec![Vec::new(); n + 1];
    let mut p_y_plus = vec![Vec::new(); n + 1];

    y_value[n] = xi.value[n].clone();
    y_plus[n] = tree.post(n).iter().map(|w| y_value[n][w.parent]).collect();
    pi[n] = vec![0.0; tree.post(n).len()];
    d_meta[n] = vec![0.0; tree.post(n).len()];
    d_b[n] = vec![0.0; tree.pre(n).len()];
    p_y_plus[n] = y_value[n].clone();
    reflect_left(n, xi, &mut y_left, &y_value, &mut d_a);
    d_mw[0] = vec![0.0];

    for k in (0..n).rev() {
        let step = backward_step(tree, g, k, &y_left[k + 1])?;
        let projected = tree.e_pre(k, &step.plus);
        let yk: Vec<f64> = xi.value[k].iter().zip(&projected).map(|(&x, &p)| x.max(p)).collect();
        d_b[k] = yk.iter().zip(&projected).map(|(y, p)| y - p).collect();
        d_meta[k] = tree.post(k).iter().zip(&step.plus).map(|(w, &p)| p - projected[w.parent]).collect();
        d_mw[k + 1] = step.d_mw;
        y_plus[k] = step.plus;
        pi[k] = step.pi;
        p_y_plus[k] = projected;
        y_value[k] = yk;
        reflect_left(k, xi, &mut y_left, &y_value, &mut d_a);
    }

    Ok(RbsdeSolution {
        y: LadlagPredictableProcess { left: y_left, value: y_value },
        y_plus: AdaptedProcess { values: y_plus },
        pi: AdaptedProcess { values: pi },
        d_mw,
        d_meta,
        d_a,
        d_b,
        p_y_plus,
    })
}

fn reflect_left(k: usize, xi: &LadlagPredictableProcess, y_left: &mut [Vec<f64>], y_value: &[Vec<f64>], d_a: &mut [Vec<f64>]) {
    if k == 0 {
        y_left[0] = y_value[0].clone();
        d_a[0] = vec![0.0];
        return;
    }
    y_left[k] = xi.left[k].iter().zip(&y_value[k]).map(|(&l, &y)| l.max(y)).collect();
    d_a[k] = y_left[k].iter().zip(&y_value[k]).map(|(l, y)| l - y).collect();
}

/// Picard iteration: each step solves the reflected problem with the driver
/// frozen at the previous `(Y_{k+}, π_k)`. Starts from the conditional mean
/// of the next left obstacle and its regression slope.
pub fn solve_rbsde_picard<G: Generator + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    obstacle: &LadlagPredictableProcess,
    tol: f64,
    max_iter: usize,
) -> Result<(RbsdeSolution, usize)> {
    obstacle.check_shape(tree)?;
    check_contraction(tree, g)?;
    let n = tree.stage_count();
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut v: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    for k in 0..n {
        u.push(tree.e_post(k, &obstacle.left[k + 1]));
        v.push(tree.dw_slope(k, &obstacle.left[k + 1]));
    }
    u.push(tree.post(n).iter().map(|w| obstacle.value[n][w.parent]).collect());
    v.push(vec![0.0; tree.post(n).len()]);
    let mut y_prev = obstacle.clone();
    let mut change = f64::INFINITY;
    for iteration in 1..=max_iter {
        let frozen = Frozen {
            values: (0..=n)
                .map(|k| {
                    let t = tree.time(k);
                    (0..tree.post(k).len()).map(|j| g.eval(Site { stage: k, node: j, t }, u[k][j], v[k][j])).collect()
                })
                .collect(),
        };
        let sol = solve_lower(tree, &frozen, obstacle)?;
        let d = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.iter().flatten().zip(b.iter().flatten()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
        };
        change = d(&sol.y.left, &y_prev.left)
            .max(d(&sol.y.value, &y_prev.value))
            .max(d(&sol.y_plus.values, &u))
            .max(d(&sol.pi.values, &v));
        if change <= tol {
            return Ok((sol, iteration));
        }
        u = sol.y_plus.values.clone();
        v = sol.pi.values.clone();
        y_prev = sol.y;
    }
    Err(Error::NoConvergence { iterations: max_iter, change })
}

pub const VERIFY_TOL: f64 = 1e-10;

pub const RULE_NEGATIVE_DA: &str = "NEGATIVE_DA";
pub const RULE_NEGATIVE_DB: &str = "NEGATIVE_DB";
pub const RULE_SKOROKHOD_A: &str = "SKOROKHOD_A";
pub const RULE_SKOROKHOD_B: &str = "SKOROKHOD_B";
pub const RULE_JUMP_A: &str = "JUMP_A";
pub const RULE_JUMP_B: &str = "JUMP_B";
pub const RULE_DOMINATION: &str = "DOMINATION";
pub const RULE_PROJECTION: &str = "PROJECTION";
pub const RULE_IDENTITY: &str = "IDENTITY";
pub const RULE_MARTINGALE: &str = "MARTINGALE";
pub const RULE_SHAPE: &str = "SHAPE";

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SkorokhodReport {
    pub violations: Vec<Violation>,
    /// Largest residual of the one-step telescoped equation.
    pub max_identity_residual: f64,
    pub max_martingale_residual: f64,
}

impl SkorokhodReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, rule: &str) -> usize {
        self.violations.iter().filter(|v| v.rule == rule).count()
    }

    fn push(&mut self, rule: &'static str, node: NodeRef, magnitude: f64) {
        self.violations.push(Violation { rule, node, magnitude });
    }
}

/// Checks every defining property of a reflected solution, plus the
/// telescoped one-step equation
/// `Y_k = Y_{k+1} + g(t_k, Y_{k+}, π_k) dt - π_k ΔW_{k+1} - (dMW_{k+1} + dMeta_k) + dA_{k+1} + dB_k`.
pub fn verify_rbsde<G: Generator + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    obstacle: &LadlagPredictableProcess,
    sol: &RbsdeSolution,
    side: BarrierSide,
) -> SkorokhodReport {
    match side {
        BarrierSide::Lower => verify_lower(tree, g, obstacle, sol),
        BarrierSide::Upper => verify_lower(tree, &Negated(g), &obstacle.map(|x| -x), &sol.clone().negated()),
    }
}

fn shape_ok(tree: &FiltrationTree, obstacle: &LadlagPredictableProcess, sol: &RbsdeSolution) -> bool {
    let n = tree.stage_count();
    let pre_ok = |rows: &[Vec<f64>]| rows.len() == n + 1 && (0..=n).all(|k| rows[k].len() == tree.pre(k).len());
    let post_ok = |rows: &[Vec<f64>]| rows.len() == n + 1 && (0..=n).all(|k| rows[k].len() == tree.post(k).len());
    obstacle.check_shape(tree).is_ok()
        && pre_ok(&sol.y.left)
        && pre_ok(&sol.y.value)
        && pre_ok(&sol.d_mw)
        && pre_ok(&sol.d_a)
        && pre_ok(&sol.d_b)
        && pre_ok(&sol.p_y_plus)
        && post_ok(&sol.y_plus.values)
        && post_ok(&sol.pi.values)
        && post_ok(&sol.d_meta)
}

fn verify_lower<G: Generator + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    xi: &LadlagPredictableProcess,
    sol: &RbsdeSolution,
) -> SkorokhodReport {
    let mut report = SkorokhodReport::default();
    if !shape_ok(tree, xi, sol) {
        report.push(RULE_SHAPE, NodeRef::pre(0, 0), f64::INFINITY);
        return report;
    }
    let n = tree.stage_count();
    let tol = VERIFY_TOL;
    for k in 0..=n {
        let projected = tree.e_pre(k, &sol.y_plus.values[k]);
        for i in 0..tree.pre(k).len() {
            let at = NodeRef::pre(k, i);
            let (yl, yv) = (sol.y.left[k][i], sol.y.value[k][i]);
            let (da, db) = (sol.d_a[k][i], sol.d_b[k][i]);
            if da < -tol {
                report.push(RULE_NEGATIVE_DA, at, -da);
            }
            if db < -tol {
                report.push(RULE_NEGATIVE_DB, at, -db);
            }
            let sa = (da * (yl - xi.left[k][i])).abs();
            if sa > tol {
                report.push(RULE_SKOROKHOD_A, at, sa);
            }
            let sb = (db * (yv - xi.value[k][i])).abs();
            if sb > tol {
                report.push(RULE_SKOROKHOD_B, at, sb);
            }
            let ja = (yl - yv - da).abs();
            if ja > tol {
                report.push(RULE_JUMP_A, at, ja);
            }
            let jb = (yv - sol.p_y_plus[k][i] - db).abs();
            if jb > tol {
                report.push(RULE_JUMP_B, at, jb);
            }
            let below = (xi.value[k][i] - yv).max(xi.left[k][i] - yl);
            if below > tol {
                report.push(RULE_DOMINATION, at, below);
            }
            let pr = (projected[i] - sol.p_y_plus[k][i]).abs();
            let meta: f64 = tree
                .pre_children(k, i)
                .map(|j| (sol.y_plus.values[k][j] - sol.p_y_plus[k][i] - sol.d_meta[k][j]).abs())
                .fold(0.0, f64::max);
            if pr.max(meta) > tol {
                report.push(RULE_PROJECTION, at, pr.max(meta));
            }
        }
    }
    for k in 0..n {
        let t = tree.time(k);
        for (i, v) in tree.pre(k + 1).iter().enumerate() {
            let j = v.parent;
            let i0 = tree.post(k)[j].parent;
            let drift = g.eval(Site { stage: k, node: j, t }, sol.y_plus.values[k][j], sol.pi.values[k][j]) * tree.dt();
            let rhs = sol.y.value[k + 1][i] + drift - sol.pi.values[k][j] * v.dw - (sol.d_mw[k + 1][i] + sol.d_meta[k][j])
                + sol.d_a[k + 1][i]
                + sol.d_b[k][i0];
            let r = (sol.y.value[k][i0] - rhs).abs();
            report.max_identity_residual = report.max_identity_residual.max(r);
            if !(r <= tol) {
                report.push(RULE_IDENTITY, NodeRef::pre(k + 1, i), r);
            }
        }
    }
    let terminal = sol.y.value[n].iter().zip(&xi.value[n]).fold(0.0_f64, |m, (y, x)| m.max((y - x).abs()));
    if terminal > tol {
        report.push(RULE_IDENTITY, NodeRef::pre(n, 0), terminal);
    }
    let m = martingale_residuals(tree, &sol.d_mw, &sol.d_meta).max();
    report.max_martingale_residual = m;
    if m > tol {
        report.push(RULE_MARTINGALE, NodeRef::post(0, 0), m);
    }
    report
}
