//! The linear case `g = 0`: the predictable Snell envelope, its Mertens
//! decomposition, and checks of the dynamic-programming algebra.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bsde::g_expectation;
use crate::driver::Driver;
use crate::error::{Error, Result};
use crate::filtration::{check_len, FiltrationTree, NodeRef};
use crate::oracle::{brute_force_value, sample_stopping_time, EnumerationBudget};
use crate::process::{AdaptedProcess, InstantMode, LadlagPredictableProcess};
use crate::rbsde::{solve_rbsde, BarrierSide};

/// Negative increments larger than this make a process fail the supermartingale test.
pub const SUPERMARTINGALE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MertensDecomposition {
    /// `V_{(k+1)-} - E[V_{(k+1)-} | F_k]` on pre-nodes (zero at stage 0).
    pub d_nw: Vec<Vec<f64>>,
    /// `V_{k+} - E[V_{k+} | G_k]` on post-nodes.
    pub d_neta: Vec<Vec<f64>>,
    /// `V_{k-} - V_k`
    pub d_a: Vec<Vec<f64>>,
    /// `V_k - E[V_{k+} | G_k]`
    pub d_b: Vec<Vec<f64>>,
    /// `V_{k+} - E[V_{(k+1)-} | F_k]`, the decrease over the open interval.
    pub d_a_diffuse: Vec<Vec<f64>>,
    /// Every left jump happens where `V_{k-} = ξ_{k-}`.
    pub skorokhod_a: bool,
    /// Every right jump happens where `V_k = ξ_k`.
    pub skorokhod_b: bool,
    /// Largest residual of `V_k = V_{k+1} + dA_{k+1} - dN_{k+1} + da_k - dNη_k + dB_k`.
    pub reconstruction_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnellEnvelope {
    pub v: LadlagPredictableProcess,
    pub v_plus: AdaptedProcess,
    pub decomposition: MertensDecomposition,
}

pub fn snell_envelope(tree: &FiltrationTree, obstacle: &LadlagPredictableProcess) -> Result<SnellEnvelope> {
    let sol = solve_rbsde(tree, &Driver::zero(), obstacle, BarrierSide::Lower)?;
    let decomposition = mertens_decompose(tree, obstacle, &sol.y, &sol.y_plus)?;
    Ok(SnellEnvelope { v: sol.y, v_plus: sol.y_plus, decomposition })
}

/// Splits a predictable supermartingale given at both instants and at right
/// limits into martingale increments and nondecreasing parts.
pub fn mertens_decompose(
    tree: &FiltrationTree,
    obstacle: &LadlagPredictableProcess,
    v: &LadlagPredictableProcess,
    v_plus: &AdaptedProcess,
) -> Result<MertensDecomposition> {
    obstacle.check_shape(tree)?;
    v.check_shape(tree)?;
    v_plus.check_shape(tree)?;
    let n = tree.stage_count();
    let mut d_nw = vec![vec![0.0]];
    let mut d_a_diffuse = Vec::with_capacity(n + 1);
    let mut d_neta = Vec::with_capacity(n + 1);
    let mut d_a = Vec::with_capacity(n + 1);
    let mut d_b = Vec::with_capacity(n + 1);
    for k in 0..=n {
        // no right limit at T: re-projecting V_N over the marks would only add rounding
        let proj = if k < n { tree.e_pre(k, &v_plus.values[k]) } else { v.value[n].clone() };
        if k < n {
            d_neta.push(tree.post(k).iter().zip(&v_plus.values[k]).map(|(w, x)| x - proj[w.parent]).collect::<Vec<_>>());
        } else {
            d_neta.push(vec![0.0; tree.post(n).len()]);
        }
        d_b.push(v.value[k].iter().zip(&proj).map(|(x, p)| x - p).collect::<Vec<_>>());
        d_a.push(v.left[k].iter().zip(&v.value[k]).map(|(l, x)| l - x).collect::<Vec<_>>());
        if k < n {
            let cond = tree.e_post(k, &v.left[k + 1]);
            d_a_diffuse.push(v_plus.values[k].iter().zip(&cond).map(|(x, c)| x - c).collect::<Vec<_>>());
            d_nw.push(tree.pre(k + 1).iter().zip(&v.left[k + 1]).map(|(u, x)| x - cond[u.parent]).collect());
        } else {
            d_a_diffuse.push(tree.post(n).iter().zip(&v_plus.values[n]).map(|(w, x)| x - v.value[n][w.parent]).collect());
        }
    }
    for (name, rows, post) in [("dA", &d_a, false), ("dB", &d_b, false), ("diffuse", &d_a_diffuse, true)] {
        for (k, row) in rows.iter().enumerate() {
            if let Some((i, x)) = row.iter().enumerate().find(|(_, x)| **x < -SUPERMARTINGALE_TOL) {
                let at = if post { NodeRef::post(k, i) } else { NodeRef::pre(k, i) };
                return Err(Error::NotASupermartingale(format!("{name} = {x:e} at {at}")));
            }
        }
    }
    let product_ok = |jumps: &[Vec<f64>], lhs: &[Vec<f64>], rhs: &[Vec<f64>]| {
        jumps
            .iter()
            .flatten()
            .zip(lhs.iter().flatten().zip(rhs.iter().flatten()))
            .all(|(d, (a, b))| (d * (a - b)).abs() <= SUPERMARTINGALE_TOL)
    };
    let skorokhod_a = product_ok(&d_a, &v.left, &obstacle.left);
    let skorokhod_b = product_ok(&d_b, &v.value, &obstacle.value);
    let mut reconstruction_residual: f64 = 0.0;
    for k in 0..n {
        for (i, u) in tree.pre(k + 1).iter().enumerate() {
            let j = u.parent;
            let i0 = tree.post(k)[j].parent;
            let rhs = v.value[k + 1][i] + d_a[k + 1][i] - d_nw[k + 1][i] + d_a_diffuse[k][j] - d_neta[k][j] + d_b[k][i0];
            reconstruction_residual = reconstruction_residual.max((v.value[k][i0] - rhs).abs());
        }
    }
    Ok(MertensDecomposition { d_nw, d_neta, d_a, d_b, d_a_diffuse, skorokhod_a, skorokhod_b, reconstruction_residual })
}

pub const BELLMAN_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BellmanReport {
    /// `E[α V_θ | G_S]` equals the best `E[α ξ_τ | G_S]` over `τ >= θ`.
    pub bellman: bool,
    /// The envelope of `α ξ` equals `α V` from `θ` on.
    pub scaling: bool,
    /// The envelope of `1_A ξ` equals `1_A V` from `S` on.
    pub localization: bool,
    /// `E[V_τ' | G_τ] <= V_τ` on every sampled pair `S <= τ <= τ'`.
    pub supermartingale: bool,
    pub bellman_gap: f64,
    pub scaling_gap: f64,
    pub localization_gap: f64,
    pub supermartingale_excess: f64,
    pub samples: usize,
}

impl BellmanReport {
    pub fn all(&self) -> bool {
        self.bellman && self.scaling && self.localization && self.supermartingale
    }
}

/// Reduces a per-post-node array to a per-pre-node one, failing when it
/// differs across the marks of a pre-node.
fn pre_measurable<T: Copy + PartialEq>(tree: &FiltrationTree, k: usize, values: &[T], what: &str) -> Result<Vec<T>> {
    check_len("post", k, values.len(), tree.post(k).len())?;
    (0..tree.pre(k).len())
        .map(|i| {
            let r = tree.pre_children(k, i);
            let first = values[r.start];
            if values[r].iter().any(|x| *x != first) {
                return Err(Error::Measurability(format!("{what} differs across the marks of {}", NodeRef::pre(k, i))));
            }
            Ok(first)
        })
        .collect()
}

/// Extends per-pre-node values at stage `s` to all descendants.
fn extend_down(tree: &FiltrationTree, s: usize, at_s: &[f64]) -> Vec<Vec<f64>> {
    let n = tree.stage_count();
    let mut out: Vec<Vec<f64>> = (0..=n).map(|k| vec![0.0; tree.pre(k).len()]).collect();
    out[s] = at_s.to_vec();
    for k in s..n {
        out[k + 1] = tree.pre(k + 1).iter().map(|u| out[k][tree.post(k)[u.parent].parent]).collect();
    }
    out
}

/// Largest gap between two processes at the instants `>= stage` (value instant).
fn gap_from(a: &LadlagPredictableProcess, b: &LadlagPredictableProcess, stage: usize) -> f64 {
    let mut gap: f64 = 0.0;
    for k in stage..a.value.len() {
        for i in 0..a.value[k].len() {
            gap = gap.max((a.value[k][i] - b.value[k][i]).abs());
            if k > stage {
                gap = gap.max((a.left[k][i] - b.left[k][i]).abs());
            }
        }
    }
    gap
}

/// `α` is given on the post-nodes of stage `θ` and `A` on those of stage `S`;
/// both must be constant across marks.
pub fn bellman_check(
    tree: &FiltrationTree,
    obstacle: &LadlagPredictableProcess,
    s: usize,
    theta: usize,
    alpha: &[f64],
    event: &[bool],
    budget: &EnumerationBudget,
    samples: usize,
    seed: u64,
) -> Result<BellmanReport> {
    let n = tree.stage_count();
    if s > theta || theta > n {
        return Err(Error::InvalidArgument(format!("need S <= θ <= N, got S={s}, θ={theta}")));
    }
    let alpha_pre = pre_measurable(tree, theta, alpha, "α")?;
    if alpha_pre.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::InvalidArgument("α must be finite and nonnegative".into()));
    }
    let in_a = pre_measurable(tree, s, event, "A")?;
    let env = snell_envelope(tree, obstacle)?;
    let v = &env.v;

    let alpha_ext = extend_down(tree, theta, &alpha_pre);
    let scaled_obstacle = scale(obstacle, &alpha_ext);
    let scaled_v = scale(v, &alpha_ext);

    let lhs_at_theta: Vec<f64> = alpha_pre.iter().zip(&v.value[theta]).map(|(a, x)| a * x).collect();
    let lhs = tree.expect_pre_to_pre(theta, s, &lhs_at_theta)?;
    let best = brute_force_value(
        tree,
        &Driver::zero(),
        &scaled_obstacle,
        theta,
        &EnumerationBudget::new(budget.max_count, InstantMode::Doubled),
    )?;
    let rhs = tree.expect_pre_to_pre(theta, s, &best.values)?;
    let bellman_gap = lhs.iter().zip(&rhs).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));

    let scaled_env = snell_envelope(tree, &scaled_obstacle)?;
    let scaling_gap = gap_from(&scaled_env.v, &scaled_v, theta);

    let indicator = extend_down(tree, s, &in_a.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>());
    let local_env = snell_envelope(tree, &scale(obstacle, &indicator))?;
    let localization_gap = gap_from(&local_env.v, &scale(v, &indicator), s);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero = Driver::zero();
    let mut excess = f64::NEG_INFINITY;
    for _ in 0..samples {
        let tau = sample_stopping_time(tree, s, budget.mode, &mut rng);
        let other = sample_stopping_time(tree, s, budget.mode, &mut rng);
        let later = tau.pointwise_max(&other, tree)?;
        let cond = g_expectation(tree, &zero, &tau, &later, v)?;
        let here = crate::bsde::StoppedValue::sample(tree, &tau, v)?;
        for ((_, _, c), (_, _, h)) in cond.defined().zip(here.defined()) {
            excess = excess.max(c - h);
        }
    }
    let supermartingale_excess = if samples == 0 { 0.0 } else { excess };

    Ok(BellmanReport {
        bellman: bellman_gap <= BELLMAN_TOL,
        scaling: scaling_gap <= BELLMAN_TOL,
        localization: localization_gap <= BELLMAN_TOL,
        supermartingale: supermartingale_excess <= BELLMAN_TOL,
        bellman_gap,
        scaling_gap,
        localization_gap,
        supermartingale_excess,
        samples,
    })
}

fn scale(x: &LadlagPredictableProcess, factor: &[Vec<f64>]) -> LadlagPredictableProcess {
    let mul = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter().zip(factor).map(|(r, f)| r.iter().zip(f).map(|(a, b)| a * b).collect()).collect()
    };
    let mut out = LadlagPredictableProcess { left: mul(&x.left), value: mul(&x.value) };
    out.left[0] = out.value[0].clone();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtration::build_lattice;

    fn fix_b() -> (FiltrationTree, LadlagPredictableProcess) {
        let t = build_lattice(1, 1.0, &[(1.0, 0.5), (-1.0, 0.5)], &[("x", 1.0)]).unwrap();
        let xi = LadlagPredictableProcess { left: vec![vec![0.2], vec![1.0, 0.0]], value: vec![vec![0.2], vec![1.0, 0.0]] };
        (t, xi)
    }

    #[test]
    fn constant_envelope() {
        let (t, _) = fix_b();
        let env = snell_envelope(&t, &LadlagPredictableProcess::constant(&t, 3.0)).unwrap();
        assert_eq!(env.v, LadlagPredictableProcess::constant(&t, 3.0));
        let d = &env.decomposition;
        assert!(d.d_nw.iter().chain(&d.d_a).chain(&d.d_b).flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn non_supermartingale_is_rejected() {
        let (t, xi) = fix_b();
        let v = LadlagPredictableProcess { left: vec![vec![0.0], vec![1.0, 0.0]], value: vec![vec![0.0], vec![1.0, 0.0]] };
        let v_plus = AdaptedProcess { values: vec![vec![0.5], vec![1.0, 0.0]] };
        assert!(matches!(mertens_decompose(&t, &xi, &v, &v_plus), Err(Error::NotASupermartingale(_))));
    }

    #[test]
    fn bellman_trivial_cases() {
        let (t, xi) = fix_b();
        let b = EnumerationBudget::default();
        let zero = bellman_check(&t, &xi, 0, 1, &[0.0, 0.0], &[true], &b, 10, 1).unwrap();
        assert!(zero.all());
        let one = bellman_check(&t, &xi, 0, 0, &[1.0], &[true], &b, 10, 1).unwrap();
        assert!(one.all());
        assert_eq!(one.bellman_gap, 0.0);
    }

    #[test]
    fn bellman_rejects_mark_dependent_weights() {
        let t = build_lattice(1, 1.0, &[(1.0, 0.5), (-1.0, 0.5)], &[("u", 0.5), ("d", 0.5)]).unwrap();
        let xi = LadlagPredictableProcess::zeros(&t);
        let r = bellman_check(&t, &xi, 0, 1, &[1.0, 0.0, 1.0, 1.0], &[true], &EnumerationBudget::default(), 0, 0);
        assert!(matches!(r, Err(Error::Measurability(_))));
    }
}
