//! The predictable BSDE on a filtration tree and the nonlinear evaluation
//! `E^g_{σ,τ}` between two previsible stopping times.

use serde::Serialize;

use crate::driver::{Generator, Site};
use crate::error::{Error, Result};
use crate::filtration::{check_len, FiltrationTree};
use crate::process::{AdaptedProcess, AtomState, ExtendedStoppingTime, Instant, LadlagPredictableProcess, Payoff, Side};

pub const STEP_TOL: f64 = 1e-14;
pub const MAX_STEP_ITER: usize = 200;

/// Solves `y = e + g(t, y, π) dt` by fixed-point iteration. The stopping rule
/// is relative for `|y| > 1`.
pub fn step_solve<G: Generator + ?Sized>(e: f64, pi: f64, site: Site, g: &G, dt: f64, tol: f64) -> Result<f64> {
    let kdt = g.lipschitz() * dt;
    if kdt >= 1.0 {
        return Err(Error::NoContraction(kdt));
    }
    iterate_step(e, pi, site, g, dt, tol)
}

fn iterate_step<G: Generator + ?Sized>(e: f64, pi: f64, site: Site, g: &G, dt: f64, tol: f64) -> Result<f64> {
    let mut y = e;
    let mut change = f64::INFINITY;
    for _ in 0..MAX_STEP_ITER {
        let next = e + g.eval(site, y, pi) * dt;
        change = (next - y).abs();
        y = next;
        if change <= tol * y.abs().max(1.0) {
            return Ok(y);
        }
    }
    Err(Error::NoConvergence { iterations: MAX_STEP_ITER, change })
}

pub(crate) fn check_contraction<G: Generator + ?Sized>(tree: &FiltrationTree, g: &G) -> Result<()> {
    let kdt = g.lipschitz() * tree.dt();
    if kdt >= 1.0 {
        return Err(Error::NoContraction(kdt));
    }
    Ok(())
}

/// Output of one backward step from a target on `pre[k+1]` to the post-nodes of stage `k`.
pub(crate) struct Step {
    pub pi: Vec<f64>,
    pub plus: Vec<f64>,
    pub d_mw: Vec<f64>,
}

pub(crate) fn backward_step<G: Generator + ?Sized>(tree: &FiltrationTree, g: &G, k: usize, target: &[f64]) -> Result<Step> {
    let e = tree.e_post(k, target);
    let pi = tree.dw_slope(k, target);
    let t = tree.time(k);
    let plus = e
        .iter()
        .zip(&pi)
        .enumerate()
        .map(|(j, (&ej, &pj))| iterate_step(ej, pj, Site { stage: k, node: j, t }, g, tree.dt(), STEP_TOL))
        .collect::<Result<Vec<f64>>>()?;
    let d_mw = tree.pre(k + 1).iter().zip(target).map(|(v, &x)| x - e[v.parent] - pi[v.parent] * v.dw).collect();
    Ok(Step { pi, plus, d_mw })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BsdeSolution {
    /// Left values equal values.
    pub x: LadlagPredictableProcess,
    pub x_plus: AdaptedProcess,
    pub pi: AdaptedProcess,
    /// Residual of the `W` sub-step, on the pre-nodes of each stage (zero at stage 0).
    pub d_mw: Vec<Vec<f64>>,
    /// Jump of the martingale part when the mark is revealed, on post-nodes.
    pub d_meta: Vec<Vec<f64>>,
}

pub fn solve_bsde<G: Generator + ?Sized>(tree: &FiltrationTree, g: &G, terminal: &[f64]) -> Result<BsdeSolution> {
    check_contraction(tree, g)?;
    let n = tree.stage_count();
    check_len("pre", n, terminal.len(), tree.pre(n).len())?;
    let mut x = vec![Vec::new(); n + 1];
    let mut x_plus = vec![Vec::new(); n + 1];
    let mut pi = vec![Vec::new(); n + 1];
    let mut d_mw = vec![Vec::new(); n + 1];
    let mut d_meta = vec![Vec::new(); n + 1];
    x[n] = terminal.to_vec();
    x_plus[n] = tree.post(n).iter().map(|w| terminal[w.parent]).collect();
    pi[n] = vec![0.0; tree.post(n).len()];
    d_meta[n] = vec![0.0; tree.post(n).len()];
    d_mw[0] = vec![0.0];
    for k in (0..n).rev() {
        let step = backward_step(tree, g, k, &x[k + 1])?;
        let xk = tree.e_pre(k, &step.plus);
        d_meta[k] = tree.post(k).iter().zip(&step.plus).map(|(w, &p)| p - xk[w.parent]).collect();
        d_mw[k + 1] = step.d_mw;
        x_plus[k] = step.plus;
        pi[k] = step.pi;
        x[k] = xk;
    }
    Ok(BsdeSolution {
        x: LadlagPredictableProcess { left: x.clone(), value: x },
        x_plus: AdaptedProcess { values: x_plus },
        pi: AdaptedProcess { values: pi },
        d_mw,
        d_meta,
    })
}

/// Largest residuals of the orthogonality relations of the martingale parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MartingaleResiduals {
    /// `max |E[dMW_{k+1} | F_k]|`
    pub w_mean: f64,
    /// `max |E[dMW_{k+1} ΔW_{k+1} | F_k]|`
    pub w_orthogonal: f64,
    /// `max |E[dMeta_k | G_k]|`
    pub eta_mean: f64,
}

impl MartingaleResiduals {
    pub fn max(&self) -> f64 {
        self.w_mean.max(self.w_orthogonal).max(self.eta_mean)
    }
}

pub fn martingale_residuals(tree: &FiltrationTree, d_mw: &[Vec<f64>], d_meta: &[Vec<f64>]) -> MartingaleResiduals {
    let mut r = MartingaleResiduals::default();
    let sup = |v: Vec<f64>| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    for k in 0..tree.stage_count() {
        r.w_mean = r.w_mean.max(sup(tree.e_post(k, &d_mw[k + 1])));
        r.w_orthogonal = r.w_orthogonal.max(sup(tree.dw_slope(k, &d_mw[k + 1])) * tree.dt());
    }
    for k in 0..=tree.stage_count() {
        r.eta_mean = r.eta_mean.max(sup(tree.e_pre(k, &d_meta[k])));
    }
    r
}

/// Values attached to the atoms where a stopping time stops; `None` elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StoppedValue {
    pub values: Vec<Vec<Option<f64>>>,
}

impl StoppedValue {
    /// Collects `payoff` at the stopping atoms of `tau`.
    pub fn sample<P: Payoff + ?Sized>(tree: &FiltrationTree, tau: &ExtendedStoppingTime, payoff: &P) -> Result<Self> {
        let states = tau.resolve(tree)?;
        let values = states
            .iter()
            .enumerate()
            .map(|(k, row)| {
                row.iter()
                    .enumerate()
                    .map(|(i, s)| match *s {
                        AtomState::Stop(side) => Some(payoff.at(Instant { stage: k, side }, i)),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        Ok(StoppedValue { values })
    }

    /// Largest `|self - other|` over atoms where both are defined.
    pub fn max_abs_diff(&self, other: &StoppedValue) -> f64 {
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).abs()))
            .fold(0.0, f64::max)
    }

    pub fn defined(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.values.iter().enumerate().flat_map(|(k, row)| row.iter().enumerate().filter_map(move |(i, v)| v.map(|x| (k, i, x))))
    }
}

impl Payoff for StoppedValue {
    fn at(&self, instant: Instant, atom: usize) -> f64 {
        self.values[instant.stage][atom].unwrap_or(f64::NAN)
    }
}

/// `E^g_{σ,τ}(payoff_τ)` for previsible `σ <= τ`: the plain BSDE run backward
/// from the stopping atoms of `τ`, read at the stopping atoms of `σ`.
pub fn g_expectation<G: Generator + ?Sized, P: Payoff + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    sigma: &ExtendedStoppingTime,
    tau: &ExtendedStoppingTime,
    payoff: &P,
) -> Result<StoppedValue> {
    check_contraction(tree, g)?;
    let sig = sigma.resolve(tree)?;
    if !sigma.is_le(tau, tree)? {
        return Err(Error::BadStoppingTime("the initial time exceeds the final time on some path".into()));
    }
    let states = tau.resolve(tree)?;
    let n = tree.stage_count();
    let first = sig.iter().position(|row| row.iter().any(|s| matches!(s, AtomState::Stop(_)))).unwrap_or(0);
    let mut left: Vec<Vec<f64>> = (0..=n).map(|k| vec![f64::NAN; tree.pre(k).len()]).collect();
    let mut value = left.clone();
    for k in (first..=n).rev() {
        let mut plus = vec![f64::NAN; tree.post(k).len()];
        if k < n {
            let t = tree.time(k);
            for (j, w) in tree.post(k).iter().enumerate() {
                if states[k][w.parent] != AtomState::Continue {
                    continue;
                }
                let kids = tree.post_children(k, j);
                let nodes = &tree.pre(k + 1)[kids.clone()];
                let target = &left[k + 1][kids];
                let e: f64 = nodes.iter().zip(target).map(|(v, x)| v.p * x).sum();
                let pi: f64 = nodes.iter().zip(target).map(|(v, x)| v.p * x * v.dw).sum::<f64>() / tree.dt();
                plus[j] = iterate_step(e, pi, Site { stage: k, node: j, t }, g, tree.dt(), STEP_TOL)?;
            }
        }
        for (i, s) in states[k].iter().enumerate() {
            match *s {
                AtomState::Unreached => {}
                AtomState::Stop(Side::Left) => left[k][i] = payoff.at(Instant::left(k), i),
                AtomState::Stop(Side::Value) => {
                    value[k][i] = payoff.at(Instant::value(k), i);
                    left[k][i] = value[k][i];
                }
                AtomState::Continue => {
                    let r = tree.pre_children(k, i);
                    let v: f64 = tree.post(k)[r.clone()].iter().zip(&plus[r]).map(|(w, x)| w.q * x).sum();
                    value[k][i] = v;
                    left[k][i] = v;
                }
            }
        }
    }
    let values = sig
        .iter()
        .enumerate()
        .map(|(k, row)| {
            row.iter()
                .enumerate()
                .map(|(i, s)| match *s {
                    AtomState::Stop(Side::Left) => Some(left[k][i]),
                    AtomState::Stop(Side::Value) => Some(value[k][i]),
                    _ => None,
                })
                .collect()
        })
        .collect();
    Ok(StoppedValue { values })
}

/// `E^g_{S,τ}(payoff_τ)` on the `G_S` atoms.
pub fn g_expectation_from_stage<G: Generator + ?Sized, P: Payoff + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    s: usize,
    tau: &ExtendedStoppingTime,
    payoff: &P,
) -> Result<Vec<f64>> {
    let sigma = ExtendedStoppingTime::at_stage(tree, s)?;
    let out = g_expectation(tree, g, &sigma, tau, payoff)?;
    Ok(out.values[s].iter().map(|v| v.expect("every atom stops at S")).collect())
}

/// `E^g_{from,to}(values)` for values on the `G_to` atoms, at deterministic stages.
pub fn g_expectation_between<G: Generator + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    from: usize,
    to: usize,
    values: &[f64],
) -> Result<Vec<f64>> {
    if from > to || to > tree.stage_count() {
        return Err(Error::BadStoppingTime(format!("cannot evaluate from stage {from} to stage {to}")));
    }
    check_len("pre", to, values.len(), tree.pre(to).len())?;
    check_contraction(tree, g)?;
    let mut cur = values.to_vec();
    for k in (from..to).rev() {
        let step = backward_step(tree, g, k, &cur)?;
        cur = tree.e_pre(k, &step.plus);
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::Driver;
    use crate::filtration::build_lattice;

    fn fix_b() -> FiltrationTree {
        build_lattice(1, 1.0, &[(1.0, 0.5), (-1.0, 0.5)], &[("x", 1.0)]).unwrap()
    }

    #[test]
    fn step_solve_examples() {
        let site = Site::at_time(0.0);
        assert_eq!(step_solve(0.7, 0.3, site, &Driver::zero(), 1.0, STEP_TOL).unwrap(), 0.7);
        let y = step_solve(0.5, 0.0, site, &Driver::discount(0.1), 1.0, STEP_TOL).unwrap();
        assert!((y - 0.5 / 1.1).abs() < 1e-14);
        assert!(matches!(step_solve(0.5, 0.0, site, &Driver::discount(1.2), 1.0, STEP_TOL), Err(Error::NoContraction(_))));
    }

    #[test]
    fn zero_terminal_gives_zero_solution() {
        let t = fix_b();
        let sol = solve_bsde(&t, &Driver::ambiguity(0.3, 0.2), &[0.0, 0.0]).unwrap();
        assert!(sol.x.sup_abs() == 0.0 && sol.pi.sup_abs() == 0.0);
        assert!(sol.d_mw.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn binomial_replication() {
        let t = fix_b();
        let sol = solve_bsde(&t, &Driver::zero(), &[1.0, 0.0]).unwrap();
        assert_eq!(sol.x.value[0][0], 0.5);
        assert_eq!(sol.pi.values[0][0], 0.5);
        assert!(sol.d_mw.iter().flatten().chain(sol.d_meta.iter().flatten()).all(|&v| v == 0.0));
    }

    #[test]
    fn g_expectation_at_equal_times_is_identity() {
        let t = fix_b();
        let xi = LadlagPredictableProcess::from_fn(&t, |inst, i| inst.rank() as f64 + i as f64);
        for tau in [ExtendedStoppingTime::at_stage(&t, 1).unwrap(), ExtendedStoppingTime::constant(&t, Instant::left(1)).unwrap()]
        {
            let v = g_expectation(&t, &Driver::discount(0.2), &tau, &tau, &xi).unwrap();
            assert_eq!(v, StoppedValue::sample(&t, &tau, &xi).unwrap());
        }
    }

    #[test]
    fn stage_evaluations_agree() {
        let t = fix_b();
        let xi = LadlagPredictableProcess::from_fn(&t, |inst, i| if inst.stage == 1 && i == 0 { 1.0 } else { 0.0 });
        let tau = ExtendedStoppingTime::terminal(&t);
        let d = Driver::discount(0.1);
        let a = g_expectation_from_stage(&t, &d, 0, &tau, &xi).unwrap();
        let b = g_expectation_between(&t, &d, 0, 1, &[1.0, 0.0]).unwrap();
        assert_eq!(a, b);
        assert!((a[0] - 0.5 / 1.1).abs() < 1e-14);
    }

    #[test]
    fn reversed_times_are_rejected() {
        let t = fix_b();
        let xi = LadlagPredictableProcess::zeros(&t);
        let late = ExtendedStoppingTime::terminal(&t);
        let early = ExtendedStoppingTime::at_stage(&t, 0).unwrap();
        assert!(matches!(g_expectation(&t, &Driver::zero(), &late, &early, &xi), Err(Error::BadStoppingTime(_))));
    }
}
