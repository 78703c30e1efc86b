//! Exhaustive enumeration of previsible stopping times and direct
//! maximization of `E^g_{S,τ}(ξ_τ)` over them.
//!
//! A stopping time `τ >= S` is a product of independent local rules, one per
//! `G_S` atom. A local rule at a pre-node is, in this order: stop at the left
//! instant (doubled mode, stages after `S` only), stop at the value instant,
//! or continue and pick a local rule for every pre-node of the next stage
//! below it (mixed radix, first child most significant). The value tables
//! evaluate every local rule once, sharing subtree evaluations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::driver::{Generator, Site};
use crate::error::{Error, Result};
use crate::filtration::FiltrationTree;
use crate::process::{Decision, ExtendedStoppingTime, InstantMode, LadlagPredictableProcess};

pub const DEFAULT_BUDGET: u64 = 1_000_000;
/// Values within this distance of the maximum count as maximizers.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnumerationBudget {
    pub max_count: u64,
    pub mode: InstantMode,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        EnumerationBudget { max_count: DEFAULT_BUDGET, mode: InstantMode::Doubled }
    }
}

impl EnumerationBudget {
    pub fn new(max_count: u64, mode: InstantMode) -> Self {
        EnumerationBudget { max_count, mode }
    }
}

fn left_allowed(k: usize, s: usize, mode: InstantMode) -> bool {
    mode == InstantMode::Doubled && k > s
}

/// Pre-nodes of stage `k + 1` below pre-node `(k, i)`.
fn grandchildren(tree: &FiltrationTree, k: usize, i: usize) -> std::ops::Range<usize> {
    let posts = tree.pre_children(k, i);
    let first = tree.post_children(k, posts.start).start;
    let last = tree.post_children(k, posts.end - 1).end;
    first..last
}

/// Number of local rules at every pre-node of stages `s..=N` (empty rows
/// before `s`), saturating.
pub fn local_counts(tree: &FiltrationTree, s: usize, mode: InstantMode) -> Vec<Vec<u128>> {
    let n = tree.stage_count();
    let mut counts: Vec<Vec<u128>> = vec![Vec::new(); n + 1];
    for k in (s..=n).rev() {
        counts[k] = (0..tree.pre(k).len())
            .map(|i| {
                let mut c: u128 = if left_allowed(k, s, mode) { 2 } else { 1 };
                if k < n {
                    let product = grandchildren(tree, k, i).fold(1u128, |p, g| p.saturating_mul(counts[k + 1][g]));
                    c = c.saturating_add(product);
                }
                c
            })
            .collect();
    }
    counts
}

/// Number of previsible stopping times `τ >= S`.
pub fn count_stopping_times(tree: &FiltrationTree, s: usize, mode: InstantMode) -> Result<u128> {
    if s > tree.stage_count() {
        return Err(Error::InvalidArgument(format!("stage {s} is beyond the horizon")));
    }
    Ok(local_counts(tree, s, mode)[s].iter().fold(1u128, |p, c| p.saturating_mul(*c)))
}

fn check_budget(count: u128, budget: &EnumerationBudget) -> Result<()> {
    if budget.max_count == 0 {
        return Err(Error::InvalidArgument("budget must be positive".into()));
    }
    if count > budget.max_count as u128 {
        return Err(Error::BudgetExceeded { count, budget: budget.max_count });
    }
    Ok(())
}

fn decode_local(
    tree: &FiltrationTree,
    s: usize,
    mode: InstantMode,
    counts: &[Vec<u128>],
    k: usize,
    i: usize,
    mut rule: u128,
    out: &mut [Vec<Decision>],
) {
    if left_allowed(k, s, mode) {
        if rule == 0 {
            out[k][i] = Decision::Left;
            return;
        }
        rule -= 1;
    }
    if rule == 0 {
        out[k][i] = Decision::Value;
        return;
    }
    rule -= 1;
    out[k][i] = Decision::Continue;
    for g in grandchildren(tree, k, i).rev() {
        let c = counts[k + 1][g];
        decode_local(tree, s, mode, counts, k + 1, g, rule % c, out);
        rule /= c;
    }
}

/// Builds the stopping time whose local rule at `G_S` atom `i` is `rules[i]`.
pub fn decode_stopping_time(tree: &FiltrationTree, s: usize, mode: InstantMode, rules: &[u128]) -> Result<ExtendedStoppingTime> {
    let counts = local_counts(tree, s, mode);
    if rules.len() != tree.pre(s).len() || rules.iter().zip(&counts[s]).any(|(r, c)| r >= c) {
        return Err(Error::InvalidArgument("local rule indices out of range".into()));
    }
    Ok(decode_with(tree, s, mode, &counts, rules))
}

fn decode_with(tree: &FiltrationTree, s: usize, mode: InstantMode, counts: &[Vec<u128>], rules: &[u128]) -> ExtendedStoppingTime {
    let mut out = ExtendedStoppingTime::from_fn(tree, |_, _| Decision::Continue).decisions;
    for (i, &r) in rules.iter().enumerate() {
        decode_local(tree, s, mode, counts, s, i, r, &mut out);
    }
    ExtendedStoppingTime::new(out)
}

/// Calls `f` on every combination of per-atom indices, the first atom most
/// significant.
pub fn for_each_combination(counts: &[u128], mut f: impl FnMut(&[u128])) {
    if counts.contains(&0) {
        return;
    }
    let mut digits = vec![0u128; counts.len()];
    loop {
        f(&digits);
        let mut pos = counts.len();
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < counts[pos] {
                break;
            }
            digits[pos] = 0;
        }
    }
}

/// Every previsible stopping time `τ >= S`, each exactly once.
pub fn enumerate_stopping_times(
    tree: &FiltrationTree,
    s: usize,
    budget: &EnumerationBudget,
) -> Result<Vec<ExtendedStoppingTime>> {
    let total = count_stopping_times(tree, s, budget.mode)?;
    check_budget(total, budget)?;
    let counts = local_counts(tree, s, budget.mode);
    let mut out = Vec::with_capacity(total as usize);
    for_each_combination(&counts[s], |rules| out.push(decode_with(tree, s, budget.mode, &counts, rules)));
    Ok(out)
}

/// A statistic evaluated for every local rule.
#[derive(Clone, Copy)]
pub enum Channel<'a> {
    /// `E^g_{k,τ}(payoff_τ)` at the pre-node.
    GExpectation(&'a LadlagPredictableProcess),
    /// Largest payoff over the paths below the pre-node, read where they stop.
    PathMax(&'a LadlagPredictableProcess),
}

/// Per-rule values at every `G_S` atom: `values[channel][atom][rule]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTables {
    pub s: usize,
    pub mode: InstantMode,
    pub counts: Vec<u128>,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl ValueTables {
    pub fn stopping_time(&self, tree: &FiltrationTree, rules: &[u128]) -> Result<ExtendedStoppingTime> {
        decode_stopping_time(tree, self.s, self.mode, rules)
    }

    pub fn total(&self) -> u128 {
        self.counts.iter().fold(1u128, |p, c| p.saturating_mul(*c))
    }
}

pub fn value_tables<G: Generator + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    s: usize,
    budget: &EnumerationBudget,
    channels: &[Channel<'_>],
) -> Result<ValueTables> {
    let total = count_stopping_times(tree, s, budget.mode)?;
    check_budget(total, budget)?;
    let kdt = g.lipschitz() * tree.dt();
    if kdt >= 1.0 {
        return Err(Error::NoContraction(kdt));
    }
    for ch in channels {
        let (Channel::GExpectation(p) | Channel::PathMax(p)) = ch;
        p.check_shape(tree)?;
    }
    let values = channels.iter().map(|ch| channel_table(tree, g, s, budget.mode, *ch)).collect::<Result<Vec<_>>>()?;
    let counts = local_counts(tree, s, budget.mode)[s].clone();
    Ok(ValueTables { s, mode: budget.mode, counts, values })
}

fn channel_table<G: Generator + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    s: usize,
    mode: InstantMode,
    channel: Channel<'_>,
) -> Result<Vec<Vec<f64>>> {
    let n = tree.stage_count();
    let (payoff, additive) = match channel {
        Channel::GExpectation(p) => (p, true),
        Channel::PathMax(p) => (p, false),
    };
    let mut below: Vec<Vec<f64>> = Vec::new();
    for k in (s..=n).rev() {
        let t = tree.time(k);
        let mut tables = Vec::with_capacity(tree.pre(k).len());
        for i in 0..tree.pre(k).len() {
            let mut table = Vec::new();
            if left_allowed(k, s, mode) {
                table.push(payoff.left[k][i]);
            }
            table.push(payoff.value[k][i]);
            if k < n {
                let mut acc: Vec<f64> = vec![if additive { 0.0 } else { f64::NEG_INFINITY }];
                for j in tree.pre_children(k, i) {
                    let q = tree.post(k)[j].q;
                    let plus = post_table(tree, g, k, j, t, &below, additive)?;
                    let mut next = Vec::with_capacity(acc.len() * plus.len());
                    for a in &acc {
                        for b in &plus {
                            next.push(if additive { a + q * b } else { a.max(*b) });
                        }
                    }
                    acc = next;
                }
                table.extend(acc);
            }
            tables.push(table);
        }
        below = tables;
    }
    Ok(below)
}

/// Values at post-node `(k, j)` for every combination of child rules.
fn post_table<G: Generator + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    k: usize,
    j: usize,
    t: f64,
    below: &[Vec<f64>],
    additive: bool,
) -> Result<Vec<f64>> {
    let kids = tree.post_children(k, j);
    let nodes = &tree.pre(k + 1)[kids.clone()];
    let tables: Vec<&Vec<f64>> = kids.map(|c| &below[c]).collect();
    let sizes: Vec<u128> = tables.iter().map(|t| t.len() as u128).collect();
    let mut out = Vec::new();
    let mut err = None;
    for_each_combination(&sizes, |digits| {
        if err.is_some() {
            return;
        }
        let xs = digits.iter().zip(&tables).map(|(d, t)| t[*d as usize]);
        if additive {
            let mut e = 0.0;
            let mut m = 0.0;
            for (v, x) in nodes.iter().zip(xs) {
                e += v.p * x;
                m += v.p * x * v.dw;
            }
            match fixed_point(e, m / tree.dt(), Site { stage: k, node: j, t }, g, tree.dt()) {
                Ok(y) => out.push(y),
                Err(e) => err = Some(e),
            }
        } else {
            out.push(xs.fold(f64::NEG_INFINITY, f64::max));
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

fn fixed_point<G: Generator + ?Sized>(e: f64, pi: f64, site: Site, g: &G, dt: f64) -> Result<f64> {
    crate::bsde::step_solve(e, pi, site, g, dt, crate::bsde::STEP_TOL)
}

/// Per-atom maxima with the maximizing local rules.
#[derive(Clone, Debug, PartialEq)]
pub struct BruteForce {
    pub s: usize,
    pub mode: InstantMode,
    pub values: Vec<f64>,
    /// Maximizing local rules per `G_S` atom; every combination is a maximizer.
    pub argmax: Vec<Vec<u128>>,
    /// Number of stopping times searched.
    pub count: u128,
}

impl BruteForce {
    pub fn maximizer_count(&self) -> u128 {
        self.argmax.iter().fold(1u128, |p, a| p.saturating_mul(a.len() as u128))
    }

    /// Every maximizing stopping time, in enumeration order.
    pub fn maximizers(&self, tree: &FiltrationTree, limit: u64) -> Result<Vec<ExtendedStoppingTime>> {
        check_budget(self.maximizer_count(), &EnumerationBudget::new(limit, self.mode))?;
        let counts = local_counts(tree, self.s, self.mode);
        let sizes: Vec<u128> = self.argmax.iter().map(|a| a.len() as u128).collect();
        let mut out = Vec::new();
        for_each_combination(&sizes, |digits| {
            let rules: Vec<u128> = digits.iter().zip(&self.argmax).map(|(d, a)| a[*d as usize]).collect();
            out.push(decode_with(tree, self.s, self.mode, &counts, &rules));
        });
        Ok(out)
    }
}

pub fn brute_force_value<G: Generator + ?Sized>(
    tree: &FiltrationTree,
    g: &G,
    obstacle: &LadlagPredictableProcess,
    s: usize,
    budget: &EnumerationBudget,
) -> Result<BruteForce> {
    let tables = value_tables(tree, g, s, budget, &[Channel::GExpectation(obstacle)])?;
    let mut values = Vec::new();
    let mut argmax = Vec::new();
    for table in &tables.values[0] {
        let best = table.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        values.push(best);
        argmax.push(table.iter().enumerate().filter(|(_, v)| **v >= best - TIE_TOL).map(|(r, _)| r as u128).collect());
    }
    Ok(BruteForce { s, mode: budget.mode, values, argmax, count: tables.total() })
}

/// A uniformly drawn decision at every reachable atom from stage `s` on.
pub fn sample_stopping_time<R: Rng>(tree: &FiltrationTree, s: usize, mode: InstantMode, rng: &mut R) -> ExtendedStoppingTime {
    let n = tree.stage_count();
    ExtendedStoppingTime::from_fn(tree, |k, _| {
        if k < s {
            return Decision::Continue;
        }
        let mut options = Vec::with_capacity(3);
        if left_allowed(k, s, mode) {
            options.push(Decision::Left);
        }
        options.push(Decision::Value);
        if k < n {
            options.push(Decision::Continue);
        }
        options[rng.gen_range(0..options.len())]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::Driver;
    use crate::filtration::build_lattice;
    use crate::process::validate_stopping_time;

    fn binomial(n: usize) -> FiltrationTree {
        build_lattice(n, 1.0, &[(1.0, 0.5), (-1.0, 0.5)], &[("x", 1.0)]).unwrap()
    }

    #[test]
    fn counts_on_small_trees() {
        let t = binomial(1);
        assert_eq!(count_stopping_times(&t, 0, InstantMode::Doubled).unwrap(), 5);
        assert_eq!(count_stopping_times(&t, 0, InstantMode::Grid).unwrap(), 2);
        assert_eq!(count_stopping_times(&t, 1, InstantMode::Doubled).unwrap(), 1);
        let path = build_lattice(1, 1.0, &[(1.0, 0.5), (-1.0, 0.5)], &[("x", 1.0)]).unwrap();
        assert_eq!(local_counts(&path, 0, InstantMode::Doubled)[1], vec![2, 2]);
    }

    #[test]
    fn enumeration_is_exhaustive_and_distinct() {
        let t = binomial(2);
        let all = enumerate_stopping_times(&t, 0, &EnumerationBudget::default()).unwrap();
        assert_eq!(all.len() as u128, count_stopping_times(&t, 0, InstantMode::Doubled).unwrap());
        let mut seen = std::collections::HashSet::new();
        for tau in &all {
            assert!(validate_stopping_time(&t, tau, 0).is_empty());
            assert!(seen.insert(tau.leaf_instants(&t).unwrap()));
        }
    }

    #[test]
    fn budget_is_enforced() {
        let t = binomial(2);
        let small = EnumerationBudget::new(3, InstantMode::Doubled);
        assert!(matches!(enumerate_stopping_times(&t, 0, &small), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn tables_match_direct_evaluation() {
        let t = binomial(2);
        let xi = LadlagPredictableProcess::from_fn(&t, |inst, i| ((inst.rank() * 7 + i * 3) % 5) as f64 - 2.0);
        let d = Driver::ambiguity(0.1, 0.2);
        let b = EnumerationBudget::default();
        let tables = value_tables(&t, &d, 0, &b, &[Channel::GExpectation(&xi)]).unwrap();
        let all = enumerate_stopping_times(&t, 0, &b).unwrap();
        for (r, tau) in all.iter().enumerate() {
            let direct = crate::bsde::g_expectation_from_stage(&t, &d, 0, tau, &xi).unwrap();
            assert!((direct[0] - tables.values[0][0][r]).abs() < 1e-13);
        }
    }

    #[test]
    fn sampled_times_are_valid() {
        let t = binomial(3);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        for s in 0..=3 {
            for _ in 0..20 {
                let tau = sample_stopping_time(&t, s, InstantMode::Doubled, &mut rng);
                assert!(validate_stopping_time(&t, &tau, s).is_empty());
            }
        }
    }
}
