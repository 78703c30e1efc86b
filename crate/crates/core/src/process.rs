//! Processes on the doubled instant set `{k-, k}`, previsible stopping
//! times, obstacle regularity flags and β-weighted norms.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtration::{check_len, FiltrationTree, NodeRef, ValidationReport};

/// Which of the two instants attached to a grid time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// `t_k-`, just before the mark of stage `k` is revealed.
    Left,
    /// `t_k` itself.
    Value,
}

/// A point of the doubled instant set `0 < 1- < 1 < 2- < 2 < ...`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instant {
    pub stage: usize,
    pub side: Side,
}

impl Instant {
    pub fn left(stage: usize) -> Self {
        Instant { stage, side: Side::Left }
    }

    pub fn value(stage: usize) -> Self {
        Instant { stage, side: Side::Value }
    }

    /// Position in the total order of instants.
    pub fn rank(&self) -> usize {
        match self.side {
            Side::Left => (2 * self.stage).saturating_sub(1),
            Side::Value => 2 * self.stage,
        }
    }
}

impl Ord for Instant {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl PartialOrd for Instant {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Instant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.side {
            Side::Left => write!(f, "{}-", self.stage),
            Side::Value => write!(f, "{}", self.stage),
        }
    }
}

/// Whether stopping may use the left instants `k-` or only the grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstantMode {
    #[default]
    Doubled,
    Grid,
}

/// Something that can be read at a stopping atom.
pub trait Payoff {
    fn at(&self, instant: Instant, atom: usize) -> f64;
}

/// A predictable ladlag process sampled at both instants of every stage.
/// Stage 0 holds a single atom with `left == value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadlagPredictableProcess {
    pub left: Vec<Vec<f64>>,
    pub value: Vec<Vec<f64>>,
}

impl LadlagPredictableProcess {
    pub fn constant(tree: &FiltrationTree, c: f64) -> Self {
        Self::from_fn(tree, |_, _| c)
    }

    pub fn zeros(tree: &FiltrationTree) -> Self {
        Self::constant(tree, 0.0)
    }

    /// Builds the process from a function of `(instant, atom)`. The left value
    /// at stage 0 is forced equal to the value.
    pub fn from_fn(tree: &FiltrationTree, mut f: impl FnMut(Instant, usize) -> f64) -> Self {
        let n = tree.stage_count();
        let mut left = Vec::with_capacity(n + 1);
        let mut value = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let m = tree.pre(k).len();
            let v: Vec<f64> = (0..m).map(|i| f(Instant::value(k), i)).collect();
            let l: Vec<f64> = if k == 0 { v.clone() } else { (0..m).map(|i| f(Instant::left(k), i)).collect() };
            left.push(l);
            value.push(v);
        }
        LadlagPredictableProcess { left, value }
    }

    pub fn check_shape(&self, tree: &FiltrationTree) -> Result<()> {
        let n = tree.stage_count();
        if self.left.len() != n + 1 || self.value.len() != n + 1 {
            return Err(Error::ShapeMismatch(format!(
                "process has {} / {} stages, tree has {}",
                self.left.len(),
                self.value.len(),
                n + 1
            )));
        }
        for k in 0..=n {
            check_len("pre", k, self.left[k].len(), tree.pre(k).len())?;
            check_len("pre", k, self.value[k].len(), tree.pre(k).len())?;
        }
        if self.left[0][0] != self.value[0][0] {
            return Err(Error::ShapeMismatch("left value at stage 0 must equal the value".into()));
        }
        if self.left.iter().chain(&self.value).flatten().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("process values must be finite".into()));
        }
        Ok(())
    }

    pub fn get(&self, instant: Instant, atom: usize) -> f64 {
        match instant.side {
            Side::Left => self.left[instant.stage][atom],
            Side::Value => self.value[instant.stage][atom],
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let m = |rows: &Vec<Vec<f64>>| rows.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect();
        LadlagPredictableProcess { left: m(&self.left), value: m(&self.value) }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let z = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            a.iter().zip(b).map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| f(x, y)).collect()).collect()
        };
        LadlagPredictableProcess { left: z(&self.left, &other.left), value: z(&self.value, &other.value) }
    }

    /// Largest absolute entry over both instants.
    pub fn sup_abs(&self) -> f64 {
        self.left.iter().chain(&self.value).flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Payoff for LadlagPredictableProcess {
    fn at(&self, instant: Instant, atom: usize) -> f64 {
        self.get(instant, atom)
    }
}

/// A process adapted to `F_k`, one value per post-node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptedProcess {
    pub values: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn constant(tree: &FiltrationTree, c: f64) -> Self {
        AdaptedProcess { values: (0..=tree.stage_count()).map(|k| vec![c; tree.post(k).len()]).collect() }
    }

    pub fn check_shape(&self, tree: &FiltrationTree) -> Result<()> {
        if self.values.len() != tree.stage_count() + 1 {
            return Err(Error::ShapeMismatch("adapted process stage count".into()));
        }
        for (k, row) in self.values.iter().enumerate() {
            check_len("post", k, row.len(), tree.post(k).len())?;
        }
        Ok(())
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// The decision taken on a `G_k` atom reached without a prior stop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Continue,
    /// Stop at `k-`, collecting the left value.
    Left,
    /// Stop at `k`.
    Value,
}

/// How a stopping time treats one atom.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtomState {
    /// Some earlier atom on the path already stopped.
    Unreached,
    Continue,
    Stop(Side),
}

/// A previsible stopping time over the doubled instants. Decisions are indexed
/// `[stage][pre-node]`; entries on atoms that are never reached are ignored.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtendedStoppingTime {
    pub decisions: Vec<Vec<Decision>>,
}

impl ExtendedStoppingTime {
    pub fn new(decisions: Vec<Vec<Decision>>) -> Self {
        ExtendedStoppingTime { decisions }
    }

    /// Stops every path at the same instant.
    pub fn constant(tree: &FiltrationTree, instant: Instant) -> Result<Self> {
        let n = tree.stage_count();
        if instant.stage > n || (instant.stage == 0 && instant.side == Side::Left) {
            return Err(Error::BadStoppingTime(format!("instant {instant} does not exist")));
        }
        let d = match instant.side {
            Side::Left => Decision::Left,
            Side::Value => Decision::Value,
        };
        Ok(Self::from_fn(tree, |k, _| if k == instant.stage { d } else { Decision::Continue }))
    }

    /// `τ ≡ S` at the value instant of stage `s`.
    pub fn at_stage(tree: &FiltrationTree, s: usize) -> Result<Self> {
        Self::constant(tree, Instant::value(s))
    }

    /// `τ ≡ T`.
    pub fn terminal(tree: &FiltrationTree) -> Self {
        Self::from_fn(tree, |k, _| if k == tree.stage_count() { Decision::Value } else { Decision::Continue })
    }

    pub fn from_fn(tree: &FiltrationTree, mut f: impl FnMut(usize, usize) -> Decision) -> Self {
        let decisions = (0..=tree.stage_count()).map(|k| (0..tree.pre(k).len()).map(|i| f(k, i)).collect()).collect();
        ExtendedStoppingTime { decisions }
    }

    fn check_shape(&self, tree: &FiltrationTree) -> Result<()> {
        if self.decisions.len() != tree.stage_count() + 1 {
            return Err(Error::BadStoppingTime("decision table has the wrong number of stages".into()));
        }
        for (k, row) in self.decisions.iter().enumerate() {
            if row.len() != tree.pre(k).len() {
                return Err(Error::BadStoppingTime(format!("decision table stage {k} has the wrong width")));
            }
        }
        Ok(())
    }

    /// Walks the tree from the root and classifies every atom.
    pub fn resolve(&self, tree: &FiltrationTree) -> Result<Vec<Vec<AtomState>>> {
        self.check_shape(tree)?;
        let n = tree.stage_count();
        let mut states: Vec<Vec<AtomState>> = Vec::with_capacity(n + 1);
        let mut reached = vec![true];
        for k in 0..=n {
            let row: Vec<AtomState> = reached
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    if !r {
                        return Ok(AtomState::Unreached);
                    }
                    match self.decisions[k][i] {
                        Decision::Continue if k == n => {
                            Err(Error::BadStoppingTime(format!("continues past the horizon at {}", NodeRef::pre(k, i))))
                        }
                        Decision::Continue => Ok(AtomState::Continue),
                        Decision::Left if k == 0 => Err(Error::BadStoppingTime("stage 0 has no left instant".into())),
                        Decision::Left => Ok(AtomState::Stop(Side::Left)),
                        Decision::Value => Ok(AtomState::Stop(Side::Value)),
                    }
                })
                .collect::<Result<_>>()?;
            if k < n {
                reached = tree.pre(k + 1).iter().map(|v| row[tree.post(k)[v.parent].parent] == AtomState::Continue).collect();
            }
            states.push(row);
        }
        Ok(states)
    }

    /// The stopping instant along every path, indexed by leaf.
    pub fn leaf_instants(&self, tree: &FiltrationTree) -> Result<Vec<Instant>> {
        let states = self.resolve(tree)?;
        let mut out = vec![Instant::value(0); tree.leaf_count()];
        for (k, row) in states.iter().enumerate() {
            for (i, s) in row.iter().enumerate() {
                if let AtomState::Stop(side) = *s {
                    for leaf in tree.leaf_span(k, i) {
                        out[leaf] = Instant { stage: k, side };
                    }
                }
            }
        }
        Ok(out)
    }

    /// Rebuilds a stopping time from its path-wise instants. Fails unless the
    /// path function is previsible, i.e. decided on `G_k` atoms.
    pub fn from_leaf_instants(tree: &FiltrationTree, instants: &[Instant]) -> Result<Self> {
        if instants.len() != tree.leaf_count() {
            return Err(Error::ShapeMismatch("one instant per leaf is required".into()));
        }
        let n = tree.stage_count();
        let mut decisions: Vec<Vec<Decision>> = (0..=n).map(|k| vec![Decision::Continue; tree.pre(k).len()]).collect();
        let mut reached = vec![true];
        for k in 0..=n {
            let mut stopped = vec![false; tree.pre(k).len()];
            for (i, &r) in reached.iter().enumerate() {
                if !r {
                    continue;
                }
                let span = tree.leaf_span(k, i);
                let first = instants[span.start];
                let here = instants[span.clone()].iter().filter(|t| t.stage == k).count();
                if here == 0 {
                    continue;
                }
                if here != span.len() || instants[span].iter().any(|t| *t != first) {
                    return Err(Error::BadStoppingTime(format!(
                        "stop decision at {} is not measurable at that atom",
                        NodeRef::pre(k, i)
                    )));
                }
                if k == 0 && first.side == Side::Left {
                    return Err(Error::BadStoppingTime("stage 0 has no left instant".into()));
                }
                decisions[k][i] = match first.side {
                    Side::Left => Decision::Left,
                    Side::Value => Decision::Value,
                };
                stopped[i] = true;
            }
            if k < n {
                let next: Vec<bool> = tree
                    .pre(k + 1)
                    .iter()
                    .map(|v| {
                        let parent = tree.post(k)[v.parent].parent;
                        reached[parent] && !stopped[parent]
                    })
                    .collect();
                reached = next;
            } else if reached.iter().zip(&stopped).any(|(r, s)| *r && !s) {
                return Err(Error::BadStoppingTime("some path never stops".into()));
            }
        }
        Ok(ExtendedStoppingTime { decisions })
    }

    pub fn pointwise_min(&self, other: &Self, tree: &FiltrationTree) -> Result<Self> {
        let a = self.leaf_instants(tree)?;
        let b = other.leaf_instants(tree)?;
        let m: Vec<Instant> = a.iter().zip(&b).map(|(x, y)| *x.min(y)).collect();
        Self::from_leaf_instants(tree, &m)
    }

    pub fn pointwise_max(&self, other: &Self, tree: &FiltrationTree) -> Result<Self> {
        let a = self.leaf_instants(tree)?;
        let b = other.leaf_instants(tree)?;
        let m: Vec<Instant> = a.iter().zip(&b).map(|(x, y)| *x.max(y)).collect();
        Self::from_leaf_instants(tree, &m)
    }

    /// `self <= other` on every path.
    pub fn is_le(&self, other: &Self, tree: &FiltrationTree) -> Result<bool> {
        let a = self.leaf_instants(tree)?;
        let b = other.leaf_instants(tree)?;
        Ok(a.iter().zip(&b).all(|(x, y)| x <= y))
    }

    /// `(instant, atom)` pairs where the stopping time stops.
    pub fn stop_atoms(&self, tree: &FiltrationTree) -> Result<Vec<(Instant, usize)>> {
        let states = self.resolve(tree)?;
        let mut out = Vec::new();
        for (k, row) in states.iter().enumerate() {
            for (i, s) in row.iter().enumerate() {
                if let AtomState::Stop(side) = *s {
                    out.push((Instant { stage: k, side }, i));
                }
            }
        }
        Ok(out)
    }

    /// Copy with unreached entries reset to `Continue`, so that equal
    /// stopping times compare equal.
    pub fn canonical(&self, tree: &FiltrationTree) -> Result<Self> {
        let states = self.resolve(tree)?;
        let decisions = states
            .iter()
            .map(|row| {
                row.iter()
                    .map(|s| match s {
                        AtomState::Stop(Side::Left) => Decision::Left,
                        AtomState::Stop(Side::Value) => Decision::Value,
                        _ => Decision::Continue,
                    })
                    .collect()
            })
            .collect();
        Ok(ExtendedStoppingTime { decisions })
    }
}

pub const RULE_SHAPE: &str = "SHAPE";
pub const RULE_NEVER_STOPS: &str = "NEVER_STOPS";
pub const RULE_LEFT_AT_ORIGIN: &str = "LEFT_AT_ORIGIN";
pub const RULE_BEFORE_START: &str = "BEFORE_START";

/// Checks that `tau` stops every path exactly once, at an instant `>= S`.
pub fn validate_stopping_time(tree: &FiltrationTree, tau: &ExtendedStoppingTime, from_stage: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = tree.stage_count();
    if tau.decisions.len() != n + 1 {
        report.push(RULE_SHAPE, NodeRef::pre(0, 0), (tau.decisions.len() as f64 - (n + 1) as f64).abs());
        return report;
    }
    for (k, row) in tau.decisions.iter().enumerate() {
        if row.len() != tree.pre(k).len() {
            report.push(RULE_SHAPE, NodeRef::pre(k, 0), (row.len() as f64 - tree.pre(k).len() as f64).abs());
        }
    }
    if !report.is_empty() {
        return report;
    }
    let mut reached = vec![true];
    for k in 0..=n {
        let mut cont = vec![false; tree.pre(k).len()];
        for (i, &r) in reached.iter().enumerate() {
            if !r {
                continue;
            }
            match tau.decisions[k][i] {
                Decision::Continue => {
                    if k == n {
                        report.push(RULE_NEVER_STOPS, NodeRef::pre(k, i), 1.0);
                    } else {
                        cont[i] = true;
                    }
                }
                Decision::Left => {
                    if k == 0 {
                        report.push(RULE_LEFT_AT_ORIGIN, NodeRef::pre(k, i), 1.0);
                    }
                    if k <= from_stage {
                        report.push(RULE_BEFORE_START, NodeRef::pre(k, i), (from_stage - k) as f64 + 0.5);
                    }
                }
                Decision::Value => {
                    if k < from_stage {
                        report.push(RULE_BEFORE_START, NodeRef::pre(k, i), (from_stage - k) as f64);
                    }
                }
            }
        }
        if k < n {
            reached = tree.pre(k + 1).iter().map(|v| cont[tree.post(k)[v.parent].parent]).collect();
        }
    }
    report
}

/// Obstacle regularity flags with the atoms that violate each of them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegularityReport {
    /// `ξ_{k-} <= ξ_k` everywhere.
    pub lusc: bool,
    /// `E[ξ_{(k+1)-} | G_k] <= ξ_k` everywhere.
    pub p_right_dominated: bool,
    /// `ξ_{k-} == ξ_k` everywhere.
    pub constant_left: bool,
    pub lusc_violations: Vec<NodeRef>,
    pub p_right_violations: Vec<NodeRef>,
    pub constant_left_violations: Vec<NodeRef>,
}

pub fn regularity_report(tree: &FiltrationTree, obstacle: &LadlagPredictableProcess) -> Result<RegularityReport> {
    obstacle.check_shape(tree)?;
    let n = tree.stage_count();
    let mut lusc_violations = Vec::new();
    let mut constant_left_violations = Vec::new();
    let mut p_right_violations = Vec::new();
    for k in 1..=n {
        for (i, (l, v)) in obstacle.left[k].iter().zip(&obstacle.value[k]).enumerate() {
            if l > v {
                lusc_violations.push(NodeRef::pre(k, i));
            }
            if l != v {
                constant_left_violations.push(NodeRef::pre(k, i));
            }
        }
    }
    for k in 0..n {
        let next_left = tree.e_post(k, &obstacle.left[k + 1]);
        let projected = tree.e_pre(k, &next_left);
        for (i, (p, v)) in projected.iter().zip(&obstacle.value[k]).enumerate() {
            if p > v {
                p_right_violations.push(NodeRef::pre(k, i));
            }
        }
    }
    Ok(RegularityReport {
        lusc: lusc_violations.is_empty(),
        p_right_dominated: p_right_violations.is_empty(),
        constant_left: constant_left_violations.is_empty(),
        lusc_violations,
        p_right_violations,
        constant_left_violations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// `E[max_k e^{β t_k} X_k²]` over both instants.
    SupSquare,
    /// `E[Σ_{k<N} e^{β t_k} X_k² dt]`.
    TimeIntegral,
}

pub fn beta_norm(tree: &FiltrationTree, process: &LadlagPredictableProcess, beta: f64, kind: NormKind) -> Result<f64> {
    check_beta(beta)?;
    process.check_shape(tree)?;
    let n = tree.stage_count();
    let weight = |k: usize| (beta * tree.time(k)).exp();
    Ok(match kind {
        NormKind::SupSquare => {
            let probs = tree.pre_prob(n);
            (0..tree.leaf_count())
                .map(|leaf| {
                    let peak = (0..=n)
                        .map(|k| {
                            let i = tree.ancestor_at(leaf, k);
                            let x = process.left[k][i].abs().max(process.value[k][i].abs());
                            weight(k) * x * x
                        })
                        .fold(0.0, f64::max);
                    probs[leaf] * peak
                })
                .sum()
        }
        NormKind::TimeIntegral => (0..n)
            .map(|k| {
                let m: f64 = tree.pre_prob(k).iter().zip(&process.value[k]).map(|(p, x)| p * x * x).sum();
                weight(k) * m * tree.dt()
            })
            .sum(),
    })
}

pub fn beta_norm_adapted(tree: &FiltrationTree, process: &AdaptedProcess, beta: f64, kind: NormKind) -> Result<f64> {
    check_beta(beta)?;
    process.check_shape(tree)?;
    let n = tree.stage_count();
    let weight = |k: usize| (beta * tree.time(k)).exp();
    Ok(match kind {
        NormKind::SupSquare => {
            let probs = tree.post_prob(n);
            (0..tree.post(n).len())
                .map(|leaf| {
                    let mut peak: f64 = 0.0;
                    let mut j = leaf;
                    for k in (0..=n).rev() {
                        let x = process.values[k][j];
                        peak = peak.max(weight(k) * x * x);
                        if k > 0 {
                            let pre_parent = tree.post(k)[j].parent;
                            j = tree.pre(k)[pre_parent].parent;
                        }
                    }
                    probs[leaf] * peak
                })
                .sum()
        }
        NormKind::TimeIntegral => (0..n)
            .map(|k| {
                let m: f64 = tree.post_prob(k).iter().zip(&process.values[k]).map(|(p, x)| p * x * x).sum();
                weight(k) * m * tree.dt()
            })
            .sum(),
    })
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("β must be nonnegative, got {beta}")));
    }
    Ok(())
}
