//! Finite two-phase filtration trees.
//!
//! Each stage `k = 1..N` has two layers of atoms. The *pre* layer holds the
//! atoms of `G_k = F_{t_k-}`: every pre-node hangs off a post-node of stage
//! `k-1` and carries the Brownian increment `ΔW_k` together with its
//! conditional probability. The *post* layer holds the atoms of `F_k`: every
//! post-node hangs off a pre-node of the same stage and carries a mark label,
//! revealed exactly at the predictable time `t_k`.
//!
//! Stage 0 is stored with one synthetic pre-node and the root post-node, so
//! that every stage has the same two-layer shape.
//!
//! Nodes inside a layer are ordered by parent. Children of a node therefore
//! form a contiguous range, and so do its descendants at any later layer.

use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound on the total node count of a tree.
pub const DEFAULT_NODE_LIMIT: usize = 200_000;

/// Tolerance for probability sums and increment moments.
pub const PROBABILITY_TOLERANCE: f64 = 1e-12;

pub const RULE_BAD_PROBABILITY: &str = "BAD_PROBABILITY";
pub const RULE_MOMENT_VIOLATION: &str = "MOMENT_VIOLATION";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreNode {
    pub parent: usize,
    #[serde(rename = "dW")]
    pub dw: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostNode {
    pub parent: usize,
    pub mark: String,
    pub q: f64,
}

/// Raw node lists of one stage `k >= 1`.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageNodes {
    pub pre: Vec<PreNode>,
    pub post: Vec<PostNode>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Pre,
    Post,
}

/// Identifies one atom of the tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeRef {
    pub stage: usize,
    pub layer: Layer,
    pub index: usize,
}

impl NodeRef {
    pub fn pre(stage: usize, index: usize) -> Self {
        NodeRef { stage, layer: Layer::Pre, index }
    }

    pub fn post(stage: usize, index: usize) -> Self {
        NodeRef { stage, layer: Layer::Post, index }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let layer = match self.layer {
            Layer::Pre => "pre",
            Layer::Post => "post",
        };
        write!(f, "{layer}[{}][{}]", self.stage, self.index)
    }
}

/// One failed invariant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub rule: &'static str,
    pub node: NodeRef,
    pub magnitude: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, rule: &str) -> usize {
        self.violations.iter().filter(|v| v.rule == rule).count()
    }

    pub(crate) fn push(&mut self, rule: &'static str, node: NodeRef, magnitude: f64) {
        self.violations.push(Violation { rule, node, magnitude });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiltrationTree {
    dt: f64,
    pre: Vec<Vec<PreNode>>,
    post: Vec<Vec<PostNode>>,
    post_children: Vec<Vec<Range<usize>>>,
    pre_children: Vec<Vec<Range<usize>>>,
    pre_prob: Vec<Vec<f64>>,
    post_prob: Vec<Vec<f64>>,
    leaf_span: Vec<Vec<Range<usize>>>,
}

impl FiltrationTree {
    /// Builds a tree and rejects it unless every invariant holds.
    pub fn from_stages(dt: f64, stages: Vec<StageNodes>) -> Result<Self> {
        let tree = Self::from_stages_unchecked(dt, stages)?;
        let report = validate_tree(&tree);
        if let Some(v) = report.violations.first() {
            return Err(match v.rule {
                RULE_MOMENT_VIOLATION => Error::MomentViolation { node: v.node.to_string(), magnitude: v.magnitude },
                _ => Error::BadProbability(format!("{} (magnitude {:e})", v.node, v.magnitude)),
            });
        }
        Ok(tree)
    }

    /// Builds a tree checking only its layered structure. Probabilities and
    /// moments are left to [`validate_tree`].
    pub fn from_stages_unchecked(dt: f64, stages: Vec<StageNodes>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Format(format!("dt must be positive and finite, got {dt}")));
        }
        if stages.is_empty() {
            return Err(Error::Format("a tree needs at least one stage".into()));
        }
        let n = stages.len();
        let mut pre = Vec::with_capacity(n + 1);
        let mut post = Vec::with_capacity(n + 1);
        pre.push(vec![PreNode { parent: 0, dw: 0.0, p: 1.0 }]);
        post.push(vec![PostNode { parent: 0, mark: "root".into(), q: 1.0 }]);
        for s in stages {
            pre.push(s.pre);
            post.push(s.post);
        }

        for k in 1..=n {
            let prev_post = post[k - 1].len();
            check_layer(k, "pre", pre[k].iter().map(|v| v.parent), prev_post)?;
            check_layer(k, "post", post[k].iter().map(|v| v.parent), pre[k].len())?;
            for (i, v) in pre[k].iter().enumerate() {
                if !v.dw.is_finite() || !v.p.is_finite() {
                    return Err(Error::Format(format!("non-finite value at pre[{k}][{i}]")));
                }
            }
            if post[k].iter().any(|v| !v.q.is_finite()) {
                return Err(Error::Format(format!("non-finite probability in post layer {k}")));
            }
        }

        let post_children: Vec<Vec<Range<usize>>> = (0..=n)
            .map(|k| {
                if k == n {
                    vec![0..0; post[k].len()]
                } else {
                    child_ranges(pre[k + 1].iter().map(|v| v.parent), post[k].len())
                }
            })
            .collect();
        let pre_children: Vec<Vec<Range<usize>>> =
            (0..=n).map(|k| child_ranges(post[k].iter().map(|v| v.parent), pre[k].len())).collect();

        for k in 0..=n {
            for (i, r) in pre_children[k].iter().enumerate() {
                if r.is_empty() {
                    return Err(Error::Format(format!("pre[{k}][{i}] has no mark children")));
                }
            }
            if k < n {
                for (j, r) in post_children[k].iter().enumerate() {
                    if r.is_empty() {
                        return Err(Error::Format(format!("post[{k}][{j}] has no increment children")));
                    }
                }
            }
        }

        let mut pre_prob = vec![vec![1.0]];
        let mut post_prob = Vec::with_capacity(n + 1);
        for k in 0..=n {
            if k > 0 {
                let prev: &Vec<f64> = &post_prob[k - 1];
                pre_prob.push(pre[k].iter().map(|v| prev[v.parent] * v.p).collect());
            }
            let cur = &pre_prob[k];
            post_prob.push(post[k].iter().map(|v| cur[v.parent] * v.q).collect::<Vec<f64>>());
        }

        let mut leaf_span: Vec<Vec<Range<usize>>> = vec![Vec::new(); n + 1];
        leaf_span[n] = (0..pre[n].len()).map(|i| i..i + 1).collect();
        for k in (0..n).rev() {
            let spans = pre_children[k]
                .iter()
                .map(|marks| {
                    let first = post_children[k][marks.start].start;
                    let last = post_children[k][marks.end - 1].end - 1;
                    leaf_span[k + 1][first].start..leaf_span[k + 1][last].end
                })
                .collect();
            leaf_span[k] = spans;
        }

        Ok(FiltrationTree { dt, pre, post, post_children, pre_children, pre_prob, post_prob, leaf_span })
    }

    /// Number of stages `N`.
    pub fn stage_count(&self) -> usize {
        self.pre.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Grid time `t_k = k dt`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.stage_count())
    }

    pub fn pre(&self, k: usize) -> &[PreNode] {
        &self.pre[k]
    }

    pub fn post(&self, k: usize) -> &[PostNode] {
        &self.post[k]
    }

    /// Pre-nodes of stage `k + 1` under post-node `(k, j)`.
    pub fn post_children(&self, k: usize, j: usize) -> Range<usize> {
        self.post_children[k][j].clone()
    }

    /// Post-nodes of stage `k` under pre-node `(k, i)`.
    pub fn pre_children(&self, k: usize, i: usize) -> Range<usize> {
        self.pre_children[k][i].clone()
    }

    /// Unconditional probabilities of the `G_k` atoms.
    pub fn pre_prob(&self, k: usize) -> &[f64] {
        &self.pre_prob[k]
    }

    /// Unconditional probabilities of the `F_k` atoms.
    pub fn post_prob(&self, k: usize) -> &[f64] {
        &self.post_prob[k]
    }

    /// Leaves (pre-nodes of stage `N`) descending from pre-node `(k, i)`.
    pub fn leaf_span(&self, k: usize, i: usize) -> Range<usize> {
        self.leaf_span[k][i].clone()
    }

    pub fn leaf_count(&self) -> usize {
        self.pre[self.stage_count()].len()
    }

    /// The pre-node of stage `k` on the path through leaf `leaf`.
    pub fn ancestor_at(&self, leaf: usize, k: usize) -> usize {
        let spans = &self.leaf_span[k];
        spans.partition_point(|r| r.end <= leaf)
    }

    pub fn node_count(&self) -> usize {
        self.pre.iter().map(Vec::len).sum::<usize>() + self.post.iter().map(Vec::len).sum::<usize>()
    }

    pub fn max_abs_dw(&self) -> f64 {
        self.pre.iter().flatten().map(|v| v.dw.abs()).fold(0.0, f64::max)
    }

    /// True when every pre-node has a single mark, i.e. `G_k = F_k`.
    pub fn is_single_mark(&self) -> bool {
        self.pre_children.iter().flatten().all(|r| r.len() == 1)
    }

    /// Raw stage lists `1..=N`, as accepted by [`FiltrationTree::from_stages`].
    pub fn stages(&self) -> Vec<StageNodes> {
        (1..=self.stage_count()).map(|k| StageNodes { pre: self.pre[k].clone(), post: self.post[k].clone() }).collect()
    }

    /// `E[values | F_k]` for values on the pre-nodes of stage `k + 1`.
    pub fn expect_given_post(&self, k: usize, values: &[f64]) -> Result<Vec<f64>> {
        self.check_stage_below_horizon(k)?;
        check_len("pre", k + 1, values.len(), self.pre[k + 1].len())?;
        Ok(self.e_post(k, values))
    }

    /// `E[values | G_k]` for values on the post-nodes of stage `k`. This is the
    /// one-step predictable projection.
    pub fn expect_given_pre(&self, k: usize, values: &[f64]) -> Result<Vec<f64>> {
        if k > self.stage_count() {
            return Err(Error::ShapeMismatch(format!("stage {k} beyond horizon")));
        }
        check_len("post", k, values.len(), self.post[k].len())?;
        Ok(self.e_pre(k, values))
    }

    /// `E[values ΔW_{k+1} | F_k] / dt`, the regression slope on the increment.
    pub fn regress_on_increment(&self, k: usize, values: &[f64]) -> Result<Vec<f64>> {
        self.check_stage_below_horizon(k)?;
        check_len("pre", k + 1, values.len(), self.pre[k + 1].len())?;
        Ok(self.dw_slope(k, values))
    }

    /// Conditional expectation of values on `G_from` atoms given `G_to`, `to <= from`.
    pub fn expect_pre_to_pre(&self, from: usize, to: usize, values: &[f64]) -> Result<Vec<f64>> {
        if to > from || from > self.stage_count() {
            return Err(Error::ShapeMismatch(format!("cannot condition stage {from} on stage {to}")));
        }
        check_len("pre", from, values.len(), self.pre[from].len())?;
        let mut cur = values.to_vec();
        for k in (to..from).rev() {
            let on_post = self.e_post(k, &cur);
            cur = self.e_pre(k, &on_post);
        }
        Ok(cur)
    }

    /// Unconditional mean of values on the pre-nodes of stage `k`.
    pub fn mean_pre(&self, k: usize, values: &[f64]) -> f64 {
        self.pre_prob[k].iter().zip(values).map(|(p, v)| p * v).sum()
    }

    pub(crate) fn e_post(&self, k: usize, values: &[f64]) -> Vec<f64> {
        let nodes = &self.pre[k + 1];
        self.post_children[k].iter().map(|r| r.clone().map(|i| nodes[i].p * values[i]).sum()).collect()
    }

    pub(crate) fn e_pre(&self, k: usize, values: &[f64]) -> Vec<f64> {
        let nodes = &self.post[k];
        self.pre_children[k].iter().map(|r| r.clone().map(|j| nodes[j].q * values[j]).sum()).collect()
    }

    pub(crate) fn dw_slope(&self, k: usize, values: &[f64]) -> Vec<f64> {
        let nodes = &self.pre[k + 1];
        self.post_children[k]
            .iter()
            .map(|r| r.clone().map(|i| nodes[i].p * values[i] * nodes[i].dw).sum::<f64>() / self.dt)
            .collect()
    }

    fn check_stage_below_horizon(&self, k: usize) -> Result<()> {
        if k >= self.stage_count() {
            return Err(Error::ShapeMismatch(format!("stage {k} has no successor (horizon {})", self.stage_count())));
        }
        Ok(())
    }
}

fn check_layer(k: usize, name: &str, parents: impl Iterator<Item = usize>, parent_count: usize) -> Result<()> {
    let mut last = 0;
    let mut any = false;
    for (i, p) in parents.enumerate() {
        any = true;
        if p >= parent_count {
            return Err(Error::Format(format!("{name}[{k}][{i}] has parent {p} out of range")));
        }
        if p < last {
            return Err(Error::Format(format!("{name} layer {k} is not ordered by parent at node {i}")));
        }
        last = p;
    }
    if !any {
        return Err(Error::Format(format!("{name} layer {k} is empty")));
    }
    Ok(())
}

fn child_ranges(parents: impl Iterator<Item = usize>, parent_count: usize) -> Vec<Range<usize>> {
    let mut ranges = vec![0..0; parent_count];
    let mut started = vec![false; parent_count];
    for (i, p) in parents.enumerate() {
        if !started[p] {
            ranges[p] = i..i + 1;
            started[p] = true;
        } else {
            ranges[p].end = i + 1;
        }
    }
    ranges
}

pub(crate) fn check_len(layer: &str, k: usize, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch(format!("{layer} layer {k}: expected {want} values, got {got}")));
    }
    Ok(())
}

/// Lists every probability and moment violation of the tree. Never fails.
pub fn validate_tree(tree: &FiltrationTree) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = tree.stage_count();
    let dt = tree.dt();
    for k in 0..=n {
        if k > 0 {
            for (i, v) in tree.pre(k).iter().enumerate() {
                if v.p <= 0.0 {
                    report.push(RULE_BAD_PROBABILITY, NodeRef::pre(k, i), v.p.abs());
                }
            }
        }
        for (j, v) in tree.post(k).iter().enumerate() {
            if v.q <= 0.0 {
                report.push(RULE_BAD_PROBABILITY, NodeRef::post(k, j), v.q.abs());
            }
        }
        for i in 0..tree.pre(k).len() {
            let total: f64 = tree.pre_children(k, i).map(|j| tree.post(k)[j].q).sum();
            if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
                report.push(RULE_BAD_PROBABILITY, NodeRef::pre(k, i), (total - 1.0).abs());
            }
        }
        if k == n {
            continue;
        }
        let next = tree.pre(k + 1);
        for j in 0..tree.post(k).len() {
            let kids = tree.post_children(k, j);
            let total: f64 = kids.clone().map(|i| next[i].p).sum();
            if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
                report.push(RULE_BAD_PROBABILITY, NodeRef::post(k, j), (total - 1.0).abs());
                continue;
            }
            let mean: f64 = kids.clone().map(|i| next[i].p * next[i].dw).sum();
            let second: f64 = kids.map(|i| next[i].p * next[i].dw * next[i].dw).sum();
            if mean.abs() > PROBABILITY_TOLERANCE {
                report.push(RULE_MOMENT_VIOLATION, NodeRef::post(k, j), mean.abs());
            }
            if (second - dt).abs() > PROBABILITY_TOLERANCE {
                report.push(RULE_MOMENT_VIOLATION, NodeRef::post(k, j), (second - dt).abs());
            }
        }
    }
    report
}

/// Expands an i.i.d. lattice into a non-recombining path tree.
pub fn build_lattice<S: AsRef<str>>(
    n_stages: usize,
    dt: f64,
    w_branches: &[(f64, f64)],
    marks: &[(S, f64)],
) -> Result<FiltrationTree> {
    build_lattice_with_limit(n_stages, dt, w_branches, marks, DEFAULT_NODE_LIMIT)
}

pub fn build_lattice_with_limit<S: AsRef<str>>(
    n_stages: usize,
    dt: f64,
    w_branches: &[(f64, f64)],
    marks: &[(S, f64)],
    limit: usize,
) -> Result<FiltrationTree> {
    if n_stages == 0 {
        return Err(Error::InvalidArgument("at least one stage is required".into()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if w_branches.is_empty() || marks.is_empty() {
        return Err(Error::InvalidArgument("branch lists must be non-empty".into()));
    }
    check_distribution("increment", w_branches.iter().map(|b| b.1))?;
    check_distribution("mark", marks.iter().map(|m| m.1))?;
    let mean: f64 = w_branches.iter().map(|(w, p)| p * w).sum();
    let second: f64 = w_branches.iter().map(|(w, p)| p * w * w).sum();
    if mean.abs() > PROBABILITY_TOLERANCE {
        return Err(Error::MomentViolation { node: "lattice".into(), magnitude: mean.abs() });
    }
    if (second - dt).abs() > PROBABILITY_TOLERANCE {
        return Err(Error::MomentViolation { node: "lattice".into(), magnitude: (second - dt).abs() });
    }

    let w = w_branches.len() as u128;
    let m = marks.len() as u128;
    let mut total: u128 = 2;
    let mut layer: u128 = 1;
    for _ in 0..n_stages {
        layer = layer.saturating_mul(w);
        total = total.saturating_add(layer);
        layer = layer.saturating_mul(m);
        total = total.saturating_add(layer);
    }
    if total > limit as u128 {
        return Err(Error::SizeLimit { nodes: total, limit });
    }

    let mut stages = Vec::with_capacity(n_stages);
    let mut prev_post = 1usize;
    for _ in 0..n_stages {
        let mut pre = Vec::with_capacity(prev_post * w_branches.len());
        for parent in 0..prev_post {
            for &(dw, p) in w_branches {
                pre.push(PreNode { parent, dw, p });
            }
        }
        let mut post = Vec::with_capacity(pre.len() * marks.len());
        for parent in 0..pre.len() {
            for (label, q) in marks {
                post.push(PostNode { parent, mark: label.as_ref().to_string(), q: *q });
            }
        }
        prev_post = post.len();
        stages.push(StageNodes { pre, post });
    }
    FiltrationTree::from_stages(dt, stages)
}

fn check_distribution(what: &str, probs: impl Iterator<Item = f64>) -> Result<()> {
    let mut total = 0.0;
    for p in probs {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::BadProbability(format!("{what} probability {p} is not positive")));
        }
        total += p;
    }
    if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
        return Err(Error::BadProbability(format!("{what} probabilities sum to {total}")));
    }
    Ok(())
}

/// Seeded random tree. Every post-node gets between 2 and `max_w_branches`
/// increments whose two moments are matched exactly; every pre-node gets
/// between 1 and `max_marks` marks.
pub fn build_random_tree(seed: u64, n_stages: usize, max_w_branches: usize, max_marks: usize, dt: f64) -> Result<FiltrationTree> {
    build_random_tree_with_limit(seed, n_stages, max_w_branches, max_marks, dt, DEFAULT_NODE_LIMIT)
}

pub fn build_random_tree_with_limit(
    seed: u64,
    n_stages: usize,
    max_w_branches: usize,
    max_marks: usize,
    dt: f64,
    limit: usize,
) -> Result<FiltrationTree> {
    if n_stages == 0 {
        return Err(Error::InvalidArgument("at least one stage is required".into()));
    }
    if max_w_branches < 2 {
        return Err(Error::InvalidArgument("at least two increment branches are needed to match the increment moments".into()));
    }
    if max_marks < 1 {
        return Err(Error::InvalidArgument("at least one mark is required".into()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::with_capacity(n_stages);
    let mut prev_post = 1usize;
    let mut total = 2usize;
    for _ in 0..n_stages {
        let mut pre = Vec::new();
        for parent in 0..prev_post {
            let count = rng.gen_range(2..=max_w_branches);
            for (dw, p) in random_increments(&mut rng, count, dt) {
                pre.push(PreNode { parent, dw, p });
            }
        }
        let mut post = Vec::new();
        for parent in 0..pre.len() {
            let count = rng.gen_range(1..=max_marks);
            for (idx, q) in random_weights(&mut rng, count).into_iter().enumerate() {
                post.push(PostNode { parent, mark: format!("m{idx}"), q });
            }
        }
        total += pre.len() + post.len();
        if total > limit {
            return Err(Error::SizeLimit { nodes: total as u128, limit });
        }
        prev_post = post.len();
        stages.push(StageNodes { pre, post });
    }
    FiltrationTree::from_stages(dt, stages)
}

fn random_weights(rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![1.0];
    }
    let raw: Vec<f64> = (0..count).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn random_increments(rng: &mut ChaCha8Rng, count: usize, dt: f64) -> Vec<(f64, f64)> {
    if count == 2 {
        // two-point law with mean 0 and second moment dt
        let p: f64 = rng.gen_range(0.2..0.8);
        let up = (dt * (1.0 - p) / p).sqrt();
        let down = -(dt * p / (1.0 - p)).sqrt();
        return vec![(up, p), (down, 1.0 - p)];
    }
    let probs = random_weights(rng, count);
    loop {
        let raw: Vec<f64> = (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mean: f64 = raw.iter().zip(&probs).map(|(x, p)| p * x).sum();
        let centred: Vec<f64> = raw.iter().map(|x| x - mean).collect();
        let var: f64 = centred.iter().zip(&probs).map(|(x, p)| p * x * x).sum();
        if var < 1e-6 {
            continue;
        }
        let scale = (dt / var).sqrt();
        return centred.into_iter().map(|x| x * scale).zip(probs.iter().copied()).collect();
    }
}
