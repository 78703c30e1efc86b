//! Small hand-checkable models used by the tests, the documentation and the CLI.

use crate::driver::Driver;
use crate::filtration::{build_lattice, FiltrationTree, PostNode, PreNode, StageNodes};
use crate::process::LadlagPredictableProcess;

#[derive(Clone, Debug)]
pub struct Fixture {
    pub name: &'static str,
    pub tree: FiltrationTree,
    pub obstacle: LadlagPredictableProcess,
    pub driver: Driver,
}

fn one_step_binomial() -> FiltrationTree {
    build_lattice(1, 1.0, &[(1.0, 0.5), (-1.0, 0.5)], &[("x", 1.0)]).expect("valid lattice")
}

/// Two stages, `dt = 0.5`, binomial increments, one mark, obstacle `≡ 1`.
pub fn fix_a() -> Fixture {
    let s = 0.5_f64.sqrt();
    let tree = build_lattice(2, 0.5, &[(s, 0.5), (-s, 0.5)], &[("x", 1.0)]).expect("valid lattice");
    let obstacle = LadlagPredictableProcess::constant(&tree, 1.0);
    Fixture { name: "A", tree, obstacle, driver: Driver::zero() }
}

/// One binomial stage with reward `(1, 0)` at time 1 and `xi0` at time 0.
pub fn fix_b_with(xi0: f64) -> Fixture {
    let tree = one_step_binomial();
    let obstacle = LadlagPredictableProcess { left: vec![vec![xi0], vec![1.0, 0.0]], value: vec![vec![xi0], vec![1.0, 0.0]] };
    Fixture { name: "B", tree, obstacle, driver: Driver::zero() }
}

pub fn fix_b() -> Fixture {
    fix_b_with(0.2)
}

/// Two binomial stages with a fair mark `u`/`d` revealed at time 1; the final
/// reward is 1 exactly when the mark was `u`.
pub fn fix_c() -> Fixture {
    let pre1 = vec![PreNode { parent: 0, dw: 1.0, p: 0.5 }, PreNode { parent: 0, dw: -1.0, p: 0.5 }];
    let post1: Vec<PostNode> =
        (0..2).flat_map(|i| ["u", "d"].map(|m| PostNode { parent: i, mark: m.to_string(), q: 0.5 })).collect();
    let pre2: Vec<PreNode> = (0..4).flat_map(|j| [1.0, -1.0].map(|dw| PreNode { parent: j, dw, p: 0.5 })).collect();
    let post2: Vec<PostNode> = (0..8).map(|i| PostNode { parent: i, mark: "x".to_string(), q: 1.0 }).collect();
    let tree =
        FiltrationTree::from_stages(1.0, vec![StageNodes { pre: pre1, post: post1 }, StageNodes { pre: pre2, post: post2 }])
            .expect("valid tree");
    let terminal: Vec<f64> = (0..8).map(|i| if (i / 2) % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let obstacle = LadlagPredictableProcess {
        left: vec![vec![0.0], vec![0.0; 2], terminal.clone()],
        value: vec![vec![0.0], vec![0.0; 2], terminal],
    };
    Fixture { name: "C", tree, obstacle, driver: Driver::zero() }
}

/// FIX-B's tree with a left reward `(2, 0)` just before time 1.
pub fn fix_d() -> Fixture {
    let tree = one_step_binomial();
    let obstacle = LadlagPredictableProcess { left: vec![vec![0.0], vec![2.0, 0.0]], value: vec![vec![0.0], vec![1.0, 0.0]] };
    Fixture { name: "D", tree, obstacle, driver: Driver::zero() }
}

/// FIX-B with the discounting driver `g = -0.1 y`.
pub fn fix_e() -> Fixture {
    Fixture { name: "E", driver: Driver::discount(0.1), ..fix_b() }
}

pub fn all() -> Vec<Fixture> {
    vec![fix_a(), fix_b(), fix_c(), fix_d(), fix_e()]
}
