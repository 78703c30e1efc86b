#![allow(dead_code)]

use presto_core::instance::{generate, generate_within_budget, DriverChoice, GeneratorSpec, Instance, ObstacleKind};
use presto_core::oracle::DEFAULT_BUDGET;

pub const DTS: [f64; 3] = [0.25, 0.5, 1.0];

/// Up to three stages, two increments and at most two marks per node, uniform
/// obstacle, registry driver with `K (dt + max|ΔW|) <= 0.5`. Redrawn until
/// the stopping times from stage 0 fit the default budget.
pub fn small_spec(seed: u64, obstacle: ObstacleKind) -> GeneratorSpec {
    GeneratorSpec {
        seed,
        stages: 1 + (seed % 3) as usize,
        w: 2,
        marks: 2,
        dt: DTS[((seed / 3) % 3) as usize],
        obstacle,
        driver: DriverChoice::Registry,
        contraction: 0.5,
    }
}

pub fn small_instances(count: u64, obstacle: ObstacleKind) -> Vec<Instance> {
    (1..=count).map(|seed| small_instances_from(seed, obstacle)).collect()
}

pub fn oracle_population() -> Vec<Instance> {
    small_instances(200, ObstacleKind::Uniform)
}

const KINDS: [ObstacleKind; 4] =
    [ObstacleKind::Uniform, ObstacleKind::Lusc, ObstacleKind::Nonnegative, ObstacleKind::Submartingale];

/// Up to six stages with up to three increments per node.
pub fn structural_spec(seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        seed,
        stages: 1 + (seed % 6) as usize,
        w: 3,
        marks: if seed.is_multiple_of(3) { 1 } else { 2 },
        dt: DTS[((seed / 6) % 3) as usize],
        obstacle: KINDS[(seed % 4) as usize],
        driver: if seed.is_multiple_of(5) { DriverChoice::Zero } else { DriverChoice::Registry },
        contraction: 0.5,
    }
}

pub fn structural_population() -> Vec<Instance> {
    (1..=500).map(|seed| generate(&structural_spec(seed)).expect("valid instance")).collect()
}

/// The criterion-one instance for an arbitrary seed.
pub fn small_instances_from(seed: u64, obstacle: ObstacleKind) -> Instance {
    generate_within_budget(&small_spec(seed, obstacle), DEFAULT_BUDGET, 10_000).expect("instance fits the budget")
}
