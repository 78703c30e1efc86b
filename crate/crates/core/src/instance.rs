//! Seeded random instances: tree, obstacle and driver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::driver::{Driver, DriverSpec, Generator};
use crate::error::{Error, Result};
use crate::filtration::{build_random_tree, FiltrationTree};
use crate::oracle::count_stopping_times;
use crate::process::{InstantMode, LadlagPredictableProcess};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    /// Independent uniform values in `[-1, 1]` at both instants.
    #[default]
    Uniform,
    /// Uniform values with `ξ_{k-} <= ξ_k`.
    Lusc,
    /// Uniform values in `[0, 1]`.
    Nonnegative,
    /// `ξ_k <= E[ξ_{(k+1)-} | G_k]` at every stage.
    Submartingale,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverChoice {
    /// A registry driver with random parameters.
    #[default]
    Registry,
    Zero,
}

fn default_w() -> usize {
    2
}
fn default_marks() -> usize {
    2
}
fn default_dt() -> f64 {
    0.5
}
fn default_bound() -> f64 {
    0.5
}

/// Parameters of the instance generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub stages: usize,
    #[serde(default = "default_w")]
    pub w: usize,
    #[serde(default = "default_marks")]
    pub marks: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub obstacle: ObstacleKind,
    #[serde(default)]
    pub driver: DriverChoice,
    /// Upper bound on `K (dt + max|ΔW|)` for sampled drivers.
    #[serde(default = "default_bound")]
    pub contraction: f64,
}

impl GeneratorSpec {
    pub fn new(seed: u64, stages: usize) -> Self {
        GeneratorSpec {
            seed,
            stages,
            w: default_w(),
            marks: default_marks(),
            dt: default_dt(),
            obstacle: ObstacleKind::default(),
            driver: DriverChoice::default(),
            contraction: default_bound(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    /// Number of redraws needed to satisfy a size constraint.
    pub attempt: u64,
    pub tree: FiltrationTree,
    pub obstacle: LadlagPredictableProcess,
    pub driver: Driver,
}

impl Instance {
    /// `K (dt + max|ΔW|)`, the quantity bounding the comparison principle.
    pub fn monotonicity_margin(&self) -> f64 {
        self.driver.lipschitz() * (self.tree.dt() + self.tree.max_abs_dw())
    }
}

pub fn generate(spec: &GeneratorSpec) -> Result<Instance> {
    generate_attempt(spec, 0)
}

pub fn generate_attempt(spec: &GeneratorSpec, attempt: u64) -> Result<Instance> {
    if !(spec.contraction.is_finite() && spec.contraction >= 0.0) {
        return Err(Error::InvalidArgument("contraction bound must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(attempt);
    let tree = build_random_tree(rng.gen(), spec.stages, spec.w, spec.marks, spec.dt)?;
    let obstacle = random_obstacle(&tree, spec.obstacle, &mut rng);
    let driver = match spec.driver {
        DriverChoice::Zero => Driver::zero(),
        DriverChoice::Registry => random_driver(&tree, spec.contraction, &mut rng),
    };
    Ok(Instance { seed: spec.seed, attempt, tree, obstacle, driver })
}

/// Redraws until the number of stopping times from stage 0 fits the budget.
pub fn generate_within_budget(spec: &GeneratorSpec, budget: u64, max_attempts: u64) -> Result<Instance> {
    for attempt in 0..max_attempts {
        let inst = generate_attempt(spec, attempt)?;
        if count_stopping_times(&inst.tree, 0, InstantMode::Doubled)? <= budget as u128 {
            return Ok(inst);
        }
    }
    Err(Error::InvalidArgument(format!("no draw of seed {} fits the budget after {max_attempts} attempts", spec.seed)))
}

pub fn random_obstacle<R: Rng>(tree: &FiltrationTree, kind: ObstacleKind, rng: &mut R) -> LadlagPredictableProcess {
    match kind {
        ObstacleKind::Uniform => LadlagPredictableProcess::from_fn(tree, |_, _| rng.gen_range(-1.0..=1.0)),
        ObstacleKind::Nonnegative => LadlagPredictableProcess::from_fn(tree, |_, _| rng.gen_range(0.0..=1.0)),
        ObstacleKind::Lusc => {
            let mut xi = LadlagPredictableProcess::from_fn(tree, |_, _| rng.gen_range(-1.0..=1.0));
            for k in 1..=tree.stage_count() {
                for i in 0..xi.value[k].len() {
                    xi.left[k][i] = xi.value[k][i] - rng.gen_range(0.0..=1.0);
                }
            }
            xi
        }
        ObstacleKind::Submartingale => {
            let n = tree.stage_count();
            let mut xi = LadlagPredictableProcess::from_fn(tree, |_, _| rng.gen_range(-1.0..=1.0));
            for k in (0..n).rev() {
                let next = tree.e_pre(k, &tree.e_post(k, &xi.left[k + 1]));
                xi.value[k] = next.iter().map(|m| m - rng.gen_range(0.0..=0.5)).collect();
            }
            xi.left[0] = xi.value[0].clone();
            xi
        }
    }
}

/// A registry driver with `K (dt + max|ΔW|) <= bound`.
pub fn random_driver<R: Rng>(tree: &FiltrationTree, bound: f64, rng: &mut R) -> Driver {
    let k_max = bound / (tree.dt() + tree.max_abs_dw());
    let mut unit = |lo: f64, hi: f64| rng.gen_range(lo..=hi);
    let spec = match (unit(0.0, 4.0) as usize).min(3) {
        0 => DriverSpec::new("zero", &[]),
        1 => {
            let w = unit(0.0, 1.0);
            let r = unit(0.0, 1.0) * k_max;
            let (sb, sc) = (if unit(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 }, if unit(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 });
            DriverSpec::new(
                "affine",
                &[("a", unit(-1.0, 1.0)), ("a_t", unit(-1.0, 1.0)), ("b", sb * w * r), ("c", sc * (1.0 - w) * r)],
            )
        }
        2 => DriverSpec::new("discount", &[("rho", unit(-1.0, 1.0) * k_max)]),
        _ => {
            let w = unit(0.0, 1.0);
            let r = unit(0.0, 1.0) * k_max;
            let sign = if unit(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
            DriverSpec::new("ambiguity", &[("rho", sign * w * r), ("kappa", (1.0 - w) * r)])
        }
    };
    let d = Driver::from_spec(&spec).expect("registry parameters are finite");
    // rounding in the split can push K over the bound by an ulp
    if d.lipschitz() * (tree.dt() + tree.max_abs_dw()) > bound {
        return Driver::zero();
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::regularity_report;

    #[test]
    fn generation_is_deterministic() {
        let spec = GeneratorSpec::new(42, 3);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.tree, b.tree);
        assert_eq!(a.obstacle, b.obstacle);
        assert_eq!(a.driver, b.driver);
        assert!(a.monotonicity_margin() <= 0.5);
    }

    #[test]
    fn obstacle_kinds_have_their_flags() {
        for seed in 0..20 {
            let mut spec = GeneratorSpec::new(seed, 3);
            spec.obstacle = ObstacleKind::Lusc;
            let inst = generate(&spec).unwrap();
            assert!(regularity_report(&inst.tree, &inst.obstacle).unwrap().lusc);
            spec.obstacle = ObstacleKind::Nonnegative;
            let inst = generate(&spec).unwrap();
            assert!(inst.obstacle.value.iter().flatten().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn budget_constrained_draws_fit() {
        let inst = generate_within_budget(&GeneratorSpec::new(3, 3), 1_000_000, 1000).unwrap();
        assert!(count_stopping_times(&inst.tree, 0, InstantMode::Doubled).unwrap() <= 1_000_000);
    }
}
