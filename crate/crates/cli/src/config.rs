//! Run configuration: an optional JSON file overlaid by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use serde_json::{Map, Value};

use presto_core::driver::{Driver, DriverSpec};
use presto_core::filtration::FiltrationTree;
use presto_core::instance::{generate, generate_within_budget, GeneratorSpec, Instance};
use presto_core::io::load_model;
use presto_core::oracle::DEFAULT_BUDGET;
use presto_core::process::{InstantMode, LadlagPredictableProcess};

pub const SEED_VAR: &str = "PRESTO_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    #[default]
    TauTilde,
    TauAlpha,
    ThetaAlpha,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub generate: Option<GeneratorSpec>,
    pub driver: Option<DriverSpec>,
    pub stage: Option<usize>,
    pub alpha: Option<f64>,
    pub rule: Option<Rule>,
    pub mode: Option<InstantMode>,
    pub tol: Option<f64>,
    pub out: Option<PathBuf>,
    pub budget: Option<u64>,
    pub count: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Fields set in `other` win.
    pub fn overlay(self, other: RunConfig) -> Self {
        RunConfig {
            model: other.model.or(self.model),
            generate: other.generate.or(self.generate),
            driver: other.driver.or(self.driver),
            stage: other.stage.or(self.stage),
            alpha: other.alpha.or(self.alpha),
            rule: other.rule.or(self.rule),
            mode: other.mode.or(self.mode),
            tol: other.tol.or(self.tol),
            out: other.out.or(self.out),
            budget: other.budget.or(self.budget),
            count: other.count.or(self.count),
        }
    }

    /// Applies `PRESTO_SEED` and checks that exactly one model source is given.
    pub fn finish(mut self, env_seed: Option<String>) -> Result<Self> {
        if let Some(text) = env_seed {
            let seed: u64 =
                text.trim().parse().with_context(|| format!("{SEED_VAR} must be an unsigned integer, got '{text}'"))?;
            match self.generate.as_mut() {
                Some(spec) => spec.seed = seed,
                None if self.model.is_none() => bail!("{SEED_VAR} is set but no generator is configured"),
                None => {}
            }
        }
        if self.model.is_some() == self.generate.is_some() {
            bail!("give exactly one of --model and --generate");
        }
        if let Some(tol) = self.tol {
            if !(tol.is_finite() && tol >= 0.0) {
                bail!("tolerance must be finite and nonnegative");
            }
        }
        if let Some(spec) = &self.driver {
            Driver::from_spec(spec)?;
        }
        Ok(self)
    }

    pub fn budget(&self) -> u64 {
        self.budget.unwrap_or(DEFAULT_BUDGET)
    }

    pub fn mode(&self) -> InstantMode {
        self.mode.unwrap_or_default()
    }
}

/// Parses `key=value,key=value` into a JSON object, numbers where possible.
pub fn key_values(text: &str) -> Result<Map<String, Value>> {
    let mut map = Map::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let Some((k, v)) = part.split_once('=') else {
            bail!("expected key=value, got '{part}'");
        };
        let v = v.trim();
        // integers stay integers so they deserialize into `u64` fields
        let value = if let Ok(n) = v.parse::<u64>() {
            Value::from(n)
        } else if let Ok(x) = v.parse::<f64>() {
            Value::from(x)
        } else {
            Value::from(v)
        };
        if map.insert(k.trim().to_string(), value).is_some() {
            bail!("key '{}' given twice", k.trim());
        }
    }
    Ok(map)
}

pub fn parse_generate(text: &str) -> Result<GeneratorSpec> {
    serde_json::from_value(Value::Object(key_values(text)?)).with_context(|| format!("bad generator settings '{text}'"))
}

/// `name=affine,a=0.1,b=0.2`: the name plus the driver's parameters.
pub fn parse_driver(text: &str) -> Result<DriverSpec> {
    let mut map = key_values(text)?;
    let Some(Value::String(name)) = map.remove("name") else {
        bail!("--driver needs name=<driver>");
    };
    let mut params = Vec::new();
    for (k, v) in &map {
        let Some(x) = v.as_f64() else {
            bail!("driver parameter {k} must be a number");
        };
        params.push((k.as_str(), x));
    }
    Ok(DriverSpec::new(&name, &params))
}

/// The model to work on: tree, obstacle and the driver in effect.
pub struct Loaded {
    pub seed: Option<u64>,
    pub tree: FiltrationTree,
    pub obstacle: LadlagPredictableProcess,
    pub driver: Driver,
}

impl From<Instance> for Loaded {
    fn from(inst: Instance) -> Self {
        Loaded { seed: Some(inst.seed), tree: inst.tree, obstacle: inst.obstacle, driver: inst.driver }
    }
}

/// Loads the configured model; `--driver` replaces the model's own driver,
/// and a model without one uses `g = 0`.
pub fn load(cfg: &RunConfig) -> Result<Loaded> {
    let mut loaded = match (&cfg.model, &cfg.generate) {
        (Some(path), _) => {
            let m = load_model(path).with_context(|| format!("loading {}", path.display()))?;
            Loaded { seed: None, tree: m.tree, obstacle: m.obstacle, driver: m.driver.unwrap_or_else(Driver::zero) }
        }
        (None, Some(spec)) => generate(spec)?.into(),
        (None, None) => bail!("no model configured"),
    };
    if let Some(spec) = &cfg.driver {
        loaded.driver = Driver::from_spec(spec)?;
    }
    Ok(loaded)
}

/// `count` generated instances starting at the configured seed, each redrawn
/// until its stopping times fit the budget.
pub fn instances(cfg: &RunConfig, count: u64) -> Result<Vec<Loaded>> {
    let Some(base) = &cfg.generate else {
        return Ok(vec![load(cfg)?]);
    };
    (0..count)
        .map(|i| {
            let spec = GeneratorSpec { seed: base.seed.wrapping_add(i), ..base.clone() };
            let mut loaded: Loaded = generate_within_budget(&spec, cfg.budget(), 1000)?.into();
            if let Some(d) = &cfg.driver {
                loaded.driver = Driver::from_spec(d)?;
            }
            Ok(loaded)
        })
        .collect()
}
