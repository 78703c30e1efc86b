//! Model files, solution tables and atomic output.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::driver::{Driver, DriverSpec};
use crate::error::{Error, Result};
use crate::filtration::{FiltrationTree, StageNodes};
use crate::process::{AtomState, ExtendedStoppingTime, LadlagPredictableProcess, Side};
use crate::rbsde::RbsdeSolution;
use crate::stopping::StoppingDiagnostics;

pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleStage {
    pub left: Vec<f64>,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleFile {
    pub initial: f64,
    pub stages: Vec<ObstacleStage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub dt: f64,
    pub stages: Vec<StageNodes>,
    pub obstacle: ObstacleFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver: Option<DriverSpec>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub tree: FiltrationTree,
    pub obstacle: LadlagPredictableProcess,
    pub driver: Option<Driver>,
}

impl ModelFile {
    pub fn from_parts(tree: &FiltrationTree, obstacle: &LadlagPredictableProcess, driver: Option<&DriverSpec>) -> Self {
        ModelFile {
            version: MODEL_VERSION,
            dt: tree.dt(),
            stages: tree.stages(),
            obstacle: ObstacleFile {
                initial: obstacle.value[0][0],
                stages: (1..=tree.stage_count())
                    .map(|k| ObstacleStage { left: obstacle.left[k].clone(), value: obstacle.value[k].clone() })
                    .collect(),
            },
            driver: driver.cloned(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", self.version)));
        }
        let tree = FiltrationTree::from_stages(self.dt, self.stages)?;
        if self.obstacle.stages.len() != tree.stage_count() {
            return Err(Error::ShapeMismatch(format!(
                "obstacle has {} stages, tree has {}",
                self.obstacle.stages.len(),
                tree.stage_count()
            )));
        }
        let mut left = vec![vec![self.obstacle.initial]];
        let mut value = vec![vec![self.obstacle.initial]];
        for s in self.obstacle.stages {
            left.push(s.left);
            value.push(s.value);
        }
        let obstacle = LadlagPredictableProcess { left, value };
        obstacle.check_shape(&tree)?;
        let driver = self.driver.as_ref().map(Driver::from_spec).transpose()?;
        Ok(Model { tree, obstacle, driver })
    }
}

pub fn parse_model(text: &str) -> Result<Model> {
    serde_json::from_str::<ModelFile>(text)?.into_model()
}

pub fn load_model(path: &Path) -> Result<Model> {
    parse_model(&fs::read_to_string(path)?)
}

pub fn model_json(tree: &FiltrationTree, obstacle: &LadlagPredictableProcess, driver: Option<&DriverSpec>) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelFile::from_parts(tree, obstacle, driver))?)
}

/// Writes through a temporary file in the target directory, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub const CSV_HEADER: [&str; 11] = ["stage", "instant", "atom", "Y", "pYplus", "dA", "dB", "pi", "dMW", "dMeta", "obstacle"];

/// One row per stage, instant and atom. `left` and `value` rows are indexed
/// by pre-node, `plus` rows (right limits) by post-node; columns that do not
/// apply to an instant are left empty.
pub fn solution_csv(tree: &FiltrationTree, obstacle: &LadlagPredictableProcess, sol: &RbsdeSolution) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    let f = |x: f64| fmt_real(x);
    let e = String::new;
    for k in 0..=tree.stage_count() {
        if k > 0 {
            for i in 0..tree.pre(k).len() {
                w.write_record([
                    k.to_string(),
                    "left".into(),
                    i.to_string(),
                    f(sol.y.left[k][i]),
                    e(),
                    f(sol.d_a[k][i]),
                    e(),
                    e(),
                    f(sol.d_mw[k][i]),
                    e(),
                    f(obstacle.left[k][i]),
                ])
                .map_err(io)?;
            }
        }
        for i in 0..tree.pre(k).len() {
            w.write_record([
                k.to_string(),
                "value".into(),
                i.to_string(),
                f(sol.y.value[k][i]),
                f(sol.p_y_plus[k][i]),
                e(),
                f(sol.d_b[k][i]),
                e(),
                e(),
                e(),
                f(obstacle.value[k][i]),
            ])
            .map_err(io)?;
        }
        for j in 0..tree.post(k).len() {
            w.write_record([
                k.to_string(),
                "plus".into(),
                j.to_string(),
                f(sol.y_plus.values[k][j]),
                e(),
                e(),
                e(),
                f(sol.pi.values[k][j]),
                e(),
                f(sol.d_meta[k][j]),
                e(),
            ])
            .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

/// Per-stage arrays of `"continue"`, `"left"`, `"value"` or `"unreached"`.
pub fn stopping_time_json(tree: &FiltrationTree, tau: &ExtendedStoppingTime) -> Result<Value> {
    let states = tau.resolve(tree)?;
    Ok(Value::Array(
        states
            .iter()
            .map(|row| {
                Value::Array(
                    row.iter()
                        .map(|s| {
                            Value::from(match s {
                                AtomState::Unreached => "unreached",
                                AtomState::Continue => "continue",
                                AtomState::Stop(Side::Left) => "left",
                                AtomState::Stop(Side::Value) => "value",
                            })
                        })
                        .collect(),
                )
            })
            .collect(),
    ))
}

pub fn diagnostics_json(tree: &FiltrationTree, d: &StoppingDiagnostics) -> Result<Value> {
    Ok(json!({
        "S": d.s,
        "tau": stopping_time_json(tree, &d.tau)?,
        "value_per_atom": d.value_per_atom,
        "criterion": {"a": d.criterion.a, "b": d.criterion.b, "c": d.criterion.c},
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::rbsde::{solve_rbsde, BarrierSide};

    #[test]
    fn model_round_trip_is_exact() {
        let f = fixtures::fix_c();
        let text = model_json(&f.tree, &f.obstacle, Some(f.driver.spec())).unwrap();
        let m = parse_model(&text).unwrap();
        assert_eq!(m.tree, f.tree);
        assert_eq!(m.obstacle, f.obstacle);
        assert_eq!(m.driver.unwrap(), f.driver);
        assert_eq!(model_json(&m.tree, &m.obstacle, Some(f.driver.spec())).unwrap(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = fixtures::fix_b();
        let text = model_json(&f.tree, &f.obstacle, None).unwrap().replacen("\"dt\"", "\"extra\": 1, \"dt\"", 1);
        assert!(matches!(parse_model(&text), Err(Error::Format(_))));
    }

    #[test]
    fn csv_has_root_row() {
        let f = fixtures::fix_b();
        let sol = solve_rbsde(&f.tree, &f.driver, &f.obstacle, BarrierSide::Lower).unwrap();
        let csv = solution_csv(&f.tree, &f.obstacle, &sol).unwrap();
        let row = csv.lines().nth(1).unwrap();
        assert!(row.starts_with("0,value,0,5.0000000000000000e-1,"));
        assert_eq!(fmt_real(0.1).parse::<f64>().unwrap(), 0.1);
    }
}
