//! `presto`: solve, stop, verify, compare against the oracle and sweep.
//!
//! Exit codes: 0 success, 1 configuration or validation error, 2 solver
//! failure, 3 comparison mismatch. Output files are written only after every
//! computation has succeeded, each one atomically.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use presto_core::audit::run_sweep;
use presto_core::bsde::martingale_residuals;
use presto_core::io::{diagnostics_json, fmt_real, solution_csv, stopping_time_json, write_atomic};
use presto_core::oracle::{brute_force_value, EnumerationBudget};
use presto_core::process::{regularity_report, InstantMode};
use presto_core::rbsde::{solve_rbsde, verify_rbsde, BarrierSide};
use presto_core::stopping::{is_martingale_interval, optimality_report, reflection_window, tau_alpha, tau_tilde, theta_alpha};

use config::{instances, load, parse_driver, parse_generate, Rule, RunConfig, SEED_VAR};

#[derive(Parser, Debug)]
#[command(name = "presto", version, about = "Reflected BSDEs and nonlinear optimal stopping on finite trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model file (tree, obstacle, optional driver).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Random instance, e.g. `seed=1,stages=3,w=2,marks=2,dt=0.5,obstacle=uniform`.
    #[arg(long, global = true)]
    generate: Option<String>,
    /// Driver override, e.g. `name=affine,a=0.1,b=0.2,c=0`.
    #[arg(long, global = true)]
    driver: Option<String>,
    /// Starting stage `S`.
    #[arg(long, global = true)]
    stage: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, value_enum)]
    rule: Option<Rule>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<InstantMode>,
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Largest number of stopping times the oracle may enumerate.
    #[arg(long, global = true)]
    budget: Option<u64>,
    /// Number of seeds for `oracle-compare` and `sweep`.
    #[arg(long, global = true)]
    count: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Solve the reflected equation and write the solution table.
    Solve,
    /// Build a stopping rule and report its optimality diagnostics.
    Stop,
    /// Check the Skorokhod conditions and identities of the solution.
    Verify,
    /// Compare the solver with the brute-force oracle.
    OracleCompare,
    /// Run the invariant suite over a seeded batch of instances.
    Sweep,
}

fn parse_mode(s: &str) -> Result<InstantMode, String> {
    match s {
        "doubled" => Ok(InstantMode::Doubled),
        "grid" => Ok(InstantMode::Grid),
        _ => Err(format!("unknown mode '{s}', expected doubled or grid")),
    }
}

/// A computed result that disagrees with its reference.
#[derive(Debug)]
struct Mismatch(String);

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Mismatch {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Mismatch>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<presto_core::Error>() {
            return if e.is_solver_failure() { 2 } else { 1 };
        }
    }
    1
}

fn config_from(cli: &Cli) -> Result<RunConfig> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let flags = RunConfig {
        model: cli.model.clone(),
        generate: cli.generate.as_deref().map(parse_generate).transpose()?,
        driver: cli.driver.as_deref().map(parse_driver).transpose()?,
        stage: cli.stage,
        alpha: cli.alpha,
        rule: cli.rule,
        mode: cli.mode,
        tol: cli.tol,
        out: cli.out.clone(),
        budget: cli.budget,
        count: cli.count,
    };
    file.overlay(flags).finish(std::env::var(SEED_VAR).ok())
}

/// Files are collected first and written only once everything succeeded.
struct Outputs(Vec<(PathBuf, String)>);

impl Outputs {
    fn write(self, dir: Option<&Path>) -> Result<()> {
        let Some(dir) = dir else { return Ok(()) };
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, text) in self.0 {
            write_atomic(&dir.join(&name), text.as_bytes())?;
        }
        Ok(())
    }
}

fn solve(cfg: &RunConfig) -> Result<(serde_json::Value, Outputs)> {
    let m = load(cfg)?;
    let sol = solve_rbsde(&m.tree, &m.driver, &m.obstacle, BarrierSide::Lower)?;
    let flags = regularity_report(&m.tree, &m.obstacle)?;
    let csv = solution_csv(&m.tree, &m.obstacle, &sol)?;
    let summary = json!({
        "seed": m.seed,
        "stages": m.tree.stage_count(),
        "nodes": m.tree.node_count(),
        "driver": m.driver.spec(),
        "Y0": fmt_real(sol.y.value[0][0]),
        "lusc": flags.lusc,
        "p_right_dominated": flags.p_right_dominated,
        "max_martingale_residual": martingale_residuals(&m.tree, &sol.d_mw, &sol.d_meta).max(),
    });
    let files = vec![("solution.csv".into(), csv), ("summary.json".into(), serde_json::to_string_pretty(&summary)?)];
    Ok((summary, Outputs(files)))
}

fn stop(cfg: &RunConfig) -> Result<(serde_json::Value, Outputs)> {
    let m = load(cfg)?;
    let s = cfg.stage.unwrap_or(0);
    let sol = solve_rbsde(&m.tree, &m.driver, &m.obstacle, BarrierSide::Lower)?;
    let rule = cfg.rule.unwrap_or_default();
    let alpha = || cfg.alpha.context("this rule needs --alpha");
    let tau = match rule {
        Rule::TauTilde => tau_tilde(&m.tree, &sol, s, cfg.mode())?,
        Rule::TauAlpha => tau_alpha(&m.tree, &m.driver, &m.obstacle, &sol, s, alpha()?)?,
        Rule::ThetaAlpha => theta_alpha(&m.tree, &m.obstacle, &sol, s, alpha()?)?,
    };
    let diag = optimality_report(&m.tree, &m.driver, &m.obstacle, &sol, s, &tau)?;
    let window = reflection_window(&m.tree, &sol, s, &tau)?;
    let mut diagnostics = diagnostics_json(&m.tree, &diag)?;
    diagnostics["value_function"] = json!(sol.y.value[s]);
    diagnostics["reflection_window"] = json!(window);
    diagnostics["martingale_interval"] = json!(is_martingale_interval(&m.tree, &sol, s, &tau)?);
    let files = vec![
        ("stopping_time.json".into(), serde_json::to_string_pretty(&stopping_time_json(&m.tree, &tau)?)?),
        ("diagnostics.json".into(), serde_json::to_string_pretty(&diagnostics)?),
    ];
    Ok((diagnostics, Outputs(files)))
}

fn verify(cfg: &RunConfig) -> Result<(serde_json::Value, Outputs)> {
    let m = load(cfg)?;
    let sol = solve_rbsde(&m.tree, &m.driver, &m.obstacle, BarrierSide::Lower)?;
    let report = verify_rbsde(&m.tree, &m.driver, &m.obstacle, &sol, BarrierSide::Lower);
    let value = serde_json::to_value(&report)?;
    if !report.is_empty() {
        bail!(Mismatch(format!("{} violations, first: {:?}", report.violations.len(), report.violations[0])));
    }
    Ok((value.clone(), Outputs(vec![("verify.json".into(), serde_json::to_string_pretty(&value)?)])))
}

fn oracle_compare(cfg: &RunConfig) -> Result<(serde_json::Value, Outputs)> {
    let tol = cfg.tol.unwrap_or(1e-9);
    let count = cfg.count.unwrap_or(1);
    let mut table = String::from("seed,stage,atom,value_function,oracle,gap\n");
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for m in instances(cfg, count)? {
        let sol = solve_rbsde(&m.tree, &m.driver, &m.obstacle, BarrierSide::Lower)?;
        for s in 0..=m.tree.stage_count() {
            let bf = brute_force_value(&m.tree, &m.driver, &m.obstacle, s, &EnumerationBudget::new(cfg.budget(), cfg.mode()))?;
            for (i, (y, o)) in sol.y.value[s].iter().zip(&bf.values).enumerate() {
                // grid-mode stopping is only a lower bound
                let gap = match cfg.mode() {
                    InstantMode::Doubled => (y - o).abs(),
                    InstantMode::Grid => (o - y).max(0.0),
                };
                worst = worst.max(gap);
                let seed = m.seed.map(|x| x.to_string()).unwrap_or_default();
                table.push_str(&format!("{seed},{s},{i},{},{},{}\n", fmt_real(*y), fmt_real(*o), fmt_real(gap)));
            }
        }
        checked += 1;
    }
    let summary = json!({"instances": checked, "max_gap": worst, "tol": tol});
    if worst > tol {
        bail!(Mismatch(format!("largest gap {worst:e} exceeds {tol:e}")));
    }
    let files =
        vec![("oracle_compare.csv".into(), table), ("oracle_summary.json".into(), serde_json::to_string_pretty(&summary)?)];
    Ok((summary, Outputs(files)))
}

fn sweep(cfg: &RunConfig) -> Result<serde_json::Value> {
    let Some(base) = &cfg.generate else {
        bail!(presto_core::Error::InvalidArgument("sweep needs --generate".into()));
    };
    let count = cfg.count.unwrap_or(100);
    // reports of failing seeds are written too; they are the diagnostics
    let summary = run_sweep(base, count, cfg.budget(), cfg.out.as_deref())?;
    let value = json!({
        "count": summary.count,
        "passed": summary.passed,
        "failed_seeds": summary.failed_seeds,
        "oracle_checked": summary.oracle_checked,
        "lusc_instances": summary.lusc_instances,
        "single_mark_instances": summary.single_mark_instances,
    });
    if !summary.failed_seeds.is_empty() {
        bail!(Mismatch(format!("seeds failed: {:?}", summary.failed_seeds)));
    }
    Ok(value)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config_from(cli)?;
    let summary = match cli.command {
        Command::Solve => finish(solve(&cfg)?, &cfg)?,
        Command::Stop => finish(stop(&cfg)?, &cfg)?,
        Command::Verify => finish(verify(&cfg)?, &cfg)?,
        Command::OracleCompare => finish(oracle_compare(&cfg)?, &cfg)?,
        Command::Sweep => sweep(&cfg)?,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn finish((summary, files): (serde_json::Value, Outputs), cfg: &RunConfig) -> Result<serde_json::Value> {
    files.write(cfg.out.as_deref())?;
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
