//! The hand-checkable models, each value confirmed by enumeration before the
//! solver is compared with it.

use presto_core::bsde::{g_expectation_from_stage, solve_bsde};
use presto_core::driver::Driver;
use presto_core::filtration::NodeRef;
use presto_core::fixtures::{fix_a, fix_b, fix_b_with, fix_c, fix_d, fix_e, Fixture};
use presto_core::oracle::{brute_force_value, count_stopping_times, EnumerationBudget};
use presto_core::process::{
    regularity_report, validate_stopping_time, ExtendedStoppingTime, Instant, InstantMode, RULE_BEFORE_START,
};
use presto_core::rbsde::{solve_rbsde, solve_rbsde_picard, verify_rbsde, BarrierSide, RULE_IDENTITY, RULE_NEGATIVE_DA};
use presto_core::snell::{bellman_check, snell_envelope};
use presto_core::stopping::{is_martingale_interval, tau_alpha, tau_tilde, theta_alpha};

fn oracle(f: &Fixture) -> f64 {
    brute_force_value(&f.tree, &f.driver, &f.obstacle, 0, &EnumerationBudget::default()).unwrap().values[0]
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn oracle_confirms_quoted_values() {
    assert_eq!(oracle(&fix_a()), 1.0);
    assert!(close(oracle(&fix_b()), 0.5));
    assert_eq!(count_stopping_times(&fix_b().tree, 0, InstantMode::Doubled).unwrap(), 5);
    assert!(close(oracle(&fix_b_with(0.8)), 0.8));
    assert!(close(oracle(&fix_c()), 0.5));
    assert!(close(oracle(&fix_d()), 1.0));
    assert!(close(oracle(&fix_e()), 0.5 / 1.1));
}

#[test]
fn solver_reproduces_fixtures() {
    oracle_confirms_quoted_values();
    let a = fix_a();
    let sol = solve_rbsde(&a.tree, &a.driver, &a.obstacle, BarrierSide::Lower).unwrap();
    assert!(sol.y.value.iter().flatten().all(|&y| y == 1.0));
    assert!(sol.pi.values.iter().flatten().all(|&p| p == 0.0));

    let b8 = fix_b_with(0.8);
    let sol = solve_rbsde(&b8.tree, &b8.driver, &b8.obstacle, BarrierSide::Lower).unwrap();
    assert!(close(sol.y.value[0][0], 0.8) && close(sol.d_b[0][0], 0.3) && close(sol.pi.values[0][0], 0.5));

    let d = fix_d();
    let sol = solve_rbsde(&d.tree, &d.driver, &d.obstacle, BarrierSide::Lower).unwrap();
    assert_eq!(sol.y.left[1], [2.0, 0.0]);
    assert_eq!(sol.d_a[1], [1.0, 0.0]);
    assert_eq!(sol.y.value[0][0], 1.0);

    let c = fix_c();
    let sol = solve_rbsde(&c.tree, &c.driver, &c.obstacle, BarrierSide::Lower).unwrap();
    assert!(close(sol.y.value[0][0], 0.5));
    assert!(sol.y.value[1].iter().all(|&y| close(y, 0.5)));
    assert!(sol.d_meta[1].iter().all(|&m| close(m.abs(), 0.5)));
}

#[test]
fn bsde_on_complete_binomial_market() {
    let b = fix_b();
    let x = solve_bsde(&b.tree, &b.driver, &b.obstacle.value[1]).unwrap();
    assert!(close(x.x.value[0][0], 0.5) && close(x.pi.values[0][0], 0.5));
    assert!(x.d_mw.iter().flatten().all(|&m| m == 0.0));
    assert!(x.d_meta.iter().flatten().all(|&m| m == 0.0));

    let terminal = ExtendedStoppingTime::terminal(&b.tree);
    assert!(close(g_expectation_from_stage(&b.tree, &b.driver, 0, &terminal, &b.obstacle).unwrap()[0], 0.5));
    let e = fix_e();
    let v = g_expectation_from_stage(&e.tree, &e.driver, 0, &terminal, &e.obstacle).unwrap()[0];
    assert!(close(v, 0.5 / 1.1));
    let discounted = solve_rbsde(&e.tree, &e.driver, &e.obstacle, BarrierSide::Lower).unwrap();
    let plain = solve_rbsde(&b.tree, &Driver::zero(), &b.obstacle, BarrierSide::Lower).unwrap();
    assert!(plain.y.value[0][0] - discounted.y.value[0][0] > 0.0);
}

#[test]
fn regularity_flags() {
    let d = fix_d();
    let r = regularity_report(&d.tree, &d.obstacle).unwrap();
    assert!(!r.lusc);
    assert_eq!(r.lusc_violations, vec![NodeRef::pre(1, 0)]);
    assert!(regularity_report(&fix_c().tree, &fix_c().obstacle).unwrap().lusc);
}

#[test]
fn stopping_time_validation() {
    let a = fix_a();
    assert!(validate_stopping_time(&a.tree, &ExtendedStoppingTime::terminal(&a.tree), 0).is_empty());
    let b = fix_b();
    let early = ExtendedStoppingTime::at_stage(&b.tree, 0).unwrap();
    assert_eq!(validate_stopping_time(&b.tree, &early, 1).count(RULE_BEFORE_START), 1);
}

#[test]
fn verification_catches_perturbations() {
    let b = fix_b();
    let mut sol = solve_rbsde(&b.tree, &b.driver, &b.obstacle, BarrierSide::Lower).unwrap();
    assert!(verify_rbsde(&b.tree, &b.driver, &b.obstacle, &sol, BarrierSide::Lower).is_empty());
    sol.y.value[0][0] += 0.1;
    sol.y.left[0][0] += 0.1;
    let report = verify_rbsde(&b.tree, &b.driver, &b.obstacle, &sol, BarrierSide::Lower);
    let v = report.violations.iter().find(|v| v.rule == RULE_IDENTITY).unwrap();
    assert!((v.magnitude - 0.1).abs() <= 1e-12);

    let d = fix_d();
    let mut sol = solve_rbsde(&d.tree, &d.driver, &d.obstacle, BarrierSide::Lower).unwrap();
    sol.d_a[1][0] = -0.5;
    assert!(verify_rbsde(&d.tree, &d.driver, &d.obstacle, &sol, BarrierSide::Lower).count(RULE_NEGATIVE_DA) > 0);
}

#[test]
fn picard_on_fixtures() {
    let a = fix_a();
    let (_, iterations) = solve_rbsde_picard(&a.tree, &a.driver, &a.obstacle, 1e-12, 50).unwrap();
    assert_eq!(iterations, 1);
    let e = fix_e();
    let (p, _) = solve_rbsde_picard(&e.tree, &e.driver, &e.obstacle, 1e-12, 50).unwrap();
    assert!(close(p.y.value[0][0], 0.5 / 1.1));
}

#[test]
fn snell_envelopes() {
    assert!(close(snell_envelope(&fix_b().tree, &fix_b().obstacle).unwrap().v.value[0][0], 0.5));
    let d = fix_d();
    let env = snell_envelope(&d.tree, &d.obstacle).unwrap();
    assert_eq!(env.v.value[0][0], 1.0);
    assert_eq!(env.decomposition.d_a[1], [1.0, 0.0]);
    assert!(env.decomposition.d_b.iter().flatten().all(|&x| x == 0.0));
    let b8 = fix_b_with(0.8);
    assert!(close(snell_envelope(&b8.tree, &b8.obstacle).unwrap().decomposition.d_b[0][0], 0.3));

    let b = fix_b();
    let up_only = [true, false];
    let rep = bellman_check(&b.tree, &b.obstacle, 1, 1, &[1.0, 1.0], &up_only, &EnumerationBudget::default(), 4, 0).unwrap();
    assert!(rep.all(), "{rep:?}");
}

#[test]
fn stopping_rules_on_fixtures() {
    let a = fix_a();
    let sol = solve_rbsde(&a.tree, &a.driver, &a.obstacle, BarrierSide::Lower).unwrap();
    let origin = vec![Instant::value(0); a.tree.leaf_count()];
    assert_eq!(tau_alpha(&a.tree, &a.driver, &a.obstacle, &sol, 0, 0.5).unwrap().leaf_instants(&a.tree).unwrap(), origin);
    assert_eq!(theta_alpha(&a.tree, &a.obstacle, &sol, 0, 1.0).unwrap().leaf_instants(&a.tree).unwrap(), origin);
    let tt = tau_tilde(&a.tree, &sol, 0, InstantMode::Doubled).unwrap();
    assert!(tt.leaf_instants(&a.tree).unwrap().iter().all(|i| *i == Instant::value(2)));
    assert!(is_martingale_interval(&a.tree, &sol, 0, &ExtendedStoppingTime::terminal(&a.tree)).unwrap());

    let c = fix_c();
    let sol = solve_rbsde(&c.tree, &c.driver, &c.obstacle, BarrierSide::Lower).unwrap();
    let theta = theta_alpha(&c.tree, &c.obstacle, &sol, 0, 1.0).unwrap();
    assert!(theta.leaf_instants(&c.tree).unwrap().iter().all(|i| *i == Instant::left(2)));

    let d = fix_d();
    let sol = solve_rbsde(&d.tree, &d.driver, &d.obstacle, BarrierSide::Lower).unwrap();
    let tt = tau_tilde(&d.tree, &sol, 0, InstantMode::Doubled).unwrap();
    assert_eq!(tt.leaf_instants(&d.tree).unwrap(), vec![Instant::left(1), Instant::value(1)]);
    assert_eq!(g_expectation_from_stage(&d.tree, &d.driver, 0, &tt, &d.obstacle).unwrap()[0], 1.0);

    let b8 = fix_b_with(0.8);
    let sol = solve_rbsde(&b8.tree, &b8.driver, &b8.obstacle, BarrierSide::Lower).unwrap();
    let tt = tau_tilde(&b8.tree, &sol, 0, InstantMode::Doubled).unwrap();
    assert_eq!(tt.leaf_instants(&b8.tree).unwrap(), vec![Instant::value(0); 2]);
    assert!(!is_martingale_interval(&b8.tree, &sol, 0, &ExtendedStoppingTime::at_stage(&b8.tree, 1).unwrap()).unwrap());
}
