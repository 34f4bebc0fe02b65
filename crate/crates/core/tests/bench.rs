use hardchain_core::bench::*;
use hardchain_core::instance::Instance;
use hardchain_core::oracles::OracleKind;
use hardchain_core::params::{InstanceParams, Setting};

fn gd_spec(budget: u64, seed: u64) -> SolverSpec {
    SolverSpec::new(SolverId::Gd { step: 1.0 / 152.0 }, 0.9, budget, seed)
}

fn one_level_per_query(rec: &BenchRecord) -> bool {
    rec.prog_trace.windows(2).all(|w| w[1].prog <= w[0].prog || w[1].prog - w[0].prog <= (w[1].query - w[0].query) as usize)
}

#[test]
fn gd_reaches_the_end_of_the_chain() {
    let inst = Instance::<f64>::kernel_units(10, 0.9).unwrap();
    let rec = run_gd(&inst, &gd_spec(100_000, 0)).unwrap();
    assert!(rec.success);
    assert_eq!(rec.prog_final, 10);
    assert!(rec.grad_norm <= 0.9);
    assert!(one_level_per_query(&rec));
    assert!(rec.queries_per_advance.iter().all(|&q| q > 0));
}

#[test]
fn chain_follower_examples() {
    let t = 10;
    let inst = Instance::<f64>::kernel_units(t, 0.9).unwrap();
    let spec = SolverSpec::new(SolverId::ChainFollower { initial_step: 0.5 }, 0.9, 1000 * t as u64, 1);
    let rec = run_chain_follower(&inst, &spec).unwrap();
    assert!(rec.success);
    assert!(rec.queries >= t as u64 && rec.queries <= 50 * t as u64, "queries {}", rec.queries);
    assert_eq!(rec.revealed, (1..=t).collect::<Vec<_>>());
    assert!(one_level_per_query(&rec));
    assert!(rec.queries_per_advance.iter().sum::<u64>() <= rec.queries);
}

#[test]
fn chain_follower_on_rotated_instance() {
    let p = InstanceParams::custom(Setting::Deterministic { p: 1 }, 5, 5, 0.5, 2.0, 0.25).unwrap();
    let inst = Instance::<f64>::generate(p.with_dimension(40, true).unwrap(), 3).unwrap();
    let spec = SolverSpec::new(SolverId::ChainFollower { initial_step: 1.0 }, 0.9 * 0.25, 5000, 3);
    let rec = run_chain_follower(&inst, &spec).unwrap();
    assert!(rec.success);
    assert_eq!(rec.revealed, (1..=5).collect::<Vec<_>>());
}

#[test]
fn sgd_with_certain_bernoulli_is_gd() {
    let inst = Instance::<f64>::kernel_units(6, 0.9).unwrap();
    let gd = run_gd(&inst, &gd_spec(100_000, 4)).unwrap();
    let spec = SolverSpec::new(SolverId::Sgd { step: 1.0 / 152.0, batch: 1, exhaustive: false }, 0.9, 100_000, 4);
    let sgd = run_sgd(&inst, &spec, OracleKind::Bernoulli { prob: 1.0 }).unwrap();
    assert_eq!(sgd.grad_norm.to_bits(), gd.grad_norm.to_bits());
    assert_eq!(sgd.prog_trace, gd.prog_trace);
    // GD also pays for the query that observes the small gradient.
    assert_eq!(sgd.queries + 1, gd.queries);
}

#[test]
fn exhaustive_meanhiding_sgd_tracks_gd() {
    let cols = 3;
    let p = InstanceParams::custom(Setting::Stochastic, 4, cols, 1.0, 1.0, 0.9).unwrap();
    let inst = Instance::<f64>::generate(p.with_dimension(40, true).unwrap(), 6).unwrap();
    let gd = run_gd(&inst, &gd_spec(100_000, 6)).unwrap();
    let spec = SolverSpec::new(SolverId::Sgd { step: 1.0 / 152.0, batch: 2 * cols, exhaustive: true }, 0.9, 1_000_000, 6);
    let sgd = run_sgd(&inst, &spec, OracleKind::MeanHiding { columns: cols }).unwrap();
    assert!(sgd.success && gd.success);
    assert_eq!(sgd.prog_final, gd.prog_final);
    assert_eq!(sgd.queries, (gd.queries - 1) * 2 * cols as u64);
    assert!((sgd.grad_norm - gd.grad_norm).abs() <= 1e-8 * gd.grad_norm);
}

#[test]
fn bernoulli_advances_cost_one_over_p() {
    let p = 0.1;
    let q = bernoulli_cost(p, 5, 50, 17).unwrap();
    assert_eq!(q.len(), 250);
    let mean = q.iter().sum::<u64>() as f64 / q.len() as f64;
    let sigma = ((1.0 - p) / (p * p) / q.len() as f64).sqrt();
    assert!((mean - 1.0 / p).abs() <= 3.0 * sigma, "mean {mean}");
}

#[test]
fn runs_are_reproducible() {
    let inst = Instance::<f64>::kernel_units(5, 0.9).unwrap();
    let spec = SolverSpec::new(SolverId::Sgd { step: 0.1, batch: 1, exhaustive: false }, 0.9, 20_000, 9);
    let a = run_sgd(&inst, &spec, OracleKind::Bernoulli { prob: 0.1 }).unwrap();
    let b = run_sgd(&inst, &spec, OracleKind::Bernoulli { prob: 0.1 }).unwrap();
    assert_eq!(a, b);
    let r = SolverSpec::new(SolverId::RandomSearch, 0.9, 200, 9);
    assert_eq!(run_random_search(&inst, &r).unwrap(), run_random_search(&inst, &r).unwrap());
}

#[test]
fn random_search_does_not_find_stationary_points() {
    let p = InstanceParams::custom(Setting::Deterministic { p: 1 }, 8, 8, 1.0, 1.0, 1.0).unwrap();
    let inst = Instance::<f64>::generate(p.with_dimension(200, true).unwrap(), 2).unwrap();
    let rec = run_random_search(&inst, &SolverSpec::new(SolverId::RandomSearch, 1.0, 2000, 2)).unwrap();
    assert!(!rec.success);
    assert_eq!(rec.queries, 2000);
}

#[test]
fn csv_layout() {
    let inst = Instance::<f64>::kernel_units(3, 0.9).unwrap();
    let rec = run_gd(&inst, &gd_spec(10_000, 0)).unwrap();
    let fit = fit_loglog(&[1.0, 2.0, 4.0], &[3.0, 6.0, 12.0]).unwrap();
    let text = to_csv(&[rec.clone(), rec], &["seed=0".into()], Some(&fit)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# seed=0");
    assert_eq!(lines[1], CSV_COLUMNS.join(","));
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("# fit: slope=1 "));
}

#[test]
fn power_law_fits() {
    let eps = [0.4, 0.2, 0.1, 0.05];
    let q: Vec<f64> = eps.iter().map(|e: &f64| 7.0 * e.powi(-2)).collect();
    let f = fit_loglog(&eps, &q).unwrap();
    assert!((f.slope + 2.0).abs() <= 1e-9);
    let flat = fit_loglog(&eps, &[5.0; 4]).unwrap();
    assert_eq!(flat.slope, 0.0);
    assert!(flat.r2.is_none());
    assert!(fit_loglog(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
}
