use hardchain_core::instance::Instance;
use hardchain_core::kernel::prog;
use hardchain_core::oracles::{dist2, subspace_audit, MssKeying, Oracle, OracleKind};
use hardchain_core::params::{InstanceParams, Setting};
use hardchain_core::rng::{keyed_rng, random_unit};
use hardchain_core::scalar::dot;
use proptest::prelude::*;
use rand::Rng;

fn inst(setting: Setting, t: usize, columns: usize, d: usize, seed: u64) -> Instance<f64> {
    let p = InstanceParams::custom(setting, t, columns, 0.8, 1.6, 0.5).unwrap();
    Instance::generate(p.with_dimension(d, true).unwrap(), seed).unwrap()
}

/// Ambient point with the given kernel coordinates.
fn at(inst: &Instance<f64>, coords: &[f64]) -> Vec<f64> {
    let c: Vec<f64> = coords.iter().map(|v| v * inst.beta()).collect();
    inst.embedding.lift(&c)
}

fn kernel_support(inst: &Instance<f64>, g: &[f64]) -> usize {
    let n = dot(g, g).sqrt();
    let c = inst.embedding.project(g);
    c.iter().rposition(|v| v.abs() > 1e-12 * n.max(1e-300)).map_or(0, |i| i + 1)
}

#[test]
fn det_query_examples() {
    let i = inst(Setting::Deterministic { p: 2 }, 4, 4, 12, 1);
    let mut o = Oracle::new(&i, OracleKind::DetOrder { p: 2 }, 0).unwrap();
    let b0 = o.det_query(&[0.0; 12], 1).unwrap();
    let s = i.alpha() / i.beta() * 0.5f64.exp();
    for (g, u) in b0.grad.iter().zip(i.embedding.column(0)) {
        assert!((g + s * u).abs() < 1e-14);
    }
    let mut rng = keyed_rng(1, "perp", 0);
    let mut x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let back = i.embedding.lift(&i.embedding.project(&x));
    for (a, b) in x.iter_mut().zip(back) {
        *a -= b;
    }
    let bx = o.det_query(&x, 2).unwrap();
    let bz = o.det_query(&[0.0; 12], 2).unwrap();
    assert!(dist2(&bx.grad, &bz.grad) < 1e-26);
    assert!((bx.value - bz.value).abs() < 1e-14);
    assert_eq!(o.ledger.total(), 3);
}

#[test]
fn det_solver_gains_at_most_one_level_per_query() {
    let i = inst(Setting::Deterministic { p: 1 }, 6, 6, 18, 2);
    let mut o = Oracle::new(&i, OracleKind::DetOrder { p: 1 }, 0).unwrap();
    let mut x = vec![0.0; 18];
    let mut level = 0;
    for _ in 0..400 {
        let g = o.det_query(&x, 1).unwrap().grad;
        for (a, b) in x.iter_mut().zip(&g) {
            *a -= 0.05 * b;
        }
        let now = prog(&i.coords(&x).unwrap(), 1e-9);
        assert!(now <= level + 1);
        level = level.max(now);
    }
    for e in &o.ledger.trace {
        assert!(e.prog_after <= e.prog_before + 1);
    }
}

#[test]
fn bernoulli_examples() {
    let i = inst(Setting::Stochastic, 4, 4, 24, 3);
    let x = at(&i, &[1.2, -0.9, 0.1, 0.0]);
    let exact = i.tilde_grad(&x).unwrap();
    let mut one = Oracle::new(&i, OracleKind::Bernoulli { prob: 1.0 }, 0).unwrap();
    for _ in 0..20 {
        assert_eq!(one.bernoulli_query(&x).unwrap(), exact);
    }
    let p = 0.2;
    let mut o = Oracle::new(&i, OracleKind::Bernoulli { prob: p }, 9).unwrap().without_trace();
    let n = 100_000;
    let mut sum = vec![0.0; 24];
    let mut zeros = 0;
    for _ in 0..n {
        let g = o.bernoulli_query(&x).unwrap();
        let c = i.embedding.project(&g);
        if c[2].abs() < 1e-12 {
            zeros += 1;
            assert!(c[3..].iter().all(|&v| v.abs() < 1e-12));
        }
        for (s, v) in sum.iter_mut().zip(&g) {
            *s += v / n as f64;
        }
    }
    assert!(zeros > 0);
    // Only the revealing component is random: its per-draw spread is |g|·√((1−p)/p).
    let ec = i.embedding.project(&exact);
    let sc = i.embedding.project(&sum);
    let sigma = ec[2].abs() * ((1.0 - p) / p / n as f64).sqrt();
    assert!(sigma > 0.0);
    assert!((sc[2] - ec[2]).abs() <= 3.0 * sigma);
    assert!((sc[0] - ec[0]).abs() < 1e-12 && (sc[1] - ec[1]).abs() < 1e-12);
}

#[test]
fn mx_recipe_identities() {
    let i = inst(Setting::Stochastic, 3, 6, 60, 4);
    let o = Oracle::new(&i, OracleKind::MeanHiding { columns: 6 }, 4).unwrap();
    let x = vec![0.0; 60];
    let r = o.build_mx(&x).unwrap().unwrap();
    for a in 0..6 {
        for b in 0..6 {
            let g = dot(&r.nonzero_column(a), &r.nonzero_column(b));
            assert!((g - if a == b { 1.0 } else { 0.0 }).abs() < 1e-10);
        }
    }
    let mut mean = vec![0.0; 60];
    for j in 0..12 {
        for (m, c) in mean.iter_mut().zip(r.column(j)) {
            *m += 2.0 * r.gamma * 6f64.sqrt() * c / 12.0;
        }
    }
    let comp = i.kernel.gradient(&i.coords(&x).unwrap()).unwrap()[0] * i.alpha() / i.beta();
    let target: Vec<f64> = i.embedding.column(0).iter().map(|u| u * comp).collect();
    assert!(dist2(&mean, &target).sqrt() < 1e-12);

    let y = at(&i, &[1.0, 0.0, 0.0]);
    let ry = o.build_mx(&y).unwrap().unwrap();
    assert_eq!((r.level, ry.level), (1, 2));
    for a in 0..6 {
        for b in 0..6 {
            assert!(dot(&r.nonzero_column(a), &ry.nonzero_column(b)).abs() <= 1e-10);
        }
    }
}

#[test]
fn meanhiding_examples() {
    let cols = 5;
    let i = inst(Setting::Stochastic, 4, cols, 60, 5);
    let mut o = Oracle::new(&i, OracleKind::MeanHiding { columns: cols }, 5).unwrap();
    let x = at(&i, &[0.7, 0.1, 0.0, 0.0]);
    let r = o.build_mx(&x).unwrap().unwrap();
    let all = o.all_responses(&x).unwrap();
    assert_eq!(o.ledger.total(), 2 * cols as u64);
    let exact = i.tilde_grad(&x).unwrap();
    let mut mean = vec![0.0; 60];
    for g in &all {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / all.len() as f64;
        }
    }
    assert!(dist2(&mean, &exact).sqrt() <= 1e-10);

    let g_level = dot(&exact, &r.e_x);
    let base = g_level;
    let scale = 2.0 * r.gamma * (cols as f64).sqrt();
    for (j, g) in all.iter().enumerate() {
        let along = dot(g, &r.e_x) - (base - r.gamma);
        let m = dot(&r.column(j), &r.e_x);
        assert!((along - scale * m).abs() < 1e-10);
        assert!(m.abs() < 1e-12 || (m.abs() - 1.0 / (cols as f64).sqrt()).abs() < 1e-12);
    }

    let (_, var) = o.exact_moments(&x).unwrap();
    let bound = 4.0 * cols as f64 * (23.0 * i.alpha() / i.beta()).powi(2);
    assert!(var <= bound);
}

#[test]
fn mss_theta_regimes() {
    let cols = 4;
    let i = inst(Setting::StochasticMss, 6, cols, 80, 6);
    let mut mss = Oracle::new(&i, OracleKind::SmoothedMss { columns: cols }, 6).unwrap();
    // Θ = 0: enough mass between β/4 and β/2 beyond the level.
    let x0 = at(&i, &[1.0, 0.49, 0.49, 0.49, 0.49, 0.49]);
    let exact = i.tilde_grad(&x0).unwrap();
    for j in 0..2 * cols {
        assert!(dist2(&mss.mss_query(&x0, Some(j)).unwrap(), &exact).sqrt() < 1e-13);
    }
    // Θ = 1 with both threshold levels equal: identical to the mean-hiding response.
    let x1 = at(&i, &[1.0, 0.8, 0.1, 0.0, 0.0, 0.0]);
    let before = mss.ledger.trace.len();
    let mut mh = Oracle::new(&i, OracleKind::MeanHiding { columns: cols }, 6).unwrap();
    for j in 0..2 * cols {
        let a = mss.mss_query(&x1, Some(j)).unwrap();
        let b = mh.meanhiding_query(&x1, Some(j)).unwrap();
        assert!(dist2(&a, &b).sqrt() < 1e-13);
    }
    assert!(mss.ledger.trace[before..].iter().all(|e| e.level_mismatch.is_none()));

    // Levels disagree: flagged in the trace under either keying.
    let x2 = at(&i, &[1.0, 0.3, 0.0, 0.0, 0.0, 0.0]);
    let mut q = Oracle::new(&i, OracleKind::SmoothedMss { columns: cols }, 6).unwrap().with_keying(MssKeying::QuarterThreshold);
    q.mss_query(&x2, Some(0)).unwrap();
    assert_eq!(q.ledger.trace[0].level_mismatch, Some((2, 3)));
}

#[test]
fn subspace_audit_examples() {
    let t = 5;
    let i = inst(Setting::Deterministic { p: 1 }, t, t, 20, 7);
    let mut last = vec![0.0; t];
    last[t - 1] = 1.0;
    let x = at(&i, &last);
    for s in 1..t {
        assert!(subspace_audit(&i, &x, s).unwrap());
    }
    let head = at(&i, &[3.0, -2.0, 5.0, 0.0, 0.0]);
    assert!(!subspace_audit(&i, &head, 3).unwrap());
}

#[test]
fn random_points_rarely_overlap_the_chain() {
    let t = 4;
    let d = (200.0 * t as f64 * (t as f64).ln()).ceil() as usize;
    let i = inst(Setting::Deterministic { p: 1 }, t, t, d, 8);
    let mut rng = keyed_rng(8, "audit", 0);
    let trials = 10_000;
    let mut hits = 0;
    for _ in 0..trials {
        let x: Vec<f64> = random_unit(&mut rng, d).into_iter().map(|v| v * i.beta() * (t as f64).sqrt()).collect();
        if subspace_audit(&i, &x, 1).unwrap() {
            hits += 1;
        }
    }
    let freq = 1.0 - hits as f64 / trials as f64;
    assert!(freq >= 1.0 - 1.0 / (100.0 * t as f64), "frequency {freq}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn column_oracles_are_unbiased(seed in 0u64..10_000, mss in any::<bool>()) {
        let cols = 3;
        let setting = if mss { Setting::StochasticMss } else { Setting::Stochastic };
        let i = inst(setting, 4, cols, 40, seed);
        let kind = if mss { OracleKind::SmoothedMss { columns: cols } } else { OracleKind::MeanHiding { columns: cols } };
        let mut o = Oracle::new(&i, kind, seed).unwrap();
        let mut rng = keyed_rng(seed, "unbiased", 0);
        let coords: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let x = at(&i, &coords);
        let (mean, var) = o.exact_moments(&x).unwrap();
        prop_assert!(dist2(&mean, &i.tilde_grad(&x).unwrap()).sqrt() <= 1e-10);
        prop_assert!(var <= 4.0 * cols as f64 * (23.0 * i.alpha() / i.beta()).powi(2));
    }

    #[test]
    fn det_support_law(seed in 0u64..10_000, level in 1usize..=5) {
        let i = inst(Setting::Deterministic { p: 1 }, 5, 5, 15, seed);
        let mut rng = keyed_rng(seed, "support", 0);
        let coords: Vec<f64> = (0..5).map(|k| if k + 1 < level { rng.gen_range(-3.0..3.0) } else { 0.0 }).collect();
        let mut o = Oracle::new(&i, OracleKind::DetOrder { p: 1 }, 0).unwrap();
        let g = o.det_query(&at(&i, &coords), 1).unwrap().grad;
        prop_assert!(kernel_support(&i, &g) <= level);
    }

    #[test]
    fn ledger_counts_grow(n in 1usize..30) {
        let i = inst(Setting::Stochastic, 3, 3, 30, 1);
        let mut o = Oracle::new(&i, OracleKind::Bernoulli { prob: 0.5 }, 1).unwrap();
        let mut prev = 0;
        for _ in 0..n {
            o.bernoulli_query(&[0.0; 30]).unwrap();
            prop_assert!(o.ledger.total() > prev);
            prev = o.ledger.total();
        }
        prop_assert_eq!(o.ledger.to_jsonl().unwrap().lines().count(), n);
    }
}
