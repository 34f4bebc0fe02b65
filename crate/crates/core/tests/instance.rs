use hardchain_core::haar::sample_haar;
use hardchain_core::instance::{chi, chi_jvp, Instance};
use hardchain_core::kernel::prog;
use hardchain_core::params::{params_for, InstanceParams, ProblemConstants, Setting};
use hardchain_core::rng::{keyed_rng, random_unit};
use proptest::prelude::*;
use rand::Rng;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn det_instance(t: usize, d: usize, seed: u64) -> Instance<f64> {
    let p = InstanceParams::custom(Setting::Deterministic { p: 1 }, t, t, 0.7, 1.3, 0.7 / 1.3).unwrap();
    Instance::generate(p.with_dimension(d, true).unwrap(), seed).unwrap()
}

fn kernel_grad_norm(inst: &Instance<f64>, x: &[f64]) -> f64 {
    norm(&inst.kernel.gradient(&inst.coords(x).unwrap()).unwrap())
}

#[test]
fn haar_columns_orthonormal() {
    let e = sample_haar::<f64>(8, 3, 1).unwrap();
    assert!(e.orthonormality_defect() < 1e-10);
    assert!(sample_haar::<f64>(2, 3, 1).is_err());
}

#[test]
fn two_seeds_are_in_generic_position() {
    let (t, d) = (4, 12);
    let a = sample_haar::<f64>(d, t, 1).unwrap();
    let b = sample_haar::<f64>(d, t, 2).unwrap();
    // Largest cosine of the principal angles = top singular value of AᵀB.
    let m: Vec<Vec<f64>> = (0..t)
        .map(|i| (0..t).map(|j| a.column(i).iter().zip(b.column(j)).map(|(x, y)| x * y).sum()).collect())
        .collect();
    let mut v = vec![1.0; t];
    for _ in 0..500 {
        let mv: Vec<f64> = (0..t).map(|i| (0..t).map(|j| m[i][j] * v[j]).sum()).collect();
        let mtmv: Vec<f64> = (0..t).map(|j| (0..t).map(|i| m[i][j] * mv[i]).sum()).collect();
        let n = norm(&mtmv);
        v = mtmv.iter().map(|x| x / n).collect();
    }
    let mv: Vec<f64> = (0..t).map(|i| (0..t).map(|j| m[i][j] * v[j]).sum()).collect();
    let top = norm(&mv);
    assert!(top < 1.0 - 1e-6, "largest principal cosine {top}");
}

#[test]
fn sphere_tail_bound() {
    let d = 64;
    let n = 100_000;
    let mut rng = keyed_rng(11, "sphere-tail", 0);
    let mut hits = [0usize; 2];
    for _ in 0..n {
        let u = random_unit(&mut rng, d);
        for (h, c) in hits.iter_mut().zip([0.2, 0.4]) {
            if u[0].abs() >= c {
                *h += 1;
            }
        }
    }
    for (h, c) in hits.iter().zip([0.2f64, 0.4]) {
        let bound = 2.0 * (-(d as f64) * c * c / 2.0).exp();
        let freq = *h as f64 / n as f64;
        let sigma = (bound.min(1.0) * (1.0 - bound.min(1.0)) / n as f64).sqrt();
        assert!(freq <= bound + 3.0 * sigma, "c={c}: {freq} vs {bound}");
    }
}

#[test]
fn gradient_at_zero_and_orthogonal_points() {
    let inst = det_instance(3, 9, 4);
    let g0 = inst.tilde_grad(&[0.0; 9]).unwrap();
    let scale = inst.alpha() / inst.beta() * 0.5f64.exp();
    for (g, u) in g0.iter().zip(inst.embedding.column(0)) {
        assert!((g + scale * u).abs() < 1e-14);
    }
    // Remove the span(U) component of a random vector.
    let mut rng = keyed_rng(1, "perp", 0);
    let mut x: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let c = inst.embedding.project(&x);
    let back = inst.embedding.lift(&c);
    for (xi, b) in x.iter_mut().zip(back) {
        *xi -= b;
    }
    let gx = inst.tilde_grad(&x).unwrap();
    for (a, b) in gx.iter().zip(&g0) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn chi_radius_examples() {
    let rhat = 3.0;
    assert_eq!(chi(&[0.0; 4], rhat), vec![0.0; 4]);
    let x = [3.0 / 2.0f64.sqrt(), 0.0, 3.0 / 2.0f64.sqrt()];
    assert!((norm(&chi(&x, rhat)) - rhat / 2f64.sqrt()).abs() < 1e-14);
}

#[test]
fn hat_gradient_at_zero_and_far_away() {
    let inst = det_instance(4, 12, 2);
    let (_, h0) = inst.hat_eval(&[0.0; 12]).unwrap();
    let g0 = inst.tilde_grad(&[0.0; 12]).unwrap();
    assert!(h0.iter().zip(&g0).all(|(a, b)| (a - b).abs() < 1e-15));

    let mut rng = keyed_rng(2, "far", 0);
    let beta = inst.beta();
    let alpha = inst.alpha();
    for _ in 0..20 {
        let x: Vec<f64> = random_unit(&mut rng, 12).into_iter().map(|v| v * 1e6 * beta).collect();
        let (_, g) = inst.hat_eval(&x).unwrap();
        let floor = alpha / 5.0 * norm(&x) / (beta * beta) - alpha / beta * 23.0 * 2.0;
        assert!(norm(&g) >= floor);
        assert!(floor > inst.params.eps);
    }
}

#[test]
fn deterministic_scales_match_target() {
    for eps in [0.3, 0.1, 0.01] {
        let p = params_for(Setting::Deterministic { p: 1 }, ProblemConstants::new(1.0, 1.0, 0.0, eps)).unwrap();
        assert!((p.alpha / p.beta - eps).abs() <= 4.0 * f64::EPSILON * eps);
    }
}

#[test]
fn soft_projection_precondition_is_empty_in_half_ball() {
    // Every point of B(0, R/2) has a kernel coordinate below 1 in magnitude, so the
    // gradient floor keeps ∥∇f̃∥ above α/β, far from ε/10.
    let inst = det_instance(6, 18, 3);
    let half = inst.params.radius / 2.0;
    let mut rng = keyed_rng(3, "half-ball", 0);
    for i in 0..2000 {
        let r = half * rng.gen::<f64>().powf(1.0 / 18.0);
        let mut x: Vec<f64> = random_unit(&mut rng, 18).into_iter().map(|v| v * r).collect();
        if i % 2 == 0 {
            // Push mass into span(U) with equal coordinates, the hardest case.
            let c = vec![r / (6f64).sqrt(); 6];
            x = inst.embedding.lift(&c);
        }
        let coords = inst.coords(&x).unwrap();
        assert!(coords.iter().any(|v| v.abs() < 1.0 + 1e-12));
        assert!(kernel_grad_norm(&inst, &x) * inst.alpha() / inst.beta() > inst.params.eps / 10.0);
    }
}

#[test]
fn soft_projection_descent_stays_stationary() {
    // A near-stationary point of f̃ along the chain: descend on f̂ and confirm the endpoint is
    // ε-stationary for f̂ and its image under χ still has every chain coordinate ≥ 1.
    let t = 6;
    let inst = det_instance(t, 18, 5);
    let beta = inst.beta();
    let x_star = inst.embedding.lift(&vec![5.0 * beta; t]);
    let eps = inst.alpha() / inst.beta();
    assert!(norm(&inst.tilde_grad(&x_star).unwrap()) <= eps / 5.0);
    let step = beta * beta / (152.0 * inst.alpha());
    let mut x = x_star.clone();
    let mut converged = false;
    for _ in 0..200_000 {
        let (_, g) = inst.hat_eval(&x).unwrap();
        if norm(&g) <= eps {
            converged = true;
            break;
        }
        for (a, b) in x.iter_mut().zip(&g) {
            *a -= step * b;
        }
    }
    assert!(converged);
    let y = inst.coords(&chi(&x, inst.params.soft_radius)).unwrap();
    assert_eq!(prog(&y, 1.0), t);
    assert!(kernel_grad_norm(&inst, &chi(&x, inst.params.soft_radius)) < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_invariance(seed in 0u64..1000, scale in 0.1..4.0f64) {
        let inst = det_instance(5, 15, seed);
        let mut rng = keyed_rng(seed, "rot", 0);
        let x: Vec<f64> = random_unit(&mut rng, 15).into_iter().map(|v| v * scale * inst.beta()).collect();
        let ambient = norm(&inst.tilde_grad(&x).unwrap());
        let kernel = inst.alpha() / inst.beta() * kernel_grad_norm(&inst, &x);
        prop_assert!((ambient - kernel).abs() <= 1e-10 * kernel.max(1.0));
    }

    #[test]
    fn chi_stays_inside(x in prop::collection::vec(-1e8..1e8f64, 1..10), rhat in 0.1..100.0f64) {
        // Strictly inside in exact arithmetic; far out the norm rounds to R̂ itself.
        prop_assert!(norm(&chi(&x, rhat)) <= rhat * (1.0 + 4.0 * f64::EPSILON));
    }

    #[test]
    fn chi_jvp_matches_differences(seed in 0u64..1000) {
        let mut rng = keyed_rng(seed, "jvp", 0);
        let rhat = rng.gen_range(0.5..5.0);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let v = random_unit(&mut rng, 6);
        let h = 1e-5;
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let fd: Vec<f64> = chi(&xp, rhat).iter().zip(chi(&xm, rhat)).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let j = chi_jvp(&x, &v, rhat);
        let err = norm(&fd.iter().zip(&j).map(|(a, b)| a - b).collect::<Vec<_>>());
        prop_assert!(err <= 1e-6 * norm(&j).max(1.0), "err {}", err);
    }

    #[test]
    fn tilde_and_hat_gradients_match_differences(seed in 0u64..1000) {
        let inst = det_instance(4, 10, seed);
        let mut rng = keyed_rng(seed, "fd", 0);
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0) * inst.beta()).collect();
        let h = 1e-5 * inst.beta();
        let g = inst.tilde_grad(&x).unwrap();
        let (_, hg) = inst.hat_eval(&x).unwrap();
        let mut fd = vec![0.0; 10];
        let mut fdh = vec![0.0; 10];
        for i in 0..10 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            fd[i] = (inst.tilde_value(&a).unwrap() - inst.tilde_value(&b).unwrap()) / (2.0 * h);
            fdh[i] = (inst.hat_eval(&a).unwrap().0 - inst.hat_eval(&b).unwrap().0) / (2.0 * h);
        }
        let rel = |p: &[f64], q: &[f64]| norm(&p.iter().zip(q).map(|(a, b)| a - b).collect::<Vec<_>>()) / norm(q).max(1.0);
        prop_assert!(rel(&fd, &g) <= 1e-5);
        prop_assert!(rel(&fdh, &hg) <= 1e-5);
    }
}
