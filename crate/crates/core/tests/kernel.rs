use hardchain_core::kernel::{prog, Kernel, KernelDerivs, KernelParams};
use proptest::prelude::*;

fn kernel(t: usize, p: usize) -> Kernel<f64> {
    Kernel::new(KernelParams::new(t, p).unwrap())
}

fn max_support(d: &KernelDerivs<f64>) -> usize {
    let mut top = d.grad.iter().rposition(|&v| v != 0.0).map_or(0, |i| i + 1);
    if let Some(h) = &d.hess {
        for i in 0..h.diag.len() {
            if h.diag[i] != 0.0 {
                top = top.max(i + 1);
            }
        }
        for i in 0..h.off.len() {
            if h.off[i] != 0.0 {
                top = top.max(i + 2);
            }
        }
    }
    for tensor in &d.higher {
        if let Some(m) = tensor.support_max() {
            top = top.max(m + 1);
        }
    }
    top
}

fn chain(max_t: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    (1..=max_t).prop_flat_map(move |t| prop::collection::vec(lo..hi, t))
}

#[test]
fn origin_gradient() {
    let g = kernel(5, 1).gradient(&[0.0; 5]).unwrap();
    assert!((g[0] + 1f64.exp().sqrt()).abs() < 1e-14);
    assert!(g[1..].iter().all(|&v| v == 0.0));
    // Central difference oracle for the first component.
    let k = kernel(5, 1);
    let h = 1e-5;
    let mut a = [0.0; 5];
    let mut b = [0.0; 5];
    a[0] = h;
    b[0] = -h;
    let fd = (k.value(&a).unwrap() - k.value(&b).unwrap()) / (2.0 * h);
    assert!((fd - g[0]).abs() < 1e-8);
}

#[test]
fn all_ones_is_bounded() {
    let k = kernel(7, 2);
    let d = k.derivs(&[1.0; 7], 2).unwrap();
    assert!(d.value.is_finite());
    assert!(d.grad.iter().all(|v| v.is_finite() && v.abs() <= 23.0));
}

#[test]
fn prog_examples() {
    assert_eq!(prog(&[0.5, 0.3, 0.1], 0.25), 2);
    assert_eq!(prog(&[0.0, 0.0, 0.0], 0.1), 0);
    assert_eq!(prog(&[1.0, 0.3, 0.2, 0.26], 0.25), 4);
}

#[test]
fn smoothstep_bounds() {
    let k = kernel(1, 1);
    assert_eq!(k.smoothstep(0.2, 0), 0.0);
    assert_eq!(k.smoothstep(0.6, 0), 1.0);
    let mut prev = 0.0;
    let mut top = 0.0f64;
    for i in 0..=4000 {
        let s = i as f64 / 4000.0;
        let v = k.smoothstep(s, 0);
        assert!(v >= prev - 1e-15);
        prev = v;
        top = top.max(k.smoothstep(s, 1));
    }
    assert!(top <= 6.0 + 1e-9, "max slope {top}");
}

#[test]
fn theta_regimes_and_lipschitz() {
    let k = kernel(4, 1);
    let beta = 2.0;
    assert_eq!(k.theta(2, &[5.0, 0.4, -0.5, 0.1], beta), 1.0);
    assert_eq!(k.theta(2, &[0.0, 0.0, 1.0, 0.0], beta), 0.0);
    let mut rng = hardchain_core::rng::keyed_rng(7, "theta-lip", 0);
    use rand::Rng;
    let mut worst = 0.0f64;
    for _ in 0..20000 {
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.2..1.2)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-1e-3..1e-3)).collect();
        let dx = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        for i in 1..=4 {
            worst = worst.max((k.theta(i, &x, beta) - k.theta(i, &y, beta)).abs() / dx);
        }
    }
    assert!(worst <= 36.0 / beta, "Θ Lipschitz ratio {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn truncation_is_exact(x in chain(8, -3.0, 3.0), s_frac in 0.0..1.0f64, r in 0.0..0.5f64) {
        let t = x.len();
        let s = 1 + ((t - 1) as f64 * s_frac) as usize;
        let mut x = x;
        let norm = x[s - 1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in x[s - 1..].iter_mut() {
                *v *= r / norm;
            }
        }
        let mut cut = x.clone();
        for v in cut[s..].iter_mut() {
            *v = 0.0;
        }
        let k = kernel(t, 3);
        prop_assert_eq!(k.derivs(&x, 3).unwrap(), k.derivs(&cut, 3).unwrap());
    }

    #[test]
    fn support_law(x in chain(8, -3.0, 3.0), i_frac in 0.0..1.0f64) {
        let t = x.len();
        let i = 1 + (t as f64 * i_frac) as usize;
        let mut x = x;
        for v in x[(i - 1).min(t)..].iter_mut() {
            *v = 0.0;
        }
        let d = kernel(t, 3).derivs(&x, 3).unwrap();
        prop_assert!(max_support(&d) <= i.min(t));
    }

    #[test]
    fn gradient_floor(x in chain(10, -4.0, 4.0), pick in 0usize..10, small in -0.999..0.999f64) {
        let mut x = x;
        let n = x.len();
        x[pick % n] = small;
        let g = kernel(n, 1).gradient(&x).unwrap();
        prop_assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() > 1.0);
    }

    #[test]
    fn gradient_components_bounded(x in chain(10, -6.0, 6.0)) {
        let g = kernel(x.len(), 1).gradient(&x).unwrap();
        prop_assert!(g.iter().all(|v| v.abs() <= 23.0));
    }

    #[test]
    fn theta_sandwich(x in chain(8, -1.0, 1.0), beta in 0.5..2.0f64) {
        let k = kernel(x.len(), 1);
        let lo = prog(&x, beta / 4.0);
        let hi = prog(&x, beta / 2.0);
        for i in 1..=x.len() {
            let th = k.theta(i, &x, beta);
            let below = if i > lo { 1.0 } else { 0.0 };
            let above = if i > hi { 1.0 } else { 0.0 };
            prop_assert!(below <= th && th <= above, "i={} Θ={} lo={} hi={}", i, th, lo, hi);
        }
    }

    #[test]
    fn prog_monotone(x in chain(10, -1.0, 1.0), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let (z1, z2) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(prog(&x, z1) >= prog(&x, z2));
    }
}
