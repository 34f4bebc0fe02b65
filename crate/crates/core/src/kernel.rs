//! The chain function f̄_T, its building blocks Ψ and Φ, the smooth step Γ and
//! the smoothed indicators Θ_i, all in dimensionless kernel coordinates.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::quadrature::{integrate, QuadSpec};
use crate::scalar::Scalar;

/// Ψ and all its derivatives vanish at and below this point.
pub const PSI_KNEE: f64 = 0.5;
pub const PSI_GUARD: f64 = 1e-12;
/// Sup-norm bound on ∇f̄_T.
pub const GRAD_SUP_BOUND: f64 = 23.0;
/// f̄_T(0) − inf f̄_T ≤ GAP_PER_LINK · T.
pub const GAP_PER_LINK: f64 = 12.0;
/// Gradient Lipschitz constant of f̄_T.
pub const ELL_1: f64 = 152.0;
/// Lipschitz constant of Θ_i in kernel units.
pub const THETA_LIPSCHITZ: f64 = 36.0;
pub const SMOOTHSTEP_LO: f64 = 0.25;
pub const SMOOTHSTEP_HI: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelParams {
    pub t: usize,
    pub p_max: usize,
}

impl KernelParams {
    pub fn new(t: usize, p_max: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidParameter("chain length T must be at least 1".into()));
        }
        Ok(Self { t, p_max })
    }
}

/// Deliberate formula corruptions used to show that certification checks are not vacuous.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Mutation {
    /// Added to Ψ(x) for x ≤ 1/2, where Ψ should vanish.
    pub psi_flat_offset: f64,
    /// Relative perturbation applied to every gradient entry.
    pub grad_rel: f64,
    /// Added to every Θ_i value.
    pub theta_offset: f64,
}

impl Mutation {
    pub fn is_active(&self) -> bool {
        *self != Self::default()
    }
}

/// Symmetric tridiagonal matrix: `diag[i]` and `off[i]` = entry (i, i+1).
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiagonal<S> {
    pub diag: Vec<S>,
    pub off: Vec<S>,
}

impl<S: Scalar> SymTridiagonal<S> {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        match i.abs_diff(j) {
            0 => self.diag[i],
            1 => self.off[i.min(j)],
            _ => S::zero(),
        }
    }

    pub fn mat_vec(&self, v: &[S]) -> Vec<S> {
        let n = self.dim();
        (0..n)
            .map(|i| {
                let mut acc = self.diag[i] * v[i];
                if i > 0 {
                    acc += self.off[i - 1] * v[i - 1];
                }
                if i + 1 < n {
                    acc += self.off[i] * v[i + 1];
                }
                acc
            })
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<S>> {
        let n = self.dim();
        (0..n).map(|i| (0..n).map(|j| self.get(i, j)).collect()).collect()
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            diag: self.diag.iter().zip(&other.diag).map(|(&a, &b)| a - b).collect(),
            off: self.off.iter().zip(&other.off).map(|(&a, &b)| a - b).collect(),
        }
    }
}

/// Symmetric order-k tensor keyed by sorted index tuples; absent keys are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymTensor<S> {
    pub order: usize,
    pub entries: BTreeMap<Vec<usize>, S>,
}

impl<S: Scalar> SparseSymTensor<S> {
    pub fn new(order: usize) -> Self {
        Self { order, entries: BTreeMap::new() }
    }

    pub fn get(&self, idx: &[usize]) -> S {
        let mut key = idx.to_vec();
        key.sort_unstable();
        self.entries.get(&key).copied().unwrap_or_else(S::zero)
    }

    pub fn insert_nonzero(&mut self, key: Vec<usize>, v: S) {
        if v != S::zero() {
            self.entries.insert(key, v);
        }
    }

    /// Number of index permutations represented by a sorted key.
    pub fn multiplicity(key: &[usize]) -> f64 {
        let fact = |n: usize| (2..=n).map(|v| v as f64).product::<f64>();
        let mut denom = 1.0;
        let mut start = 0;
        for i in 1..=key.len() {
            if i == key.len() || key[i] != key[start] {
                denom *= fact(i - start);
                start = i;
            }
        }
        fact(key.len()) / denom
    }

    /// Frobenius norm of the full (unsymmetrized-storage) tensor.
    pub fn frobenius(&self) -> f64 {
        self.entries
            .iter()
            .map(|(k, v)| Self::multiplicity(k) * v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (k, &v) in &other.entries {
            let e = out.entries.entry(k.clone()).or_insert_with(S::zero);
            *e -= v;
        }
        out
    }

    pub fn support_max(&self) -> Option<usize> {
        self.entries.iter().filter(|(_, v)| **v != S::zero()).filter_map(|(k, _)| k.last().copied()).max()
    }
}

/// Value and derivatives of f̄_T at a point, in kernel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDerivs<S> {
    pub order: usize,
    pub value: S,
    /// Empty when `order == 0`.
    pub grad: Vec<S>,
    pub hess: Option<SymTridiagonal<S>>,
    /// Tensors of order 3..=order.
    pub higher: Vec<SparseSymTensor<S>>,
}

/// Normalization of the smooth step and the quadrature used for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothStepTables {
    pub norm_const: f64,
    pub quad: QuadSpec,
}

impl SmoothStepTables {
    pub fn with_spec(quad: QuadSpec) -> Self {
        let r = integrate(lambda_hat::<f64>, SMOOTHSTEP_LO, SMOOTHSTEP_HI, quad);
        Self { norm_const: r.value, quad }
    }

    pub fn shared() -> &'static Self {
        static TABLES: OnceLock<SmoothStepTables> = OnceLock::new();
        TABLES.get_or_init(|| Self::with_spec(QuadSpec::default()))
    }
}

/// The unnormalized bump Λ̂ supported on (1/4, 1/2).
pub fn lambda_hat<S: Scalar>(tau: S) -> S {
    let q = (tau - S::lit(SMOOTHSTEP_LO)) * (S::lit(SMOOTHSTEP_HI) - tau);
    if q <= S::zero() {
        return S::zero();
    }
    (-S::one() / (S::lit(100.0) * q)).exp()
}

fn lambda_hat_prime<S: Scalar>(tau: S) -> S {
    let lo = S::lit(SMOOTHSTEP_LO);
    let hi = S::lit(SMOOTHSTEP_HI);
    let q = (tau - lo) * (hi - tau);
    if q <= S::zero() {
        return S::zero();
    }
    let v = (-S::one() / (S::lit(100.0) * q)).exp();
    if v == S::zero() {
        return S::zero();
    }
    let dq = (hi - tau) - (tau - lo);
    v * dq / (S::lit(100.0) * q * q)
}

/// prog_ζ(x), 1-based with x₀ ≡ 0. For ζ > 0 an entry qualifies when |x_i| ≥ ζ;
/// for ζ = 0 it qualifies when it is nonzero (the support index).
pub fn prog<S: Scalar>(x: &[S], zeta: S) -> usize {
    let qualifies = |v: S| if zeta > S::zero() { v.abs() >= zeta } else { v != S::zero() };
    x.iter().rposition(|&v| qualifies(v)).map_or(0, |i| i + 1)
}

/// Evaluator for f̄_T and its building blocks.
#[derive(Debug, Clone)]
pub struct Kernel<S> {
    params: KernelParams,
    tables: SmoothStepTables,
    mutation: Mutation,
    _s: std::marker::PhantomData<S>,
}

impl<S: Scalar> Kernel<S> {
    pub fn new(params: KernelParams) -> Self {
        Self { params, tables: *SmoothStepTables::shared(), mutation: Mutation::default(), _s: Default::default() }
    }

    pub fn with_mutation(mut self, mutation: Mutation) -> Self {
        self.mutation = mutation;
        self
    }

    pub fn params(&self) -> KernelParams {
        self.params
    }

    pub fn mutation(&self) -> Mutation {
        self.mutation
    }

    pub fn tables(&self) -> &SmoothStepTables {
        &self.tables
    }

    fn check_order(&self, k: usize) -> Result<()> {
        if k > self.params.p_max {
            return Err(Error::UnsupportedOrder { requested: k, max: self.params.p_max });
        }
        Ok(())
    }

    pub fn psi(&self, x: S, k: usize) -> Result<S> {
        self.check_order(k)?;
        Ok(self.psi_unchecked(x, k))
    }

    fn psi_unchecked(&self, x: S, k: usize) -> S {
        if x <= S::lit(PSI_KNEE + PSI_GUARD) {
            if k == 0 && self.mutation.psi_flat_offset != 0.0 {
                return S::lit(self.mutation.psi_flat_offset);
            }
            return S::zero();
        }
        psi_all(x, k)[k]
    }

    pub fn phi(&self, x: S, k: usize) -> Result<S> {
        self.check_order(k)?;
        Ok(phi_all(x, k)[k])
    }

    /// Ψ^{(0..=k)}(x), honoring the mutation hook.
    fn psi_vec(&self, x: S, k: usize) -> Vec<S> {
        if x <= S::lit(PSI_KNEE + PSI_GUARD) {
            let mut out = vec![S::zero(); k + 1];
            out[0] = S::lit(self.mutation.psi_flat_offset);
            return out;
        }
        psi_all(x, k)
    }

    pub fn value(&self, x: &[S]) -> Result<S> {
        Ok(self.derivs(x, 0)?.value)
    }

    pub fn gradient(&self, x: &[S]) -> Result<Vec<S>> {
        Ok(self.derivs(x, 1)?.grad)
    }

    /// Value and derivatives of f̄_T up to order `p`; O(T·p²) work.
    pub fn derivs(&self, x: &[S], p: usize) -> Result<KernelDerivs<S>> {
        self.check_order(p)?;
        let t = self.params.t;
        if x.len() != t {
            return Err(Error::DimensionMismatch { expected: t, got: x.len() });
        }
        let psi_p: Vec<Vec<S>> = x[..t - 1].iter().map(|&v| self.psi_vec(v, p)).collect();
        let psi_m: Vec<Vec<S>> = x[..t - 1].iter().map(|&v| self.psi_vec(-v, p)).collect();
        let phi_p: Vec<Vec<S>> = x.iter().map(|&v| phi_all(v, p)).collect();
        let phi_m: Vec<Vec<S>> = x.iter().map(|&v| phi_all(-v, p)).collect();
        let psi_one = psi_all(S::one(), 0)[0];

        // ∂^a_{j-1} ∂^b_j of the link Ψ(−x_{j−1})Φ(−x_j) − Ψ(x_{j−1})Φ(x_j), j ≥ 1 (0-based).
        // A vanishing Ψ factor short-circuits so that the result is an exact +0.
        let link = |j: usize, a: usize, b: usize| -> S {
            let mut acc = S::zero();
            let pm = psi_m[j - 1][a];
            if pm != S::zero() {
                let sign = if (a + b) % 2 == 0 { S::one() } else { -S::one() };
                acc += sign * pm * phi_m[j][b];
            }
            let pp = psi_p[j - 1][a];
            if pp != S::zero() {
                acc -= pp * phi_p[j][b];
            }
            acc
        };
        // ∂^k_i of every link touching coordinate i.
        let diag_k = |i: usize, k: usize| -> S {
            let mut acc = if i == 0 { -psi_one * phi_p[0][k] } else { link(i, 0, k) };
            if i + 1 < t {
                acc += link(i + 1, k, 0);
            }
            acc
        };

        let mut value = -psi_one * phi_p[0][0];
        for j in 1..t {
            value += link(j, 0, 0);
        }
        let mut out = KernelDerivs { order: p, value, grad: Vec::new(), hess: None, higher: Vec::new() };
        if p >= 1 {
            let scale = S::one() + S::lit(self.mutation.grad_rel);
            out.grad = (0..t).map(|i| diag_k(i, 1) * scale).collect();
        }
        if p >= 2 {
            out.hess = Some(SymTridiagonal {
                diag: (0..t).map(|i| diag_k(i, 2)).collect(),
                off: (1..t).map(|j| link(j, 1, 1)).collect(),
            });
        }
        for k in 3..=p {
            let mut tensor = SparseSymTensor::new(k);
            for i in 0..t {
                tensor.insert_nonzero(vec![i; k], diag_k(i, k));
            }
            for j in 1..t {
                for a in 1..k {
                    let mut key = vec![j - 1; a];
                    key.extend(std::iter::repeat(j).take(k - a));
                    tensor.insert_nonzero(key, link(j, a, k - a));
                }
            }
            out.higher.push(tensor);
        }
        Ok(out)
    }

    /// Dimensionless smooth step Γ: 0 below 1/4, 1 above 1/2. `k` ∈ {0, 1, 2}.
    pub fn smoothstep(&self, s: S, k: usize) -> S {
        smoothstep_with(&self.tables, s, k)
    }

    /// Θ_i(x) for 1-based `i`, with `x` in kernel coordinates and length scale `beta`.
    pub fn theta(&self, i: usize, x: &[S], beta: S) -> S {
        let inner = x[i - 1..]
            .iter()
            .map(|&v| {
                let g = self.smoothstep(v.abs() / beta, 0);
                g * g
            })
            .fold(S::zero(), |a, b| a + b)
            .sqrt();
        self.smoothstep(S::one() - inner, 0) + S::lit(self.mutation.theta_offset)
    }
}

pub fn smoothstep_with<S: Scalar>(tables: &SmoothStepTables, s: S, k: usize) -> S {
    let lo = S::lit(SMOOTHSTEP_LO);
    let hi = S::lit(SMOOTHSTEP_HI);
    let z = S::lit(tables.norm_const);
    match k {
        0 if s <= lo => S::zero(),
        0 if s >= hi => S::one(),
        0 => {
            let v = integrate(lambda_hat::<S>, lo, s, tables.quad).value / z;
            v.min(S::one())
        }
        1 => lambda_hat(s) / z,
        2 => lambda_hat_prime(s) / z,
        _ => panic!("smoothstep serves orders 0, 1 and 2 only"),
    }
}

/// Ψ^{(0..=k)}(x) for x above the knee: closed forms through order 2, a Taylor jet beyond.
fn psi_all<S: Scalar>(x: S, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k + 1];
    if x <= S::lit(PSI_KNEE + PSI_GUARD) {
        return out;
    }
    let u = S::lit(2.0) * x - S::one();
    let v = (S::one() - S::one() / (u * u)).exp();
    if v == S::zero() {
        return out;
    }
    out[0] = v;
    if k >= 1 {
        out[1] = v * S::lit(4.0) / (u * u * u);
    }
    if k >= 2 {
        let u2 = u * u;
        out[2] = v * (S::lit(16.0) / (u2 * u2 * u2) - S::lit(24.0) / (u2 * u2));
    }
    if k >= 3 {
        let uj = Jet::variable(x, k).scale(S::lit(2.0)).add_scalar(-S::one());
        let e = (-&(&uj * &uj).recip()).add_scalar(S::one()).exp();
        out[3..].copy_from_slice(&e.derivatives()[3..]);
    }
    out
}

/// Φ^{(0..=k)}(x): Φ via erfc, derivatives via √e·(−1)^{n}·He_n(x)·e^{−x²/2}, n = order − 1.
fn phi_all<S: Scalar>(x: S, k: usize) -> Vec<S> {
    let sqrt_e = S::lit(std::f64::consts::E.sqrt());
    let mut out = Vec::with_capacity(k + 1);
    out.push(sqrt_e * (S::FRAC_PI_2()).sqrt() * (-x / S::SQRT_2()).erfc());
    if k == 0 {
        return out;
    }
    let g = (-x * x / S::lit(2.0)).exp() * sqrt_e;
    let (mut he_prev, mut he) = (S::zero(), S::one());
    for n in 0..k {
        let sign = if n % 2 == 0 { S::one() } else { -S::one() };
        out.push(sign * he * g);
        let next = x * he - S::from_usize(n).unwrap() * he_prev;
        he_prev = he;
        he = next;
    }
    out
}
