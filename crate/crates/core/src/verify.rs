//! Executable certifications of the kernel, oracle and concentration properties.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haar::complete_haar;
use crate::instance::Instance;
use crate::kernel::{prog, Kernel, KernelDerivs, KernelParams, Mutation, SparseSymTensor, ELL_1, GAP_PER_LINK, GRAD_SUP_BOUND};
use crate::oracles::{dist2, MssKeying, Oracle, OracleKind};
use crate::params::{GAMMA, ELL_HAT};
use crate::rng::{keyed_rng, random_unit};
use crate::scalar::{dot, norm};

/// Two-sided 99% normal quantile.
pub const WILSON_Z99: f64 = 2.5758293035489004;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Skipped,
    Inconclusive,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub outcome: Outcome,
    /// Worst case observed over the samples.
    pub statistic: f64,
    pub bound: f64,
    pub samples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub taint: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub data: BTreeMap<String, f64>,
}

impl CheckResult {
    fn new(outcome: Outcome, statistic: f64, bound: f64, spec: &CheckSpec) -> Self {
        Self {
            outcome,
            statistic,
            bound,
            samples: spec.samples,
            seed: spec.seed,
            taint: Vec::new(),
            note: None,
            data: BTreeMap::new(),
        }
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    fn with_data(mut self, key: &str, v: f64) -> Self {
        self.data.insert(key.into(), v);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub suite: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub taint: Vec<String>,
    pub checks: BTreeMap<String, CheckResult>,
}

impl VerificationReport {
    pub fn new(suite: &str, config: serde_json::Value, taint: Vec<String>) -> Self {
        Self { suite: suite.into(), config, taint, checks: BTreeMap::new() }
    }

    /// Worst outcome across checks; an empty report passes.
    pub fn overall(&self) -> Outcome {
        self.checks.values().map(|c| c.outcome).max().unwrap_or(Outcome::Pass)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|(_, c)| c.outcome == Outcome::Fail).map(|(k, _)| k.as_str()).collect()
    }

    /// Prefixes every check id of `other` with `prefix/` and adds it to this report.
    pub fn absorb(&mut self, prefix: &str, other: VerificationReport) {
        for (k, v) in other.checks {
            self.checks.insert(format!("{prefix}/{k}"), v);
        }
        for t in other.taint {
            if !self.taint.contains(&t) {
                self.taint.push(t);
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_junit(&self) -> String {
        let esc = |s: &str| {
            s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
        };
        let failures = self.checks.values().filter(|c| c.outcome == Outcome::Fail).count();
        let skipped = self.checks.values().filter(|c| c.outcome == Outcome::Skipped).count();
        let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        out += &format!(
            "<testsuite name=\"{}\" tests=\"{}\" failures=\"{failures}\" skipped=\"{skipped}\">\n",
            esc(&self.suite),
            self.checks.len()
        );
        for (id, c) in &self.checks {
            let msg = format!("statistic={} bound={} samples={}", c.statistic, c.bound, c.samples);
            out += &format!("  <testcase classname=\"{}\" name=\"{}\">", esc(&self.suite), esc(id));
            match c.outcome {
                Outcome::Fail => out += &format!("<failure message=\"{}\"/>", esc(&msg)),
                Outcome::Skipped => out += "<skipped/>",
                Outcome::Inconclusive => out += &format!("<system-out>inconclusive: {}</system-out>", esc(&msg)),
                Outcome::Pass => {}
            }
            out += "</testcase>\n";
        }
        out += "</testsuite>\n";
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    /// Independent uniform coordinates in [lo, hi].
    Box { lo: f64, hi: f64 },
    /// Cycles through fixed points.
    Points { points: Vec<Vec<f64>> },
}

impl Sampler {
    fn draw(&self, rng: &mut impl Rng, t: usize, idx: usize) -> Vec<f64> {
        match self {
            Sampler::Box { lo, hi } => (0..t).map(|_| rng.gen_range(*lo..=*hi)).collect(),
            Sampler::Points { points } => points[idx % points.len()].clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSpec {
    pub id: String,
    pub samples: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub sampler: Sampler,
}

impl CheckSpec {
    pub fn new(id: &str, samples: usize, tolerance: f64, seed: u64, sampler: Sampler) -> Self {
        Self { id: id.into(), samples, tolerance, seed, sampler }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter(format!("check {}: need samples ≥ 1 and tolerance > 0", self.id)));
        }
        if let Sampler::Points { points } = &self.sampler {
            if points.is_empty() {
                return Err(Error::InvalidParameter(format!("check {}: empty point list", self.id)));
            }
        }
        Ok(())
    }

    /// Runs `f` on every sample in parallel; sample i always sees the same stream.
    fn map_samples<R: Send>(&self, t: usize, f: impl Fn(Vec<f64>, &mut rand_chacha::ChaCha20Rng) -> R + Sync) -> Vec<R> {
        (0..self.samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = keyed_rng(self.seed, &self.id, i as u64);
                let x = self.sampler.draw(&mut rng, t, i);
                f(x, &mut rng)
            })
            .collect()
    }
}

pub mod kernel_checks {
    pub const GRADIENT_FLOOR: &str = "gradient-floor";
    pub const SUP_NORM: &str = "sup-norm";
    pub const TRUNCATION: &str = "truncation";
    pub const FINITE_DIFFERENCE: &str = "finite-difference";
    pub const THETA_SANDWICH: &str = "theta-sandwich";
    pub const VALUE_GAP: &str = "value-gap";
}

/// The default kernel bundle: every check with `samples` draws.
pub fn kernel_suite(t: usize, samples: usize, seed: u64) -> Vec<CheckSpec> {
    use kernel_checks::*;
    vec![
        CheckSpec::new(GRADIENT_FLOOR, samples, 1.0, seed, Sampler::Box { lo: -1.5, hi: 1.5 }),
        CheckSpec::new(SUP_NORM, samples, GRAD_SUP_BOUND, seed, Sampler::Box { lo: -3.0, hi: 3.0 }),
        CheckSpec::new(TRUNCATION, samples, f64::MIN_POSITIVE, seed, Sampler::Box { lo: -1.5, hi: 1.5 }),
        CheckSpec::new(FINITE_DIFFERENCE, samples, 1e-5, seed, Sampler::Box { lo: -1.5, hi: 1.5 }),
        CheckSpec::new(THETA_SANDWICH, samples, 1e-12, seed, Sampler::Box { lo: -0.75, hi: 0.75 }),
        CheckSpec::new(VALUE_GAP, samples, GAP_PER_LINK * t as f64, seed, Sampler::Box { lo: -1.0, hi: 4.0 }),
    ]
}

/// Highest derivative order exercised by the kernel checks.
pub const KERNEL_CHECK_ORDER: usize = 3;
const FD_STEP: f64 = 1e-4;

/// Runs kernel checks on f̄_T, optionally with a deliberate corruption installed.
pub fn certify_kernel(t: usize, specs: &[CheckSpec], mutation: Mutation) -> Result<VerificationReport> {
    for s in specs {
        s.validate()?;
    }
    let kernel = Kernel::<f64>::new(KernelParams::new(t, KERNEL_CHECK_ORDER)?).with_mutation(mutation);
    let mut taint = Vec::new();
    if mutation.is_active() {
        taint.push(format!(
            "mutation(psi_flat_offset={},grad_rel={},theta_offset={})",
            mutation.psi_flat_offset, mutation.grad_rel, mutation.theta_offset
        ));
    }
    let config = serde_json::json!({ "t": t, "specs": specs, "mutation": mutation });
    let mut report = VerificationReport::new("kernel", config, taint);
    let results: Vec<(String, Result<CheckResult>)> =
        specs.par_iter().map(|s| (s.id.clone(), run_kernel_check(&kernel, s))).collect();
    for (id, r) in results {
        report.checks.insert(id, r?);
    }
    Ok(report)
}

fn run_kernel_check(kernel: &Kernel<f64>, spec: &CheckSpec) -> Result<CheckResult> {
    use kernel_checks::*;
    let t = kernel.params().t;
    let bad = |id: &str| Error::InvalidParameter(format!("unknown kernel check {id}"));
    Ok(match spec.id.as_str() {
        GRADIENT_FLOOR => {
            // The only admissible j ≤ i with |x_j| < 1 for the first such i is i itself.
            let vals = spec.map_samples(t, |x, _| -> Result<Option<f64>> {
                let Some(i) = x.iter().position(|v| v.abs() < 1.0) else { return Ok(None) };
                Ok(Some(kernel.gradient(&x)?[i].abs()))
            });
            let vals: Vec<f64> = vals.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
            let applicable = vals.len();
            if applicable == 0 {
                CheckResult::new(Outcome::Skipped, f64::NAN, spec.tolerance, spec)
                    .with_note("no sample satisfies the |x_i| < 1 precondition")
            } else {
                let worst = vals.into_iter().fold(f64::INFINITY, f64::min);
                let outcome = if worst > spec.tolerance { Outcome::Pass } else { Outcome::Fail };
                CheckResult::new(outcome, worst, spec.tolerance, spec).with_data("applicable", applicable as f64)
            }
        }
        SUP_NORM => {
            let vals = spec.map_samples(t, |x, _| -> Result<(f64, f64)> {
                let g = kernel.gradient(&x)?;
                Ok((g.iter().fold(0.0f64, |m, v| m.max(v.abs())), norm(&g)))
            });
            let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
            let sup = vals.iter().fold(0.0f64, |m, v| m.max(v.0));
            let two = vals.iter().fold(0.0f64, |m, v| m.max(v.1));
            let two_bound = spec.tolerance * (t as f64).sqrt();
            let outcome = if sup <= spec.tolerance && two <= two_bound { Outcome::Pass } else { Outcome::Fail };
            CheckResult::new(outcome, sup, spec.tolerance, spec)
                .with_data("max_l2", two)
                .with_data("l2_bound", two_bound)
        }
        TRUNCATION => {
            let vals = spec.map_samples(t, |mut x, rng| -> Result<(f64, u64)> {
                // Tail x_s..x_T inside the ball of radius 1/2; x_{s+1..T} are then irrelevant.
                let s = rng.gen_range(1..=t);
                let dir = random_unit(rng, t - s + 1);
                let r = 0.5 * rng.gen::<f64>();
                for (xi, di) in x[s - 1..].iter_mut().zip(&dir) {
                    *xi = r * di;
                }
                let mut cut = x.clone();
                for v in cut[s..].iter_mut() {
                    *v = 0.0;
                }
                let a = kernel.derivs(&x, KERNEL_CHECK_ORDER)?;
                let b = kernel.derivs(&cut, KERNEL_CHECK_ORDER)?;
                Ok(bundle_diff(&a, &b))
            });
            let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
            let worst = vals.iter().fold(0.0f64, |m, v| m.max(v.0));
            let mismatched: u64 = vals.iter().map(|v| v.1).sum();
            let outcome = if mismatched == 0 && worst < spec.tolerance { Outcome::Pass } else { Outcome::Fail };
            CheckResult::new(outcome, worst, spec.tolerance, spec).with_data("mismatched_entries", mismatched as f64)
        }
        FINITE_DIFFERENCE => {
            let vals = spec.map_samples(t, |x, rng| fd_error(kernel, &x, &random_unit(rng, t)));
            let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
            let mut worst = [0.0f64; 3];
            for v in &vals {
                for k in 0..3 {
                    worst[k] = worst[k].max(v[k]);
                }
            }
            let stat = worst.iter().copied().fold(0.0, f64::max);
            let outcome = if stat <= spec.tolerance { Outcome::Pass } else { Outcome::Fail };
            CheckResult::new(outcome, stat, spec.tolerance, spec)
                .with_data("order1", worst[0])
                .with_data("order2", worst[1])
                .with_data("order3", worst[2])
                .with_data("step", FD_STEP)
        }
        THETA_SANDWICH => {
            let vals = spec.map_samples(t, |x, _| {
                let (p4, p2) = (prog(&x, 0.25), prog(&x, 0.5));
                (1..=t).fold(f64::NEG_INFINITY, |m, i| {
                    let th = kernel.theta(i, &x, 1.0);
                    let lo = if i > p4 { 1.0 } else { 0.0 };
                    let hi = if i > p2 { 1.0 } else { 0.0 };
                    m.max(lo - th).max(th - hi)
                })
            });
            let worst = vals.into_iter().fold(f64::NEG_INFINITY, f64::max);
            let outcome = if worst < spec.tolerance { Outcome::Pass } else { Outcome::Fail };
            CheckResult::new(outcome, worst, spec.tolerance, spec)
        }
        VALUE_GAP => {
            let f0 = kernel.value(&vec![0.0; t])?;
            let vals = spec.map_samples(t, |x, _| kernel.value(&x));
            let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
            let worst = vals.into_iter().fold(f64::NEG_INFINITY, |m, v| m.max(f0 - v));
            let outcome = if worst <= spec.tolerance { Outcome::Pass } else { Outcome::Fail };
            CheckResult::new(outcome, worst, spec.tolerance, spec).with_data("f0", f0)
        }
        other => return Err(bad(other)),
    })
}

/// Largest absolute entry difference and number of entries whose bits differ.
fn bundle_diff(a: &KernelDerivs<f64>, b: &KernelDerivs<f64>) -> (f64, u64) {
    let mut worst = 0.0f64;
    let mut count = 0u64;
    let mut cmp = |x: f64, y: f64| {
        if x.to_bits() != y.to_bits() {
            count += 1;
            worst = worst.max((x - y).abs());
        }
    };
    cmp(a.value, b.value);
    for (x, y) in a.grad.iter().zip(&b.grad) {
        cmp(*x, *y);
    }
    if let (Some(ha), Some(hb)) = (&a.hess, &b.hess) {
        for (x, y) in ha.diag.iter().zip(&hb.diag).chain(ha.off.iter().zip(&hb.off)) {
            cmp(*x, *y);
        }
    }
    for (ta, tb) in a.higher.iter().zip(&b.higher) {
        let keys: BTreeSet<&Vec<usize>> = ta.entries.keys().chain(tb.entries.keys()).collect();
        for k in keys {
            cmp(ta.get(k), tb.get(k));
        }
    }
    (if count > 0 && worst == 0.0 { f64::MIN_POSITIVE } else { worst }, count)
}

fn stencil(f: impl Fn(f64) -> Result<Vec<f64>>, h: f64) -> Result<Vec<f64>> {
    let (m2, m1, p1, p2) = (f(-2.0 * h)?, f(-h)?, f(h)?, f(2.0 * h)?);
    Ok((0..m1.len()).map(|i| (m2[i] - 8.0 * m1[i] + 8.0 * p1[i] - p2[i]) / (12.0 * h)).collect())
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt() / norm(a).max(1.0)
}

/// Dense T[v] for an order-3 symmetric tensor, row-major.
fn contract3(tensor: &SparseSymTensor<f64>, v: &[f64]) -> Vec<f64> {
    let t = v.len();
    let mut out = vec![0.0; t * t];
    for (key, &val) in &tensor.entries {
        let (a, b, c) = (key[0], key[1], key[2]);
        let perms: BTreeSet<[usize; 3]> =
            [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]].into_iter().collect();
        for [i, j, k] in perms {
            out[i * t + j] += val * v[k];
        }
    }
    out
}

/// Relative errors of the gradient, Hessian·v and T[v] against 5-point central differences.
fn fd_error(kernel: &Kernel<f64>, x: &[f64], v: &[f64]) -> Result<[f64; 3]> {
    let t = x.len();
    let d = kernel.derivs(x, 3)?;
    let shifted = |s: f64, dir: &[f64]| -> Vec<f64> { x.iter().zip(dir).map(|(a, b)| a + s * b).collect() };
    let mut fd_grad = vec![0.0; t];
    let mut e = vec![0.0; t];
    for i in 0..t {
        e[i] = 1.0;
        fd_grad[i] = stencil(|s| Ok(vec![kernel.value(&shifted(s, &e))?]), FD_STEP)?[0];
        e[i] = 0.0;
    }
    let hess = d.hess.as_ref().expect("order 3 bundle has a Hessian");
    let fd_hv = stencil(|s| kernel.gradient(&shifted(s, v)), FD_STEP)?;
    let fd_tv = stencil(
        |s| Ok(kernel.derivs(&shifted(s, v), 2)?.hess.expect("order 2").to_dense().concat()),
        FD_STEP,
    )?;
    Ok([
        rel_err(&d.grad, &fd_grad),
        rel_err(&hess.mat_vec(v), &fd_hv),
        rel_err(&contract3(&d.higher[0], v), &fd_tv),
    ])
}

/// Lower estimate of the Lipschitz constant of D^k f̄_T from sampled pairs.
/// Operator norm for k ≤ 2 (power iteration for k = 2), Frobenius norm with
/// multiplicities above. Sample i is fixed by `(seed, i)`, so more samples never lower it.
pub fn estimate_lipschitz(k: usize, t: usize, samples: usize, seed: u64) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter("order k must be at least 1".into()));
    }
    let kernel = Kernel::<f64>::new(KernelParams::new(t, k.max(2))?);
    let ratios: Vec<Result<f64>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = keyed_rng(seed, "lipschitz", i as u64);
            let x: Vec<f64> = (0..t).map(|_| rng.gen_range(-2.0..=2.0)).collect();
            let r = 10f64.powf(rng.gen_range(-4.0..=0.0));
            let dir = random_unit(&mut rng, t);
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + r * b).collect();
            let dist = dist2(&x, &y).sqrt();
            let (a, b) = (kernel.derivs(&x, k)?, kernel.derivs(&y, k)?);
            let num = match k {
                1 => dist2(&a.grad, &b.grad).sqrt(),
                2 => {
                    let diff = a.hess.as_ref().unwrap().sub(b.hess.as_ref().unwrap());
                    let mut v = vec![1.0 / (t as f64).sqrt(); t];
                    let mut est = 0.0;
                    for _ in 0..200 {
                        let w = diff.mat_vec(&v);
                        est = norm(&w);
                        if est == 0.0 {
                            break;
                        }
                        v = w.into_iter().map(|c| c / est).collect();
                    }
                    est
                }
                _ => a.higher[k - 3].sub(&b.higher[k - 3]).frobenius(),
            };
            Ok(num / dist)
        })
        .collect();
    let mut best = 0.0f64;
    for r in ratios {
        best = best.max(r?);
    }
    Ok(best)
}

/// Gradient-Lipschitz certification: 1 ≤ ℓ̂₁ ≤ 152 and ℓ̂₂ ≤ 32·ℓ̂₁² (the growth law with c = log ℓ̂₁).
pub fn certify_lipschitz(t: usize, samples: usize, seed: u64) -> Result<VerificationReport> {
    let config = serde_json::json!({ "t": t, "samples": samples, "seed": seed });
    let mut report = VerificationReport::new("lipschitz", config, Vec::new());
    let spec = CheckSpec::new("lipschitz", samples, 1.0, seed, Sampler::Box { lo: -2.0, hi: 2.0 });
    let l1 = estimate_lipschitz(1, t, samples, seed)?;
    let l2 = estimate_lipschitz(2, t, samples, seed)?;
    let ok1 = (1.0..=ELL_1).contains(&l1);
    report.checks.insert(
        "order-1".into(),
        CheckResult::new(if ok1 { Outcome::Pass } else { Outcome::Fail }, l1, ELL_1, &spec),
    );
    let ceiling = 32.0 * l1 * l1;
    report.checks.insert(
        "order-2".into(),
        CheckResult::new(if l2 <= ceiling { Outcome::Pass } else { Outcome::Fail }, l2, ceiling, &spec)
            .with_note("ceiling exp(2.5·2·log 2 + 2c) with c = log of the order-1 estimate"),
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticSuite {
    /// Points for the exact mean and variance checks.
    pub points: usize,
    /// Close pairs for the mean-squared smoothness ratio.
    pub pairs: usize,
    /// Queries for the Bernoulli progress-discipline check.
    pub progress_queries: usize,
    pub seed: u64,
    pub keying: MssKeying,
}

impl Default for StochasticSuite {
    fn default() -> Self {
        Self { points: 200, pairs: 1000, progress_queries: 100_000, seed: 0, keying: MssKeying::default() }
    }
}

pub mod stochastic_checks {
    pub const EXACT_MEAN: &str = "exact-mean";
    pub const EXACT_VARIANCE: &str = "exact-variance";
    pub const PROGRESS: &str = "progress-discipline";
    pub const MSS_RATIO: &str = "mss-ratio";
}

/// Kernel coordinates with a random progress level: |y_i| ∈ [0.3, 1.5] up to a random
/// index, then |y_i| < 0.6, so every prog/Θ regime is visited.
fn chain_point(rng: &mut impl Rng, t: usize) -> Vec<f64> {
    let head = rng.gen_range(0..=t);
    (0..t)
        .map(|i| {
            let mag = if i < head { rng.gen_range(0.3..=1.5) } else { rng.gen_range(0.0..0.6) };
            if rng.gen::<bool>() { mag } else { -mag }
        })
        .collect()
}

fn ambient(inst: &Instance<f64>, y: &[f64]) -> Vec<f64> {
    let scaled: Vec<f64> = y.iter().map(|v| v * inst.beta()).collect();
    inst.embedding.lift(&scaled)
}

/// Exact-mean, exact-variance, progress-discipline (Bernoulli) and mean-squared smoothness (mss) checks.
pub fn certify_stochastic(inst: &Instance<f64>, kind: OracleKind, suite: &StochasticSuite) -> Result<VerificationReport> {
    use stochastic_checks::*;
    kind.validate()?;
    let t = inst.t();
    let (a, b) = (inst.alpha(), inst.beta());
    let config = serde_json::json!({ "oracle": kind, "suite": suite, "t": t, "d": inst.d() });
    let mut report = VerificationReport::new("stochastic", config, inst.params.taint.clone());
    let spec = |id: &str, n: usize| CheckSpec::new(id, n, 1.0, suite.seed, Sampler::Box { lo: -1.5, hi: 1.5 });

    // Each point gets its own ledger shard; shards are summed in index order.
    let moments: Vec<Result<(f64, f64, u64)>> = (0..suite.points)
        .into_par_iter()
        .map(|i| {
            let mut rng = keyed_rng(suite.seed, EXACT_MEAN, i as u64);
            let x = ambient(inst, &chain_point(&mut rng, t));
            let mut oracle = Oracle::new(inst, kind, suite.seed)?.with_keying(suite.keying).without_trace();
            let (mean, var) = oracle.exact_moments(&x)?;
            let truth = inst.tilde_grad(&x)?;
            let err = mean.iter().zip(&truth).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            Ok((err, var, oracle.ledger.total()))
        })
        .collect();
    let moments = moments.into_iter().collect::<Result<Vec<_>>>()?;
    let mean_err = moments.iter().fold(0.0f64, |m, v| m.max(v.0));
    let max_var = moments.iter().fold(0.0f64, |m, v| m.max(v.1));
    let queries: u64 = moments.iter().map(|v| v.2).sum();
    let mean_tol = 1e-10;
    report.checks.insert(
        EXACT_MEAN.into(),
        CheckResult::new(if mean_err <= mean_tol { Outcome::Pass } else { Outcome::Fail }, mean_err, mean_tol, &spec(EXACT_MEAN, suite.points))
            .with_data("queries", queries as f64),
    );
    let var_bound = match kind {
        OracleKind::DetOrder { .. } => 0.0,
        OracleKind::Bernoulli { prob } => (GRAD_SUP_BOUND * a / b).powi(2) * (1.0 - prob) / prob,
        OracleKind::MeanHiding { columns } | OracleKind::SmoothedMss { columns } => {
            4.0 * columns as f64 * (GAMMA * a / b).powi(2)
        }
    };
    report.checks.insert(
        EXACT_VARIANCE.into(),
        CheckResult::new(if max_var <= var_bound { Outcome::Pass } else { Outcome::Fail }, max_var, var_bound, &spec(EXACT_VARIANCE, suite.points)),
    );

    if let OracleKind::Bernoulli { prob } = kind {
        report.checks.insert(PROGRESS.into(), progress_check(inst, prob, suite, &spec(PROGRESS, suite.progress_queries))?);
    }

    if let OracleKind::SmoothedMss { columns } = kind {
        let ratios: Vec<Result<(f64, bool)>> = (0..suite.pairs)
            .into_par_iter()
            .map(|i| {
                let mut rng = keyed_rng(suite.seed, MSS_RATIO, i as u64);
                let y = chain_point(&mut rng, t);
                let r = 10f64.powf(rng.gen_range(-4.0..=-1.0));
                let dir = random_unit(&mut rng, t);
                let y2: Vec<f64> = y.iter().zip(&dir).map(|(p, q)| p + r * q).collect();
                let (x, x2) = (ambient(inst, &y), ambient(inst, &y2));
                let mut oracle = Oracle::new(inst, kind, suite.seed)?.with_keying(suite.keying).without_trace();
                let (gx, gy) = (oracle.all_responses(&x)?, oracle.all_responses(&x2)?);
                let msq = gx.iter().zip(&gy).map(|(p, q)| dist2(p, q)).sum::<f64>() / gx.len() as f64;
                let crossed = prog(&y, 0.25) != prog(&y2, 0.25) || prog(&y, 0.5) != prog(&y2, 0.5);
                Ok((msq / dist2(&x, &x2), crossed))
            })
            .collect();
        let ratios = ratios.into_iter().collect::<Result<Vec<_>>>()?;
        let worst = ratios.iter().fold(0.0f64, |m, v| m.max(v.0));
        let crossings = ratios.iter().filter(|v| v.1).count();
        let bound = ELL_HAT * ELL_HAT * columns as f64 * a * a / (b * b);
        let keying = match suite.keying {
            MssKeying::HalfThreshold => "half-threshold",
            MssKeying::QuarterThreshold => "quarter-threshold",
        };
        report.checks.insert(
            MSS_RATIO.into(),
            CheckResult::new(if worst <= bound { Outcome::Pass } else { Outcome::Fail }, worst, bound, &spec(MSS_RATIO, suite.pairs))
                .with_data("pairs_crossing_a_prog_level", crossings as f64)
                .with_note(format!("column subspace keying: {keying}")),
        );
    }
    Ok(report)
}

/// At points with prog_{β/4} = t and |y_t| > 1/2, the fraction of Bernoulli responses
/// carrying component t+1 must be within 3σ of p, and no response may carry a later one.
fn progress_check(inst: &Instance<f64>, prob: f64, suite: &StochasticSuite, spec: &CheckSpec) -> Result<CheckResult> {
    let t = inst.t();
    let mut oracle = Oracle::new(inst, OracleKind::Bernoulli { prob }, suite.seed)?.without_trace();
    let n = suite.progress_queries;
    let npoints = 64.min(n.max(1));
    let points: Vec<(usize, Vec<f64>)> = (0..npoints)
        .map(|i| {
            let mut rng = keyed_rng(suite.seed, "progress-points", i as u64);
            let level = rng.gen_range(0..t);
            let y: Vec<f64> = (0..t)
                .map(|k| {
                    let mag = if k < level { rng.gen_range(0.6..=2.0) } else { rng.gen_range(0.0..0.24) };
                    if rng.gen::<bool>() { mag } else { -mag }
                })
                .collect();
            (level, ambient(inst, &y))
        })
        .collect();
    let scale = inst.beta() / inst.alpha();
    let mut hits = 0u64;
    let mut beyond = 0u64;
    for q in 0..n {
        let (level, x) = &points[q % npoints];
        let g = oracle.bernoulli_query(x)?;
        let c: Vec<f64> = inst.embedding.project(&g).into_iter().map(|v| v * scale).collect();
        let floor = 1e-9 * norm(&c).max(1e-300);
        if c[*level].abs() > floor {
            hits += 1;
        }
        if c[level + 1..].iter().any(|v| v.abs() > floor) {
            beyond += 1;
        }
    }
    let freq = hits as f64 / n as f64;
    let sigma = (prob * (1.0 - prob) / n as f64).sqrt();
    let ok = (freq - prob).abs() <= 3.0 * sigma && beyond == 0;
    Ok(CheckResult::new(if ok { Outcome::Pass } else { Outcome::Fail }, freq, prob, spec)
        .with_data("three_sigma", 3.0 * sigma)
        .with_data("beyond_next", beyond as f64)
        .with_data("queries", oracle.ledger.total() as f64))
}

/// Wilson score interval for `k` events in `n` trials.
pub fn wilson(k: u64, n: u64, z: f64) -> (f64, f64) {
    let (k, n) = (k as f64, n as f64);
    let z2 = z * z;
    let center = (k + z2 / 2.0) / (n + z2);
    let half = z / (n + z2) * (k * (n - k) / n + z2 / 4.0).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Pass iff the upper limit is within the bound; inconclusive if the bound lies inside the interval.
pub fn wilson_verdict(k: u64, n: u64, bound: f64) -> (Outcome, f64, f64) {
    let (lo, hi) = wilson(k, n, WILSON_Z99);
    let outcome = if hi <= bound {
        Outcome::Pass
    } else if lo <= bound {
        Outcome::Inconclusive
    } else {
        Outcome::Fail
    };
    (outcome, lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSuite {
    pub sphere_dims: Vec<usize>,
    pub sphere_levels: Vec<f64>,
    pub sphere_trials: usize,
    pub t: usize,
    /// Ambient dimension for the chain checks; defaults to ⌈200 T ln T⌉.
    pub d: Option<usize>,
    /// Split index t: columns t..T are random.
    pub split: usize,
    pub trials: usize,
    pub order: usize,
    pub seed: u64,
}

impl Default for ConcentrationSuite {
    fn default() -> Self {
        Self {
            sphere_dims: vec![32, 64, 128],
            sphere_levels: vec![0.1, 0.2, 0.4],
            sphere_trials: 1_000_000,
            t: 6,
            d: None,
            split: 1,
            trials: 10_000,
            order: 2,
            seed: 0,
        }
    }
}

pub fn chain_dim_floor(t: usize) -> usize {
    (200.0 * t as f64 * (t as f64).ln()).ceil() as usize
}

pub mod concentration_checks {
    pub const DISAGREEMENT: &str = "zero-chain-disagreement";
    pub const CANNOT_GUESS: &str = "cannot-guess";
}

/// Monte Carlo frequencies of the sphere tail, derivative-bundle disagreement and
/// lucky-guess events, each judged against its bound with 99% Wilson intervals.
pub fn certify_concentration(suite: &ConcentrationSuite) -> Result<VerificationReport> {
    use concentration_checks::*;
    if suite.trials < 1000 || suite.sphere_trials < 1000 {
        return Err(Error::InvalidParameter("concentration checks need at least 10³ trials".into()));
    }
    if suite.t == 0 || suite.split == 0 || suite.split > suite.t {
        return Err(Error::InvalidParameter("need 1 ≤ split ≤ T".into()));
    }
    let config = serde_json::to_value(suite)?;
    let mut report = VerificationReport::new("concentration", config, Vec::new());

    for &d in &suite.sphere_dims {
        let mut rng = keyed_rng(suite.seed, "sphere-x", d as u64);
        let x = random_unit(&mut rng, d);
        let overlaps: Vec<f64> = (0..suite.sphere_trials)
            .into_par_iter()
            .map(|i| dot(&x, &random_unit(&mut keyed_rng(suite.seed, "sphere", ((d as u64) << 40) | i as u64), d)).abs())
            .collect();
        for &c in &suite.sphere_levels {
            let k = overlaps.iter().filter(|&&v| v >= c).count() as u64;
            let bound = 2.0 * (-(d as f64) * c * c / 2.0).exp();
            let id = format!("sphere-tail/d={d}/c={c}");
            let spec = CheckSpec::new(&id, suite.sphere_trials, bound.max(f64::MIN_POSITIVE), suite.seed, Sampler::Box { lo: -1.0, hi: 1.0 });
            report.checks.insert(id, freq_result(k, suite.sphere_trials, bound, &spec));
        }
    }

    let t = suite.t;
    let floor = chain_dim_floor(t);
    let d = suite.d.unwrap_or(floor);
    let bound = 1.0 / (144.0 * (t as f64).powi(4));
    let spec = |id: &str| CheckSpec::new(id, suite.trials, bound, suite.seed, Sampler::Box { lo: -1.0, hi: 1.0 });
    if d < floor || d < t {
        for id in [DISAGREEMENT, CANNOT_GUESS] {
            report.checks.insert(
                id.into(),
                CheckResult::new(Outcome::Skipped, f64::NAN, bound, &spec(id))
                    .with_note(format!("d = {d} is below the floor {floor}; the bound is not claimed there")),
            );
        }
        return Ok(report);
    }
    let kernel = Kernel::<f64>::new(KernelParams::new(t, suite.order.max(1))?);
    let radius = 2.0 * (t as f64).sqrt();

    // Disagreement between f̃_{T;U} and the split-chain f̃_{t;U_t} at one fixed x.
    let s = suite.split;
    let mut rng = keyed_rng(suite.seed, "disagreement-setup", 0);
    let x: Vec<f64> = random_unit(&mut rng, d).into_iter().map(|v| v * (t as f64).sqrt()).collect();
    let prefix = complete_haar::<f64>(&[], d, s - 1, &mut rng)?;
    let events: Vec<Result<bool>> = (0..suite.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = keyed_rng(suite.seed, DISAGREEMENT, i as u64);
            let rest = complete_haar(&prefix, d, t - s + 1, &mut rng)?;
            let cols: Vec<&[f64]> = prefix.chunks(d).chain(rest.chunks(d)).collect();
            let y: Vec<f64> = cols.iter().map(|u| dot(u, &x)).collect();
            let mut cut = y.clone();
            for v in cut[s..].iter_mut() {
                *v = 0.0;
            }
            let full = kernel.derivs(&y, suite.order)?;
            let split = kernel.derivs(&cut, suite.order)?;
            Ok(split_disagrees(&full, &split, s))
        })
        .collect();
    let k = events.into_iter().collect::<Result<Vec<_>>>()?.into_iter().filter(|&e| e).count() as u64;
    report.checks.insert(DISAGREEMENT.into(), freq_result(k, suite.trials, bound, &spec(DISAGREEMENT)).with_data("d", d as f64));

    // ∥∇f̃(x)∥ ≤ α/β with only the last column random.
    let mut rng = keyed_rng(suite.seed, "cannot-guess-setup", 0);
    let x: Vec<f64> = random_unit(&mut rng, d).into_iter().map(|v| v * radius * 0.999).collect();
    let prefix = complete_haar::<f64>(&[], d, t - 1, &mut rng)?;
    let head: Vec<f64> = prefix.chunks(d).map(|u| dot(u, &x)).collect();
    let events: Vec<Result<bool>> = (0..suite.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = keyed_rng(suite.seed, CANNOT_GUESS, i as u64);
            let last = complete_haar(&prefix, d, 1, &mut rng)?;
            let mut y = head.clone();
            y.push(dot(&last, &x));
            Ok(norm(&kernel.gradient(&y)?) <= 1.0)
        })
        .collect();
    let k = events.into_iter().collect::<Result<Vec<_>>>()?.into_iter().filter(|&e| e).count() as u64;
    report.checks.insert(CANNOT_GUESS.into(), freq_result(k, suite.trials, bound, &spec(CANNOT_GUESS)).with_data("d", d as f64));
    Ok(report)
}

fn freq_result(k: u64, n: usize, bound: f64, spec: &CheckSpec) -> CheckResult {
    let (outcome, lo, hi) = wilson_verdict(k, n as u64, bound);
    CheckResult::new(outcome, k as f64 / n as f64, bound, spec)
        .with_data("events", k as f64)
        .with_data("wilson_lo", lo)
        .with_data("wilson_hi", hi)
}

/// f̃_{t;U_t} depends on the first `s` kernel coordinates only, so the bundles agree iff
/// every entry touching an index ≥ s vanishes for the full chain and the rest match bitwise.
fn split_disagrees(full: &KernelDerivs<f64>, split: &KernelDerivs<f64>, s: usize) -> bool {
    if full.value.to_bits() != split.value.to_bits() {
        return true;
    }
    let same = |a: f64, b: f64, inside: bool| if inside { a.to_bits() == b.to_bits() } else { a == 0.0 };
    for (i, (&a, &b)) in full.grad.iter().zip(&split.grad).enumerate() {
        if !same(a, b, i < s) {
            return true;
        }
    }
    if let (Some(ha), Some(hb)) = (&full.hess, &split.hess) {
        for i in 0..ha.diag.len() {
            if !same(ha.diag[i], hb.diag[i], i < s) {
                return true;
            }
        }
        for i in 0..ha.off.len() {
            if !same(ha.off[i], hb.off[i], i + 1 < s) {
                return true;
            }
        }
    }
    for (ta, tb) in full.higher.iter().zip(&split.higher) {
        for (key, &a) in &ta.entries {
            let inside = key.iter().all(|&i| i < s);
            if !same(a, tb.get(key), inside) {
                return true;
            }
        }
        for (key, &b) in &tb.entries {
            if key.iter().all(|&i| i < s) && ta.get(key).to_bits() != b.to_bits() {
                return true;
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_examples() {
        let (lo, hi) = wilson(0, 10_000, WILSON_Z99);
        assert!(lo < 1e-15);
        // z²/(n + z²)
        assert!((hi - 6.630498e-4).abs() < 1e-9);
        assert_eq!(wilson_verdict(0, 10_000, 1.0).0, Outcome::Pass);
        assert_eq!(wilson_verdict(0, 10_000, 1e-6).0, Outcome::Inconclusive);
        assert_eq!(wilson_verdict(9_000, 10_000, 0.5).0, Outcome::Fail);
    }

    #[test]
    fn all_ones_skips_the_floor() {
        let spec = CheckSpec::new(
            kernel_checks::GRADIENT_FLOOR,
            4,
            1.0,
            0,
            Sampler::Points { points: vec![vec![1.0; 5]] },
        );
        let r = certify_kernel(5, &[spec], Mutation::default()).unwrap();
        assert_eq!(r.checks[kernel_checks::GRADIENT_FLOOR].outcome, Outcome::Skipped);
    }

    #[test]
    fn contract3_matches_symmetric_definition() {
        let mut tensor = SparseSymTensor::new(3);
        tensor.insert_nonzero(vec![0, 0, 1], 2.0);
        let m = contract3(&tensor, &[1.0, 10.0]);
        // T_{001} = T_{010} = T_{100} = 2.
        assert_eq!(m, vec![20.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn junit_counts() {
        let spec = CheckSpec::new("x", 1, 1.0, 0, Sampler::Box { lo: 0.0, hi: 1.0 });
        let mut r = VerificationReport::new("s", serde_json::Value::Null, vec![]);
        r.checks.insert("a".into(), CheckResult::new(Outcome::Fail, 2.0, 1.0, &spec));
        r.checks.insert("b<".into(), CheckResult::new(Outcome::Pass, 0.0, 1.0, &spec));
        let xml = r.to_junit();
        assert!(xml.contains("tests=\"2\" failures=\"1\""));
        assert!(xml.contains("name=\"b&lt;\""));
        assert_eq!(r.overall(), Outcome::Fail);
    }
}
