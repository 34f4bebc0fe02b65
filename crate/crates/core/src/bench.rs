//! Reference solvers run through ledgered oracles, and log-log scaling fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::kernel::{prog, ELL_1};
use crate::oracles::{Oracle, OracleKind};
use crate::params::{params_for, ProblemConstants, Setting};
use crate::rng::{keyed_rng, random_unit};
use crate::scalar::{axpy, dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverId {
    Gd { step: f64 },
    /// `exhaustive` averages over the whole j-support instead of drawing `batch` samples.
    Sgd { step: f64, batch: usize, exhaustive: bool },
    /// `initial_step` is the first trial length along a newly revealed direction.
    ChainFollower { initial_step: f64 },
    RandomSearch,
}

impl SolverId {
    pub fn label(&self) -> &'static str {
        match self {
            SolverId::Gd { .. } => "gd",
            SolverId::Sgd { .. } => "sgd",
            SolverId::ChainFollower { .. } => "chain",
            SolverId::RandomSearch => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub solver: SolverId,
    /// Gradient-norm target in the instance's own units.
    pub eps: f64,
    pub budget: u64,
    /// Also stop once prog_{β/4} reaches this level.
    pub stop_at_prog: Option<usize>,
    pub seed: u64,
}

impl SolverSpec {
    pub fn new(solver: SolverId, eps: f64, budget: u64, seed: u64) -> Self {
        Self { solver, eps, budget, stop_at_prog: None, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let step_ok = match self.solver {
            SolverId::Gd { step } | SolverId::Sgd { step, .. } => step > 0.0,
            SolverId::ChainFollower { initial_step } => initial_step > 0.0,
            SolverId::RandomSearch => true,
        };
        if !step_ok || self.budget == 0 {
            return Err(Error::InvalidParameter("solver needs step > 0 and budget ≥ 1".into()));
        }
        if let SolverId::Sgd { batch: 0, exhaustive: false, .. } = self.solver {
            return Err(Error::InvalidParameter("SGD batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgEvent {
    pub query: u64,
    pub prog: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub solver: String,
    pub setting: String,
    pub p: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    pub eps: f64,
    pub queries: u64,
    pub grad_norm: f64,
    pub prog_final: usize,
    pub seed: u64,
    pub taint: Vec<String>,
    pub success: bool,
    /// prog_{β/4} of the iterate, logged whenever it changes.
    pub prog_trace: Vec<ProgEvent>,
    /// Queries spent on each single-level advance of prog_{β/4}.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub queries_per_advance: Vec<u64>,
    /// Chain index of each direction the chain follower revealed, in order (audit only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub revealed: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_eps: Option<f64>,
}

/// Ambient GD step 1/L with L = ℓ₁α/β².
pub fn default_gd_step(inst: &Instance<f64>) -> f64 {
    inst.beta() * inst.beta() / (ELL_1 * inst.alpha())
}

struct Tracker {
    trace: Vec<ProgEvent>,
    per_advance: Vec<u64>,
    last_advance: u64,
}

impl Tracker {
    fn new(start: usize) -> Self {
        Self { trace: vec![ProgEvent { query: 0, prog: start }], per_advance: Vec::new(), last_advance: 0 }
    }

    fn current(&self) -> usize {
        self.trace.last().map_or(0, |e| e.prog)
    }

    fn observe(&mut self, query: u64, prog: usize) {
        let cur = self.current();
        if prog == cur {
            return;
        }
        if prog > cur {
            self.per_advance.push(query - self.last_advance);
            self.per_advance.extend(std::iter::repeat(0).take(prog - cur - 1));
            self.last_advance = query;
        }
        self.trace.push(ProgEvent { query, prog });
    }
}

fn level(inst: &Instance<f64>, x: &[f64]) -> Result<usize> {
    Ok(prog(&inst.coords(x)?, 0.25))
}

fn record(inst: &Instance<f64>, spec: &SolverSpec, x: &[f64], queries: u64, success: bool, tr: Tracker) -> Result<BenchRecord> {
    Ok(BenchRecord {
        solver: spec.solver.label().into(),
        setting: inst.params.setting.label().into(),
        p: inst.params.setting.order(),
        t: inst.t(),
        d: inst.d(),
        eps: spec.eps,
        queries,
        grad_norm: norm(&inst.tilde_grad(x)?),
        prog_final: level(inst, x)?,
        seed: spec.seed,
        taint: inst.params.taint.clone(),
        success,
        prog_trace: tr.trace,
        queries_per_advance: tr.per_advance,
        revealed: Vec::new(),
        label_eps: None,
    })
}

fn reached(spec: &SolverSpec, tr: &Tracker) -> bool {
    spec.stop_at_prog.is_some_and(|p| tr.current() >= p)
}

/// x ← x − step·∇f̃(x) from the origin; stops when the queried gradient has norm ≤ ε.
pub fn run_gd(inst: &Instance<f64>, spec: &SolverSpec) -> Result<BenchRecord> {
    spec.validate()?;
    let SolverId::Gd { step } = spec.solver else {
        return Err(Error::InvalidParameter("run_gd needs a GD solver spec".into()));
    };
    let mut oracle = Oracle::new(inst, OracleKind::DetOrder { p: 1 }, spec.seed)?.without_trace();
    let mut x = vec![0.0; inst.d()];
    let mut tr = Tracker::new(0);
    let mut success = false;
    while oracle.ledger.total() < spec.budget && !reached(spec, &tr) {
        let g = oracle.det_query(&x, 1)?.grad;
        if norm(&g) <= spec.eps {
            success = true;
            break;
        }
        axpy(-step, &g, &mut x);
        tr.observe(oracle.ledger.total(), level(inst, &x)?);
    }
    let q = oracle.ledger.total();
    record(inst, spec, &x, q, success || reached(spec, &tr), tr)
}

/// SGD from the origin. The stopping test uses the true gradient and is not counted.
pub fn run_sgd(inst: &Instance<f64>, spec: &SolverSpec, kind: OracleKind) -> Result<BenchRecord> {
    spec.validate()?;
    let SolverId::Sgd { step, batch, exhaustive } = spec.solver else {
        return Err(Error::InvalidParameter("run_sgd needs an SGD solver spec".into()));
    };
    let mut oracle = Oracle::new(inst, kind, spec.seed)?.without_trace();
    let mut x = vec![0.0; inst.d()];
    let mut tr = Tracker::new(0);
    let mut success = false;
    while oracle.ledger.total() < spec.budget && !reached(spec, &tr) {
        if norm(&inst.tilde_grad(&x)?) <= spec.eps {
            success = true;
            break;
        }
        let samples = if exhaustive {
            match kind {
                OracleKind::MeanHiding { .. } | OracleKind::SmoothedMss { .. } => oracle.all_responses(&x)?,
                _ => vec![oracle.exact_moments(&x)?.0],
            }
        } else {
            let n = batch.min((spec.budget - oracle.ledger.total()) as usize).max(1);
            (0..n).map(|_| oracle.sample(&x, None)).collect::<Result<Vec<_>>>()?
        };
        let w = step / samples.len() as f64;
        for g in &samples {
            axpy(-w, g, &mut x);
        }
        tr.observe(oracle.ledger.total(), level(inst, &x)?);
    }
    let q = oracle.ledger.total();
    let success = success || reached(spec, &tr);
    record(inst, spec, &x, q, success, tr)
}

/// Zero-respecting coordinate search. Keeps an orthonormal basis of the span of all
/// observed gradients (Gram–Schmidt, so new directions appear one chain index at a time)
/// and takes 1-D trial steps along the basis direction with the largest gradient
/// component; a direction's step doubles on decrease and halves on rejection.
/// Every evaluation, accepted or rejected, is one counted query.
pub fn run_chain_follower(inst: &Instance<f64>, spec: &SolverSpec) -> Result<BenchRecord> {
    spec.validate()?;
    let SolverId::ChainFollower { initial_step } = spec.solver else {
        return Err(Error::InvalidParameter("run_chain_follower needs a chain-follower spec".into()));
    };
    let d = inst.d();
    let mut oracle = Oracle::new(inst, OracleKind::DetOrder { p: 1 }, spec.seed)?.without_trace();
    let mut x = vec![0.0; d];
    let mut tr = Tracker::new(0);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut steps: Vec<f64> = Vec::new();
    let mut success = false;
    let first = oracle.det_query(&x, 1)?;
    let (mut f, mut g) = (first.value, first.grad);
    loop {
        if norm(&g) <= spec.eps {
            success = true;
            break;
        }
        if oracle.ledger.total() >= spec.budget || reached(spec, &tr) {
            break;
        }
        let mut r = g.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &r);
                axpy(-c, b, &mut r);
            }
        }
        let rn = norm(&r);
        if rn > 1e-8 * norm(&g) && basis.len() < d {
            basis.push(r.into_iter().map(|v| v / rn).collect());
            steps.push(initial_step);
        }
        let comps: Vec<f64> = basis.iter().map(|b| dot(b, &g)).collect();
        let k = (0..comps.len())
            .max_by(|&a, &b| comps[a].abs().total_cmp(&comps[b].abs()))
            .expect("a nonzero gradient always leaves a basis direction");
        let sign = if comps[k] > 0.0 { -1.0 } else { 1.0 };
        let mut trial = x.clone();
        axpy(sign * steps[k], &basis[k], &mut trial);
        let q = oracle.det_query(&trial, 1)?;
        if q.value < f {
            x = trial;
            f = q.value;
            g = q.grad;
            steps[k] *= 2.0;
            tr.observe(oracle.ledger.total(), level(inst, &x)?);
        } else {
            steps[k] /= 2.0;
        }
    }
    let q = oracle.ledger.total();
    let success = success || reached(spec, &tr);
    let mut rec = record(inst, spec, &x, q, success, tr)?;
    rec.revealed = basis
        .iter()
        .map(|b| {
            let c = inst.embedding.project(b);
            (0..c.len()).max_by(|&a, &b| c[a].abs().total_cmp(&c[b].abs())).map_or(0, |i| i + 1)
        })
        .collect();
    Ok(rec)
}

/// Uniform guesses in B(0, 2β√T) until ∥∇f̃∥ ≤ ε or the budget runs out.
pub fn run_random_search(inst: &Instance<f64>, spec: &SolverSpec) -> Result<BenchRecord> {
    spec.validate()?;
    let d = inst.d();
    let radius = inst.params.radius;
    let mut oracle = Oracle::new(inst, OracleKind::DetOrder { p: 1 }, spec.seed)?.without_trace();
    let mut tr = Tracker::new(0);
    let mut x = vec![0.0; d];
    let mut success = false;
    while oracle.ledger.total() < spec.budget {
        let i = oracle.ledger.total();
        let mut rng = keyed_rng(spec.seed, "random-search", i);
        let r = radius * rand::Rng::gen::<f64>(&mut rng).powf(1.0 / d as f64);
        x = random_unit(&mut rng, d).into_iter().map(|v| v * r).collect();
        let g = oracle.det_query(&x, 1)?.grad;
        tr.observe(oracle.ledger.total(), level(inst, &x)?);
        if norm(&g) <= spec.eps {
            success = true;
            break;
        }
    }
    let q = oracle.ledger.total();
    record(inst, spec, &x, q, success, tr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    /// `None` when the response is constant.
    pub r2: Option<f64>,
    pub n: usize,
}

impl Fit {
    pub fn agrees(&self, exponent: f64, tol: f64) -> bool {
        (self.slope - exponent).abs() <= tol
    }
}

/// Least squares of log y on log x.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<Fit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::InvalidParameter("a scaling fit needs at least 3 (x, y) pairs".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if !(sxx > 1e-24 * (1.0 + mx * mx)) {
        return Err(Error::InvalidParameter("degenerate predictor range".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = ly.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = (syy > 0.0).then(|| {
        let ss_res: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        1.0 - ss_res / syy
    });
    Ok(Fit { slope, intercept, r2, n: xs.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    Eps,
    T,
}

/// Fits queries against ε (the record's `label_eps` when set) or T.
pub fn fit_scaling(records: &[BenchRecord], predictor: Predictor) -> Result<Fit> {
    let xs: Vec<f64> = records
        .iter()
        .map(|r| match predictor {
            Predictor::Eps => r.label_eps.unwrap_or(r.eps),
            Predictor::T => r.t as f64,
        })
        .collect();
    let ys: Vec<f64> = records.iter().map(|r| r.queries as f64).collect();
    fit_loglog(&xs, &ys)
}

pub const CSV_COLUMNS: [&str; 11] =
    ["solver", "setting", "p", "T", "d", "eps", "queries", "grad_norm", "prog_final", "seed", "taint"];

/// One row per record in [`CSV_COLUMNS`] order, `#` comment lines before and a fit line after.
pub fn to_csv(records: &[BenchRecord], comments: &[String], fit: Option<&Fit>) -> Result<String> {
    let mut out = String::new();
    for c in comments {
        out += &format!("# {c}\n");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.solver.clone(),
            r.setting.clone(),
            r.p.to_string(),
            r.t.to_string(),
            r.d.to_string(),
            r.label_eps.unwrap_or(r.eps).to_string(),
            r.queries.to_string(),
            r.grad_norm.to_string(),
            r.prog_final.to_string(),
            r.seed.to_string(),
            r.taint.join(";"),
        ])
        .map_err(csv_err)?;
    }
    out += &String::from_utf8(w.into_inner().map_err(|e| csv_err(e.into_error()))?).expect("csv output is UTF-8");
    if let Some(f) = fit {
        let r2 = f.r2.map_or("undefined".to_string(), |v| v.to_string());
        out += &format!("# fit: slope={} intercept={} r2={r2} n={}\n", f.slope, f.intercept, f.n);
    }
    Ok(out)
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidParameter(format!("csv: {e}"))
}

/// Chain length of the deterministic p = 1 instance for target ε.
pub fn det_chain_length(delta: f64, lipschitz: f64, eps: f64) -> Result<usize> {
    Ok(params_for(Setting::Deterministic { p: 1 }, ProblemConstants::new(delta, lipschitz, 1.0, eps))?.t)
}

/// Default Δ of the ε-sweep: T = 10 at ε = 0.4 for L = 1 (so T = 640 at ε = 0.05).
pub const SWEEP_DELTA: f64 = 2918.4;
/// Kernel-unit gradient target for sweeps; below the floor ∥∇f̄∥ > 1.
pub const SWEEP_KERNEL_EPS: f64 = 0.9;

/// Runs `spec.solver`; `kind` is the oracle SGD samples from and is ignored otherwise.
pub fn run_solver(inst: &Instance<f64>, spec: &SolverSpec, kind: OracleKind) -> Result<BenchRecord> {
    match spec.solver {
        SolverId::Gd { .. } => run_gd(inst, spec),
        SolverId::Sgd { .. } => run_sgd(inst, spec, kind),
        SolverId::ChainFollower { .. } => run_chain_follower(inst, spec),
        SolverId::RandomSearch => run_random_search(inst, spec),
    }
}

/// One kernel-unit run per T with target [`SWEEP_KERNEL_EPS`] and budget `budget_per_t`·T.
pub fn sweep_t(solver: SolverId, kind: OracleKind, ts: &[usize], budget_per_t: u64, seed: u64) -> Result<Vec<BenchRecord>> {
    use rayon::prelude::*;
    ts.par_iter()
        .map(|&t| {
            let inst = Instance::<f64>::kernel_units(t, SWEEP_KERNEL_EPS)?;
            let spec = SolverSpec::new(solver, SWEEP_KERNEL_EPS, budget_per_t * t as u64, seed);
            run_solver(&inst, &spec, kind)
        })
        .collect()
}

/// [`sweep_t`] over T(ε) from the deterministic p = 1 parameters; records carry ε as `label_eps`.
pub fn sweep_eps(
    solver: SolverId,
    kind: OracleKind,
    eps_list: &[f64],
    delta: f64,
    lipschitz: f64,
    budget_per_t: u64,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    let ts = eps_list.iter().map(|&e| det_chain_length(delta, lipschitz, e)).collect::<Result<Vec<_>>>()?;
    let mut recs = sweep_t(solver, kind, &ts, budget_per_t, seed)?;
    for (r, &e) in recs.iter_mut().zip(eps_list) {
        r.label_eps = Some(e);
    }
    Ok(recs)
}

/// Chain follower on f̄_{T(ε)} in kernel units.
pub fn sweep_eps_chain(eps_list: &[f64], delta: f64, lipschitz: f64, seed: u64) -> Result<Vec<BenchRecord>> {
    let solver = SolverId::ChainFollower { initial_step: 0.5 };
    sweep_eps(solver, OracleKind::DetOrder { p: 1 }, eps_list, delta, lipschitz, 1_000, seed)
}

/// GD with step 1/ℓ₁ on f̄_T in kernel units for each T.
pub fn sweep_t_gd(ts: &[usize], seed: u64) -> Result<Vec<BenchRecord>> {
    sweep_t(SolverId::Gd { step: 1.0 / ELL_1 }, OracleKind::DetOrder { p: 1 }, ts, 10_000, seed)
}

/// Bernoulli SGD on f̄_T with kernel step p, so every ξ = 1 draw pushes the next
/// coordinate past 1/2; returns the queries spent per prog advance over all runs.
pub fn bernoulli_cost(prob: f64, t: usize, runs: usize, seed: u64) -> Result<Vec<u64>> {
    use rayon::prelude::*;
    let inst = Instance::<f64>::kernel_units(t, SWEEP_KERNEL_EPS)?;
    let per_run: Vec<Result<Vec<u64>>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut spec = SolverSpec::new(
                SolverId::Sgd { step: prob, batch: 1, exhaustive: false },
                0.0,
                (200.0 * t as f64 / prob) as u64,
                seed.wrapping_add(r as u64),
            );
            spec.stop_at_prog = Some(t);
            let rec = run_sgd(&inst, &spec, OracleKind::Bernoulli { prob })?;
            if rec.prog_final < t {
                return Err(Error::InvalidParameter(format!("run {r} exhausted its budget at prog {}", rec.prog_final)));
            }
            Ok(rec.queries_per_advance)
        })
        .collect();
    Ok(per_run.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law_fit() {
        let xs = [0.4, 0.2, 0.1, 0.05];
        let ys: Vec<f64> = xs.iter().map(|e: &f64| 3.0 * e.powi(-2)).collect();
        let f = fit_loglog(&xs, &ys).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-9);
        assert!((f.r2.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_response_has_no_r2() {
        let f = fit_loglog(&[1.0, 2.0, 4.0], &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(f.slope, 0.0);
        assert!(f.r2.is_none());
        assert!(fit_loglog(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(fit_loglog(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tracker_splits_multi_level_jumps() {
        let mut tr = Tracker::new(0);
        tr.observe(3, 1);
        tr.observe(5, 3);
        tr.observe(6, 3);
        assert_eq!(tr.per_advance, vec![3, 2, 0]);
        assert_eq!(tr.trace.len(), 3);
    }

    #[test]
    fn sweep_lengths() {
        assert_eq!(det_chain_length(SWEEP_DELTA, 1.0, 0.4).unwrap(), 10);
        assert_eq!(det_chain_length(SWEEP_DELTA, 1.0, 0.05).unwrap(), 640);
    }
}
