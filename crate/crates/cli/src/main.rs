mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hardchain_core::bench::{self, fit_scaling, to_csv, Predictor, SolverId, SolverSpec};
use hardchain_core::grover::speedup_demo;
use hardchain_core::instance::Instance;
use hardchain_core::kernel::{KernelDerivs, Mutation};
use hardchain_core::oracles::{MssKeying, Oracle, OracleKind};
use hardchain_core::params::{lower_bound_value, params_for, InstanceParams, ProblemConstants, Setting};
use hardchain_core::verify::{self, ConcentrationSuite, Outcome, StochasticSuite, VerificationReport};
use hardchain_core::Error;
use serde_json::{json, Value};

use output::{Provenance, Sink};

#[derive(Parser, Debug)]
#[command(name = "hardchain", version, about = "Hard-instance generator, oracle harness and certification suite")]
struct Cli {
    /// Master seed.
    #[arg(long, global = true, env = "HARDCHAIN_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads for parallel checks and sweeps (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Derive parameters and write an instance (JSON header plus U payload).
    Gen(GenArgs),
    /// Evaluate derivatives or oracle responses of a saved instance.
    Eval(EvalArgs),
    /// Run a certification suite.
    Verify(VerifyArgs),
    /// Run a solver or a scaling sweep; writes CSV.
    Bench(BenchArgs),
    /// Amplitude-amplification speedup demo.
    Grover(GroverArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum SettingArg {
    Det,
    Stochastic,
    Mss,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "det")]
    setting: SettingArg,
    /// Derivative order of the deterministic setting.
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long)]
    delta: f64,
    /// L_p (det), L (stochastic) or L̄ (mss).
    #[arg(long, visible_aliases = ["lipschitz", "lbar"])]
    lp: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long)]
    eps: f64,
    /// Kernel Lipschitz constant ℓ_p; required for p ≥ 2.
    #[arg(long)]
    ell: Option<f64>,
    #[arg(long, default_value_t = hardchain_core::params::DEFAULT_C0)]
    c0: f64,
    /// Column count 𝒯 of the stochastic mean-hiding oracle.
    #[arg(long)]
    columns: Option<usize>,
    /// Ambient dimension; defaults to the floor.
    #[arg(long)]
    d: Option<usize>,
    /// Accept d below the floor (taints every report).
    #[arg(long)]
    allow_below_floor: bool,
    /// Fail instead of clamping T or 𝒯 to 1.
    #[arg(long)]
    strict_rounding: bool,
    #[arg(long, default_value = "instance.json")]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum OracleArg {
    Det,
    Bernoulli,
    Meanhiding,
    Mss,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Evaluate at the origin.
    #[arg(long, conflicts_with = "x")]
    at_zero: bool,
    /// JSON file holding the point as an array of numbers.
    #[arg(long)]
    x: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    order: usize,
    #[arg(long, value_enum, default_value = "det")]
    oracle: OracleArg,
    /// Bernoulli probability.
    #[arg(long, default_value_t = 0.1)]
    prob: f64,
    /// Column count 𝒯; defaults to the instance's.
    #[arg(long)]
    columns: Option<usize>,
    /// Column index j of a mean-hiding or mss response.
    #[arg(long)]
    j: Option<usize>,
    /// Every column response plus their mean.
    #[arg(long)]
    all_j: bool,
    /// Number of stochastic draws.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// Also materialize the dense d×d Hessian (order ≥ 2).
    #[arg(long)]
    dense_hessian: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum SuiteArg {
    Kernel,
    Lipschitz,
    Stochastic,
    Concentration,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum KeyingArg {
    Half,
    Quarter,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    suite: SuiteArg,
    /// Chain length.
    #[arg(long = "T")]
    t: Option<usize>,
    /// Samples per kernel check, or per Lipschitz estimate.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Stochastic suite: saved instance; otherwise T = 8, 𝒯 = 16, d = 4T² is built.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    columns: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// Stochastic suite: oracle families to certify (default: bernoulli, meanhiding, mss).
    #[arg(long, value_enum, value_delimiter = ',')]
    oracle: Vec<OracleArg>,
    #[arg(long, default_value_t = 0.1)]
    prob: f64,
    #[arg(long, value_enum, default_value = "half")]
    keying: KeyingArg,
    /// Concentration suite: trials for the chain checks.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Concentration suite: trials per sphere dimension.
    #[arg(long, default_value_t = 1_000_000)]
    sphere_trials: usize,
    /// Kernel suite: apply a deliberate corruption (psi-flat, grad, theta).
    #[arg(long)]
    mutate: Option<String>,
    #[arg(long)]
    junit: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum SolverArg {
    Gd,
    Sgd,
    Chain,
    Random,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum)]
    solver: SolverArg,
    /// ε values; each runs on f̄_{T(ε)} with T(ε) from the deterministic p = 1 parameters.
    #[arg(long, value_delimiter = ',', conflicts_with = "sweep_t")]
    sweep_eps: Vec<f64>,
    /// Chain lengths to run on in kernel units.
    #[arg(long, value_delimiter = ',')]
    sweep_t: Vec<usize>,
    /// Saved instance for a single run; otherwise f̄_T in kernel units.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long = "T", default_value_t = 10)]
    t: usize,
    /// Gradient-norm target (single runs).
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = bench::SWEEP_DELTA)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    lipschitz: f64,
    /// Step for gd/sgd (default 1/ℓ₁), initial trial step for chain.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    exhaustive: bool,
    /// Oracle for sgd.
    #[arg(long, value_enum, default_value = "bernoulli")]
    oracle: OracleArg,
    #[arg(long, default_value_t = 0.1)]
    prob: f64,
    #[arg(long)]
    columns: Option<usize>,
    /// Query budget per unit of T.
    #[arg(long, default_value_t = 10_000)]
    budget_per_t: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GroverArgs {
    /// Bernoulli probability p, or 1/p when the value exceeds 1.
    #[arg(long)]
    p: f64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Infeasible(String),
    Checks(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Infeasible(_) | Error::DimensionFloor { .. } => Failure::Infeasible(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let argv = match config::expand(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(&argv);
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    let prov = Provenance::new(&argv, cli.seed);
    let result = match &cli.command {
        Command::Gen(a) => gen(a, &prov),
        Command::Eval(a) => eval(a, &prov),
        Command::Verify(a) => run_verify(a, &prov),
        Command::Bench(a) => run_bench(a, &prov),
        Command::Grover(a) => grover(a, &prov),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Infeasible(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn setting_of(a: &GenArgs) -> Setting {
    match a.setting {
        SettingArg::Det => Setting::Deterministic { p: a.p },
        SettingArg::Stochastic => Setting::Stochastic,
        SettingArg::Mss => Setting::StochasticMss,
    }
}

fn gen(a: &GenArgs, prov: &Provenance) -> CmdResult {
    let setting = setting_of(a);
    let mut c = ProblemConstants::new(a.delta, a.lp, a.sigma, a.eps);
    c.ell = a.ell;
    c.c0 = a.c0;
    c.columns = a.columns;
    c.strict_rounding = a.strict_rounding;
    let mut params = params_for(setting, c)?;
    if let Some(d) = a.d {
        params = params.with_dimension(d, a.allow_below_floor)?;
    }
    let inst = Instance::<f64>::generate(params, prov.seed)?;
    let prov = prov.with_taint(&inst.params.taint);
    let header = inst.save_with(&a.out, Some(prov.to_json()))?;
    let lb = lower_bound_value(setting, &c)?;
    let p = &inst.params;
    let mut table = String::new();
    let mut row = |k: &str, v: String| table += &format!("{k:<12} {v}\n");
    row("setting", setting.label().into());
    row("alpha", p.alpha.to_string());
    row("beta", p.beta.to_string());
    row("T", p.t.to_string());
    row("columns", p.columns.to_string());
    row("R", p.radius.to_string());
    row("R_hat", p.soft_radius.to_string());
    row("d", p.d.to_string());
    row("d_floor", p.d_floor.to_string());
    row("lower_bound", lb.to_string());
    row("payload", format!("{} sha256={}", header.payload, header.payload_sha256));
    if !p.taint.is_empty() {
        row("taint", p.taint.join(","));
    }
    output::stdout(&table)?;
    output::sidecar(Some(&a.out), prov.started)?;
    Ok(())
}

fn load(path: &PathBuf) -> Result<Instance<f64>, Failure> {
    Ok(Instance::<f64>::load(path)?)
}

fn read_point(a: &EvalArgs, d: usize) -> Result<Vec<f64>, Failure> {
    match (&a.x, a.at_zero) {
        (Some(path), _) => {
            let x: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| Failure::Usage(format!("malformed x in {}: {e}", path.display())))?;
            if x.len() != d {
                return Err(Failure::Usage(format!("malformed x: expected {d} entries, got {}", x.len())));
            }
            Ok(x)
        }
        (None, true) => Ok(vec![0.0; d]),
        (None, false) => Err(Failure::Usage("give --at-zero or --x FILE".into())),
    }
}

fn kernel_json(k: &KernelDerivs<f64>) -> Value {
    let higher: Vec<Value> = k
        .higher
        .iter()
        .map(|t| {
            let entries: Vec<Value> = t.entries.iter().map(|(idx, v)| json!([idx, v])).collect();
            json!({ "order": t.order, "entries": entries })
        })
        .collect();
    json!({
        "value": k.value,
        "grad": k.grad,
        "hess": k.hess.as_ref().map(|h| json!({ "diag": h.diag, "off": h.off })),
        "higher": higher,
    })
}

fn oracle_kind(arg: OracleArg, prob: f64, columns: usize, order: usize) -> OracleKind {
    match arg {
        OracleArg::Det => OracleKind::DetOrder { p: order },
        OracleArg::Bernoulli => OracleKind::Bernoulli { prob },
        OracleArg::Meanhiding => OracleKind::MeanHiding { columns },
        OracleArg::Mss => OracleKind::SmoothedMss { columns },
    }
}

fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

fn eval(a: &EvalArgs, prov: &Provenance) -> CmdResult {
    let inst = load(&a.instance)?;
    let x = read_point(a, inst.d())?;
    let prov = prov.with_taint(&inst.params.taint);
    let columns = a.columns.unwrap_or(inst.params.columns);
    let kind = oracle_kind(a.oracle, a.prob, columns, a.order);
    let mut oracle = Oracle::new(&inst, kind, prov.seed)?;
    let mut body = json!({ "instance": a.instance.display().to_string(), "oracle": kind });
    match a.oracle {
        OracleArg::Det => {
            let b = oracle.det_query(&x, a.order)?;
            body["order"] = json!(a.order);
            body["value"] = json!(b.value);
            body["grad"] = json!(b.grad);
            body["tensor_scales"] = json!((0..=a.order).map(|k| b.tensor_scale(k)).collect::<Vec<_>>());
            body["kernel"] = kernel_json(&b.kernel);
            body["coords"] = json!(b.coords);
            if a.dense_hessian {
                body["hessian"] = json!(b.hessian_dense(&inst.embedding));
            }
        }
        OracleArg::Bernoulli => {
            let draws = (0..a.samples).map(|_| oracle.bernoulli_query(&x)).collect::<Result<Vec<_>, _>>()?;
            body["samples"] = json!(draws);
            body["grad"] = json!(inst.tilde_grad(&x)?);
        }
        OracleArg::Meanhiding | OracleArg::Mss => {
            let rows = if a.all_j {
                oracle.all_responses(&x)?
            } else if let Some(j) = a.j {
                vec![oracle.sample(&x, Some(j))?]
            } else {
                (0..a.samples).map(|_| oracle.sample(&x, None)).collect::<Result<Vec<_>, _>>()?
            };
            let grad = inst.tilde_grad(&x)?;
            if a.all_j {
                let mean = mean_of(&rows);
                let err = mean.iter().zip(&grad).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
                body["mean"] = json!(mean);
                body["mean_max_abs_error"] = json!(err);
            }
            body["responses"] = json!(rows);
            body["grad"] = json!(grad);
        }
    }
    body["ledger"] = json!({ "queries": oracle.ledger.total(), "counts": oracle.ledger.counts, "trace": oracle.ledger.trace });
    Sink::new(a.out.as_deref()).json(&prov, body)?;
    Ok(())
}

fn parse_mutation(s: &str) -> Result<Mutation, Failure> {
    let mut m = Mutation::default();
    match s {
        "psi-flat" => m.psi_flat_offset = 1e-3,
        "grad" => m.grad_rel = 1e-3,
        "theta" => m.theta_offset = 0.01,
        _ => return Err(Failure::Usage(format!("unknown mutation {s} (psi-flat, grad, theta)"))),
    }
    Ok(m)
}

fn stochastic_instance(a: &VerifyArgs, seed: u64) -> Result<Instance<f64>, Failure> {
    if let Some(path) = &a.instance {
        return load(path);
    }
    let t = a.t.unwrap_or(8);
    let columns = a.columns.unwrap_or(16);
    let d = a.d.unwrap_or(4 * t * t);
    let p = InstanceParams::custom(Setting::StochasticMss, t, columns, 1.0, 1.0, 1.0)?.with_dimension(d, true)?;
    Ok(Instance::generate(p, seed)?)
}

fn run_verify(a: &VerifyArgs, prov: &Provenance) -> CmdResult {
    let seed = prov.seed;
    let report = match a.suite {
        SuiteArg::Kernel => {
            let t = a.t.unwrap_or(10);
            let mutation = a.mutate.as_deref().map(parse_mutation).transpose()?.unwrap_or_default();
            verify::certify_kernel(t, &verify::kernel_suite(t, a.samples, seed), mutation)?
        }
        SuiteArg::Lipschitz => verify::certify_lipschitz(a.t.unwrap_or(10), a.samples, seed)?,
        SuiteArg::Stochastic => {
            let inst = stochastic_instance(a, seed)?;
            let suite = StochasticSuite {
                seed,
                keying: match a.keying {
                    KeyingArg::Half => MssKeying::HalfThreshold,
                    KeyingArg::Quarter => MssKeying::QuarterThreshold,
                },
                ..StochasticSuite::default()
            };
            let oracles =
                if a.oracle.is_empty() { vec![OracleArg::Bernoulli, OracleArg::Meanhiding, OracleArg::Mss] } else { a.oracle.clone() };
            let config = json!({ "t": inst.t(), "d": inst.d(), "columns": inst.params.columns, "suite": suite });
            let mut report = VerificationReport::new("stochastic", config, inst.params.taint.clone());
            for o in oracles {
                let kind = oracle_kind(o, a.prob, inst.params.columns, 1);
                report.absorb(kind.label(), verify::certify_stochastic(&inst, kind, &suite)?);
            }
            report
        }
        SuiteArg::Concentration => {
            let suite = ConcentrationSuite {
                t: a.t.unwrap_or(6),
                d: a.d,
                trials: a.trials,
                sphere_trials: a.sphere_trials,
                seed,
                ..ConcentrationSuite::default()
            };
            verify::certify_concentration(&suite)?
        }
    };
    let prov = prov.with_taint(&report.taint);
    if let Some(path) = &a.junit {
        std::fs::write(path, report.to_junit())?;
    }
    let body = serde_json::to_value(&report)?;
    Sink::new(a.out.as_deref()).json(&prov, body)?;
    match report.overall() {
        Outcome::Fail => Err(Failure::Checks(format!("failed checks: {}", report.failed().join(", ")))),
        Outcome::Inconclusive => {
            let names: Vec<&str> =
                report.checks.iter().filter(|(_, c)| c.outcome == Outcome::Inconclusive).map(|(k, _)| k.as_str()).collect();
            eprintln!("warning: inconclusive checks: {}", names.join(", "));
            Ok(())
        }
        _ => Ok(()),
    }
}

fn solver_id(a: &BenchArgs) -> SolverId {
    let step = a.step.unwrap_or(1.0 / hardchain_core::kernel::ELL_1);
    match a.solver {
        SolverArg::Gd => SolverId::Gd { step },
        SolverArg::Sgd => SolverId::Sgd { step, batch: a.batch, exhaustive: a.exhaustive },
        SolverArg::Chain => SolverId::ChainFollower { initial_step: a.step.unwrap_or(0.5) },
        SolverArg::Random => SolverId::RandomSearch,
    }
}

fn run_bench(a: &BenchArgs, prov: &Provenance) -> CmdResult {
    let solver = solver_id(a);
    let seed = prov.seed;
    let (records, fit) = if !a.sweep_eps.is_empty() || !a.sweep_t.is_empty() {
        let kind = oracle_kind(a.oracle, a.prob, a.columns.unwrap_or(1), 1);
        let (recs, predictor) = if !a.sweep_eps.is_empty() {
            (bench::sweep_eps(solver, kind, &a.sweep_eps, a.delta, a.lipschitz, a.budget_per_t, seed)?, Predictor::Eps)
        } else {
            (bench::sweep_t(solver, kind, &a.sweep_t, a.budget_per_t, seed)?, Predictor::T)
        };
        let fit = if recs.len() >= 2 { Some(fit_scaling(&recs, predictor)?) } else { None };
        (recs, fit)
    } else {
        let inst = match &a.instance {
            Some(p) => load(p)?,
            None => Instance::<f64>::kernel_units(a.t, bench::SWEEP_KERNEL_EPS)?,
        };
        let eps = a.eps.unwrap_or(bench::SWEEP_KERNEL_EPS * inst.params.grad_threshold());
        let kind = oracle_kind(a.oracle, a.prob, a.columns.unwrap_or(inst.params.columns), 1);
        let spec = SolverSpec::new(solver, eps, a.budget_per_t * inst.t() as u64, seed);
        (vec![bench::run_solver(&inst, &spec, kind)?], None)
    };
    let mut taint: Vec<String> = Vec::new();
    for r in &records {
        for t in &r.taint {
            if !taint.contains(t) {
                taint.push(t.clone());
            }
        }
    }
    let prov = prov.with_taint(&taint);
    let csv = to_csv(&records, &prov.comment_lines(), fit.as_ref())?;
    Sink::new(a.out.as_deref()).text(&prov, &csv)?;
    Ok(())
}

fn grover(a: &GroverArgs, prov: &Provenance) -> CmdResult {
    let p = if a.p > 1.0 { 1.0 / a.p } else { a.p };
    let r = speedup_demo(p, a.trials, prov.seed)?;
    Sink::new(a.out.as_deref()).json(prov, serde_json::to_value(r)?)?;
    Ok(())
}
