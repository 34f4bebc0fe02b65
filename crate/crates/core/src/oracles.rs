//! Deterministic and stochastic first-order oracles with query accounting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haar::RotationEmbedding;
use crate::instance::{AmbientDerivs, Instance};
use crate::kernel::prog;
use crate::rng::{hash_f64s, keyed_rng};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleKind {
    DetOrder { p: usize },
    Bernoulli { prob: f64 },
    MeanHiding { columns: usize },
    SmoothedMss { columns: usize },
}

impl OracleKind {
    pub fn label(&self) -> &'static str {
        match self {
            OracleKind::DetOrder { .. } => "det",
            OracleKind::Bernoulli { .. } => "bernoulli",
            OracleKind::MeanHiding { .. } => "meanhiding",
            OracleKind::SmoothedMss { .. } => "mss",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OracleKind::Bernoulli { prob } if !(prob > 0.0 && prob <= 1.0) => {
                Err(Error::InvalidParameter(format!("Bernoulli probability must lie in (0, 1], got {prob}")))
            }
            OracleKind::MeanHiding { columns: 0 } | OracleKind::SmoothedMss { columns: 0 } => {
                Err(Error::InvalidParameter("column count 𝒯 must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Which prog level selects the hidden subspace block in the smoothed oracle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MssKeying {
    /// prog_{β/2} + 1, the same level whose gradient component is replaced.
    #[default]
    HalfThreshold,
    /// prog_{β/4} + 1.
    QuarterThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub query_index: u64,
    pub kind: String,
    pub x_hash: String,
    /// prog_{β/4} of the query point.
    pub prog_before: usize,
    /// Largest chain index carried by the response.
    pub prog_after: usize,
    pub j_or_xi: Option<u64>,
    /// Set when the smoothed oracle's replaced level and quarter-threshold level differ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level_mismatch: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryLedger {
    pub counts: BTreeMap<String, u64>,
    pub trace: Vec<TraceEntry>,
    pub keep_trace: bool,
    /// Next query index; also the key of the next query's random stream.
    pub next_index: u64,
}

impl QueryLedger {
    pub fn new(keep_trace: bool) -> Self {
        Self { keep_trace, ..Default::default() }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    fn record(&mut self, mut entry: TraceEntry) {
        entry.query_index = self.next_index;
        *self.counts.entry(entry.kind.clone()).or_default() += 1;
        self.next_index += 1;
        if self.keep_trace {
            self.trace.push(entry);
        }
    }

    /// Appends `other` after `self`; counts add, indices of `other` are shifted.
    pub fn merge(&mut self, other: &QueryLedger) {
        for (k, v) in &other.counts {
            *self.counts.entry(k.clone()).or_default() += v;
        }
        let base = self.next_index;
        self.trace.extend(other.trace.iter().cloned().map(|mut e| {
            e.query_index += base;
            e
        }));
        self.next_index += other.next_index;
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Recipe for the d × 2𝒯 matrix M_x whose nonzero columns are
/// v_c = Σ_k Q_{kc}·w_k, with Q the Householder reflection sending e₁ to 𝟙/√𝒯.
/// Columns are produced on demand.
#[derive(Debug, Clone)]
pub struct MxRecipe<'a, S> {
    /// 1-based chain index i_x.
    pub level: usize,
    /// Hidden-block level the w₂…w_𝒯 vectors come from (1-based).
    pub block_level: usize,
    pub e_x: Vec<S>,
    pub gamma: S,
    pub columns: usize,
    /// slot j → nonzero column index, or `None` for a zero column.
    pub slots: Vec<Option<usize>>,
    hh_v: Vec<S>,
    hh_coef: S,
    s: Vec<S>,
    emb: &'a RotationEmbedding<S>,
}

impl<S: Scalar> MxRecipe<'_, S> {
    fn w(&self, k: usize) -> &[S] {
        if k == 0 {
            &self.e_x
        } else {
            self.emb.block_vector(self.block_level - 1, k - 1).expect("block width checked at construction")
        }
    }

    /// Nonzero column c ∈ [0, 𝒯).
    pub fn nonzero_column(&self, c: usize) -> Vec<S> {
        let coef = self.hh_coef * self.hh_v[c];
        self.w(c).iter().zip(&self.s).map(|(&w, &s)| w - coef * s).collect()
    }

    /// Column j ∈ [0, 2𝒯) of M_x.
    pub fn column(&self, j: usize) -> Vec<S> {
        match self.slots[j] {
            Some(c) => self.nonzero_column(c),
            None => vec![S::zero(); self.e_x.len()],
        }
    }
}

fn build_recipe<'a, S: Scalar>(
    emb: &'a RotationEmbedding<S>,
    seed: u64,
    level: usize,
    block_level: usize,
    e_x: Vec<S>,
    gamma: S,
    columns: usize,
) -> Result<MxRecipe<'a, S>> {
    let width = emb.blocks.as_ref().map_or(0, |b| b.width);
    if width + 1 < columns {
        return Err(Error::DimensionFloor {
            d: emb.d,
            floor: emb.t * (2 * columns + 1),
            what: "the M_x construction (hidden blocks of width ≥ 𝒯 − 1)",
        });
    }
    let inv = S::one() / S::from_usize(columns).unwrap().sqrt();
    let mut hh_v = vec![-inv; columns];
    hh_v[0] = S::one() - inv;
    let vv = dot(&hh_v, &hh_v);
    let hh_coef = if vv > S::zero() { S::lit(2.0) / vv } else { S::zero() };
    let mut recipe = MxRecipe {
        level,
        block_level,
        e_x,
        gamma,
        columns,
        slots: Vec::new(),
        hh_v,
        hh_coef,
        s: Vec::new(),
        emb,
    };
    let mut s = vec![S::zero(); emb.d];
    for k in 0..columns {
        let vk = recipe.hh_v[k];
        for (si, &wi) in s.iter_mut().zip(recipe.w(k)) {
            *si += vk * wi;
        }
    }
    recipe.s = s;
    let mut perm: Vec<usize> = (0..2 * columns).collect();
    perm.shuffle(&mut keyed_rng(seed, "mx-slots", level as u64));
    recipe.slots = perm.into_iter().map(|p| (p < columns).then_some(p)).collect();
    Ok(recipe)
}

/// True iff x ∈ W_{t;⊥}: some chain index i with t < i ≤ T has |⟨x, u^{(i)}⟩| ≥ β/4.
pub fn subspace_audit<S: Scalar>(inst: &Instance<S>, x: &[S], t: usize) -> Result<bool> {
    let c = inst.coords(x)?;
    Ok(c[t.min(c.len())..].iter().any(|v| v.abs() >= S::lit(0.25)))
}

/// An instance together with an oracle family and its ledger.
#[derive(Debug, Clone)]
pub struct Oracle<'a, S> {
    pub inst: &'a Instance<S>,
    pub kind: OracleKind,
    pub seed: u64,
    pub keying: MssKeying,
    pub ledger: QueryLedger,
}

/// Kernel-coordinate view of a query point.
struct Local<S> {
    coords: Vec<S>,
    kgrad: Vec<S>,
    prog_quarter: usize,
}

impl<'a, S: Scalar> Oracle<'a, S> {
    pub fn new(inst: &'a Instance<S>, kind: OracleKind, seed: u64) -> Result<Self> {
        kind.validate()?;
        Ok(Self { inst, kind, seed, keying: MssKeying::default(), ledger: QueryLedger::new(true) })
    }

    pub fn with_keying(mut self, keying: MssKeying) -> Self {
        self.keying = keying;
        self
    }

    pub fn without_trace(mut self) -> Self {
        self.ledger.keep_trace = false;
        self
    }

    fn local(&self, x: &[S]) -> Result<Local<S>> {
        let coords = self.inst.coords(x)?;
        let kgrad = self.inst.kernel.derivs(&coords, 1)?.grad;
        let prog_quarter = prog(&coords, S::lit(0.25));
        Ok(Local { coords, kgrad, prog_quarter })
    }

    fn response_prog(&self, g: &[S]) -> usize {
        let n = dot(g, g).sqrt();
        if n == S::zero() {
            return 0;
        }
        let c = self.inst.embedding.project(g);
        c.iter().rposition(|v| v.abs() > S::lit(1e-9) * n).map_or(0, |i| i + 1)
    }

    fn trace_entry(&self, kind: &str, x: &[S], before: usize, g: &[S], j_or_xi: Option<u64>) -> TraceEntry {
        let after = if self.ledger.keep_trace { self.response_prog(g) } else { 0 };
        TraceEntry {
            query_index: 0,
            kind: kind.into(),
            x_hash: if self.ledger.keep_trace { hash_f64s(x.iter().map(|v| v.to_f64_lossy())) } else { String::new() },
            prog_before: before,
            prog_after: after,
            j_or_xi,
            level_mismatch: None,
        }
    }

    fn lift_kernel(&self, kg: &[S]) -> Vec<S> {
        let scale = self.inst.alpha() / self.inst.beta();
        let scaled: Vec<S> = kg.iter().map(|&v| v * scale).collect();
        self.inst.embedding.lift(&scaled)
    }

    /// Derivatives of f̃ up to order `p`.
    pub fn det_query(&mut self, x: &[S], p: usize) -> Result<AmbientDerivs<S>> {
        let out = self.inst.tilde_eval(x, p)?;
        let before = prog(&out.coords, S::lit(0.25));
        let entry = self.trace_entry("det", x, before, &out.grad, None);
        self.ledger.record(entry);
        Ok(out)
    }

    /// Components beyond prog_{β/4} are scaled by ξ/p with ξ ~ Bernoulli(p).
    pub fn bernoulli_query(&mut self, x: &[S]) -> Result<Vec<S>> {
        let OracleKind::Bernoulli { prob } = self.kind else {
            return Err(Error::InvalidParameter("oracle is not configured as Bernoulli".into()));
        };
        let loc = self.local(x)?;
        let xi = keyed_rng(self.seed, "bernoulli", self.ledger.next_index).gen::<f64>() < prob;
        let factor = if xi { S::lit(1.0 / prob) } else { S::zero() };
        let mut kg = loc.kgrad;
        for v in kg.iter_mut().skip(loc.prog_quarter) {
            *v = *v * factor;
        }
        let g = self.lift_kernel(&kg);
        let entry = self.trace_entry("bernoulli", x, loc.prog_quarter, &g, Some(xi as u64));
        self.ledger.record(entry);
        Ok(g)
    }

    fn recipe_for(&self, loc: &Local<S>, level: usize, block_level: usize, columns: usize) -> Result<MxRecipe<'a, S>> {
        let comp = loc.kgrad[level - 1];
        let sign = if comp < S::zero() { -S::one() } else { S::one() };
        let e_x: Vec<S> = self.inst.embedding.column(level - 1).iter().map(|&u| u * sign).collect();
        let gamma = comp.abs() * self.inst.alpha() / self.inst.beta();
        build_recipe(&self.inst.embedding, self.seed, level, block_level, e_x, gamma, columns)
    }

    /// M_x at level prog_{β/4}(x) + 1; `None` when prog = T.
    pub fn build_mx(&self, x: &[S]) -> Result<Option<MxRecipe<'a, S>>> {
        let loc = self.local(x)?;
        let level = loc.prog_quarter + 1;
        if level > self.inst.t() {
            return Ok(None);
        }
        self.recipe_for(&loc, level, level, self.columns()).map(Some)
    }

    fn columns(&self) -> usize {
        match self.kind {
            OracleKind::MeanHiding { columns } | OracleKind::SmoothedMss { columns } => columns,
            _ => self.inst.params.columns,
        }
    }

    fn draw_j(&self, j: Option<usize>) -> Result<usize> {
        let n = 2 * self.columns();
        match j {
            Some(j) if j < n => Ok(j),
            Some(j) => Err(Error::InvalidParameter(format!("column index {j} outside [0, {n})"))),
            None => Ok(keyed_rng(self.seed, "column", self.ledger.next_index).gen_range(0..n)),
        }
    }

    fn prepare(&self, x: &[S]) -> Result<Prepared<'a, S>> {
        let loc = self.local(x)?;
        let t = self.inst.t();
        let quarter = loc.prog_quarter + 1;
        let (level, theta, block_level, mismatch) = match self.kind {
            OracleKind::MeanHiding { .. } => (quarter, S::one(), quarter, None),
            OracleKind::SmoothedMss { .. } => {
                let level = prog(&loc.coords, S::lit(0.5)) + 1;
                let theta = if level > t { S::zero() } else { self.inst.kernel.theta(level, &loc.coords, S::one()) };
                let block_level = match self.keying {
                    MssKeying::HalfThreshold => level,
                    MssKeying::QuarterThreshold => quarter.min(t),
                };
                (level, theta, block_level, (level <= t && quarter != level).then_some((level, quarter)))
            }
            _ => return Err(Error::InvalidParameter("oracle has no column construction".into())),
        };
        if level > t || theta == S::zero() {
            let base = self.lift_kernel(&loc.kgrad);
            return Ok(Prepared { base, coef: S::zero(), recipe: None, prog_quarter: loc.prog_quarter, mismatch });
        }
        let recipe = self.recipe_for(&loc, level, block_level, self.columns())?;
        let mut kg = loc.kgrad.clone();
        kg[level - 1] = kg[level - 1] * (S::one() - theta);
        let base = self.lift_kernel(&kg);
        let coef = theta * S::lit(2.0) * recipe.gamma * S::from_usize(recipe.columns).unwrap().sqrt();
        Ok(Prepared { base, coef, recipe: Some(recipe), prog_quarter: loc.prog_quarter, mismatch })
    }

    fn column_query(&mut self, x: &[S], j: Option<usize>) -> Result<Vec<S>> {
        let prep = self.prepare(x)?;
        let j = self.draw_j(j)?;
        let g = prep.response(j);
        self.record_column(x, &prep, j, &g);
        Ok(g)
    }

    fn record_column(&mut self, x: &[S], prep: &Prepared<'_, S>, j: usize, g: &[S]) {
        let mut entry = self.trace_entry(self.kind.label(), x, prep.prog_quarter, g, Some(j as u64));
        entry.level_mismatch = prep.mismatch;
        self.ledger.record(entry);
    }

    /// g(x) − g_i(x) + 2γ_x√𝒯·m^{(j)} with i = prog_{β/4}(x) + 1; exact gradient when i > T.
    pub fn meanhiding_query(&mut self, x: &[S], j: Option<usize>) -> Result<Vec<S>> {
        if !matches!(self.kind, OracleKind::MeanHiding { .. }) {
            return Err(Error::InvalidParameter("oracle is not configured as mean-hiding".into()));
        }
        self.column_query(x, j)
    }

    /// g(x) + Θ_i(x)·(2γ_x√𝒯·m^{(j)} − g_i(x)) with i = prog_{β/2}(x) + 1.
    pub fn mss_query(&mut self, x: &[S], j: Option<usize>) -> Result<Vec<S>> {
        if !matches!(self.kind, OracleKind::SmoothedMss { .. }) {
            return Err(Error::InvalidParameter("oracle is not configured as smoothed mss".into()));
        }
        self.column_query(x, j)
    }

    /// The responses for every j ∈ [0, 2𝒯), each counted as one query.
    pub fn all_responses(&mut self, x: &[S]) -> Result<Vec<Vec<S>>> {
        let prep = self.prepare(x)?;
        Ok((0..self.support_size())
            .map(|j| {
                let g = prep.response(j);
                self.record_column(x, &prep, j, &g);
                g
            })
            .collect())
    }

    /// One stochastic gradient from whichever family is configured.
    pub fn sample(&mut self, x: &[S], j: Option<usize>) -> Result<Vec<S>> {
        match self.kind {
            OracleKind::DetOrder { .. } => Ok(self.det_query(x, 1)?.grad),
            OracleKind::Bernoulli { .. } => self.bernoulli_query(x),
            OracleKind::MeanHiding { .. } | OracleKind::SmoothedMss { .. } => self.column_query(x, j),
        }
    }

    /// Size of the finite j-support (1 for det, 2 for Bernoulli's ξ, 2𝒯 otherwise).
    pub fn support_size(&self) -> usize {
        match self.kind {
            OracleKind::DetOrder { .. } => 1,
            OracleKind::Bernoulli { .. } => 2,
            _ => 2 * self.columns(),
        }
    }

    /// Exact mean and variance E∥g − ∇f̃∥² over the oracle's randomness, by enumeration.
    pub fn exact_moments(&mut self, x: &[S]) -> Result<(Vec<S>, S)> {
        let truth = self.inst.tilde_grad(x)?;
        match self.kind {
            OracleKind::DetOrder { .. } => {
                let g = self.det_query(x, 1)?.grad;
                let v = dist2(&g, &truth);
                Ok((g, v))
            }
            OracleKind::Bernoulli { prob } => {
                // ξ = 1 with probability p, ξ = 0 otherwise.
                let loc = self.local(x)?;
                let mut hit = loc.kgrad.clone();
                let mut miss = loc.kgrad.clone();
                for i in loc.prog_quarter..hit.len() {
                    hit[i] = hit[i] * S::lit(1.0 / prob);
                    miss[i] = S::zero();
                }
                let (gh, gm) = (self.lift_kernel(&hit), self.lift_kernel(&miss));
                let p = S::lit(prob);
                let q = S::one() - p;
                let mean: Vec<S> = gh.iter().zip(&gm).map(|(&a, &b)| p * a + q * b).collect();
                let var = p * dist2(&gh, &truth) + q * dist2(&gm, &truth);
                Ok((mean, var))
            }
            _ => {
                let all = self.all_responses(x)?;
                let nn = S::from_usize(all.len()).unwrap();
                let mut mean = vec![S::zero(); x.len()];
                let mut var = S::zero();
                for g in &all {
                    var += dist2(g, &truth);
                    for (m, gi) in mean.iter_mut().zip(g) {
                        *m += *gi;
                    }
                }
                Ok((mean.into_iter().map(|m| m / nn).collect(), var / nn))
            }
        }
    }
}

/// Per-point state shared by every column index j of a column-replacing oracle.
#[derive(Debug, Clone)]
pub struct Prepared<'a, S> {
    /// Response with the replaced component removed (or scaled by 1 − Θ).
    pub base: Vec<S>,
    /// Multiplier of m^{(j)}: Θ·2γ_x√𝒯.
    pub coef: S,
    pub recipe: Option<MxRecipe<'a, S>>,
    pub prog_quarter: usize,
    pub mismatch: Option<(usize, usize)>,
}

impl<S: Scalar> Prepared<'_, S> {
    pub fn response(&self, j: usize) -> Vec<S> {
        let mut g = self.base.clone();
        if let Some(r) = &self.recipe {
            if r.slots[j].is_some() {
                for (gi, mi) in g.iter_mut().zip(r.column(j)) {
                    *gi += self.coef * mi;
                }
            }
        }
        g
    }
}

pub fn dist2<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}
