//! Scale, chain-length and dimension choices for the three problem settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::ELL_1;

/// Uniform bound on per-coordinate gradient magnitudes used in variance budgets.
pub const GAMMA: f64 = 23.0;
/// Mean-squared smoothness constant of the smoothed stochastic gradient.
pub const ELL_HAT: f64 = 328.0;
/// Soft-projection radius in units of β√T.
pub const SOFT_RADIUS_FACTOR: f64 = 230.0;
/// Default Ω-constant: makes α·12T = Δ exactly in the deterministic setting.
pub const DEFAULT_C0: f64 = 1.0 / 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Setting {
    Deterministic { p: usize },
    Stochastic,
    StochasticMss,
}

impl Setting {
    pub fn label(&self) -> &'static str {
        match self {
            Setting::Deterministic { .. } => "det",
            Setting::Stochastic => "stochastic",
            Setting::StochasticMss => "mss",
        }
    }

    pub fn order(&self) -> usize {
        match self {
            Setting::Deterministic { p } => *p,
            _ => 1,
        }
    }
}

/// Problem constants. `lipschitz` is L_p (deterministic), L (stochastic) or L̄ (mss).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub delta: f64,
    pub lipschitz: f64,
    pub sigma: f64,
    pub eps: f64,
    /// ℓ_p of the kernel; defaults to ℓ₁ = 152 when p = 1 or the setting is stochastic.
    pub ell: Option<f64>,
    pub c0: f64,
    /// Overrides the column count 𝒯 of the mean-hiding oracle (stochastic setting only).
    pub columns: Option<usize>,
    /// Error instead of clamping when T or 𝒯 rounds below 1.
    pub strict_rounding: bool,
}

impl ProblemConstants {
    pub fn new(delta: f64, lipschitz: f64, sigma: f64, eps: f64) -> Self {
        Self { delta, lipschitz, sigma, eps, ell: None, c0: DEFAULT_C0, columns: None, strict_rounding: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rounding {
    pub field: String,
    pub raw: f64,
    pub rounded: usize,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceParams {
    pub setting: Setting,
    pub t: usize,
    pub d: usize,
    /// 𝒯, the column-count knob of the mean-hiding oracles.
    pub columns: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    pub constants: Option<ProblemConstants>,
    /// Kernel Lipschitz constant ℓ used for the scales.
    pub ell: f64,
    /// Smoothness L actually given to f̃ (equals the input in det/stochastic; derived in mss).
    pub smoothness: f64,
    pub radius: f64,
    pub soft_radius: f64,
    pub gamma: f64,
    pub d_floor: usize,
    pub rounding: Vec<Rounding>,
    pub taint: Vec<String>,
}

impl InstanceParams {
    /// The gradient threshold α/β at which the kernel floor ∥∇f̄∥ > 1 applies.
    pub fn grad_threshold(&self) -> f64 {
        self.alpha / self.beta
    }

    /// Hand-specified scales (tests and benchmarks); floors computed as for `setting`.
    pub fn custom(setting: Setting, t: usize, columns: usize, alpha: f64, beta: f64, eps: f64) -> Result<Self> {
        if t == 0 || columns == 0 {
            return Err(Error::InvalidParameter("T and 𝒯 must be at least 1".into()));
        }
        if !(alpha > 0.0 && beta > 0.0 && eps > 0.0) {
            return Err(Error::InvalidParameter("α, β, ε must be positive".into()));
        }
        let d_floor = d_floor(setting, t, columns);
        Ok(Self {
            setting,
            t,
            d: d_floor,
            columns,
            alpha,
            beta,
            eps,
            constants: None,
            ell: ELL_1,
            smoothness: ELL_1 * alpha / (beta * beta),
            radius: 2.0 * beta * (t as f64).sqrt(),
            soft_radius: SOFT_RADIUS_FACTOR * beta * (t as f64).sqrt(),
            gamma: GAMMA,
            d_floor,
            rounding: Vec::new(),
            taint: Vec::new(),
        })
    }

    /// Kernel units: α = β = 1, U = I, d = T.
    pub fn kernel_units(t: usize, eps: f64) -> Result<Self> {
        let mut p = Self::custom(Setting::Deterministic { p: 1 }, t, t, 1.0, 1.0, eps)?;
        p.d = t;
        p.taint.push("kernel-units".into());
        Ok(p)
    }

    /// Sets the ambient dimension. Below the floor requires `allow_below_floor` and taints the instance.
    pub fn with_dimension(mut self, d: usize, allow_below_floor: bool) -> Result<Self> {
        if d < self.t {
            return Err(Error::DimensionFloor { d, floor: self.t, what: "the embedding (T ≤ d)" });
        }
        if d < self.d_floor {
            if !allow_below_floor {
                return Err(Error::DimensionFloor { d, floor: self.d_floor, what: self.setting.label_floor() });
            }
            let tag = format!("d-floor-override(d={d},floor={})", self.d_floor);
            self.taint.retain(|t| !t.starts_with("d-floor-override"));
            self.taint.push(tag);
        }
        self.d = d;
        Ok(self)
    }

    /// Width of the hidden block per chain index: 2𝒯 when d allows, else the 𝒯 − 1
    /// vectors the oracle actually uses. `None` when even that does not fit.
    pub fn block_width(&self) -> Option<usize> {
        let full = 2 * self.columns;
        if self.t * (full + 1) <= self.d {
            Some(full)
        } else if self.t * self.columns <= self.d {
            Some(self.columns - 1)
        } else {
            None
        }
    }
}

impl Setting {
    fn label_floor(&self) -> &'static str {
        match self {
            Setting::Deterministic { .. } => "the deterministic floor 200·T·log T",
            Setting::Stochastic => "the stochastic floor 2T² + T",
            Setting::StochasticMss => "the mss floor max(2𝒯T·log 𝒯, 2𝒯T + T)",
        }
    }
}

pub fn d_floor(setting: Setting, t: usize, columns: usize) -> usize {
    let tf = t as f64;
    match setting {
        Setting::Deterministic { .. } => ((200.0 * tf * tf.ln()).ceil() as usize).max(t),
        Setting::Stochastic => 2 * columns * t + t,
        Setting::StochasticMss => {
            let cf = columns as f64;
            ((2.0 * cf * tf * cf.ln()).ceil() as usize).max(2 * columns * t + t)
        }
    }
}

fn round_count(field: &str, raw: f64, strict: bool, log: &mut Vec<Rounding>) -> Result<usize> {
    if !raw.is_finite() {
        return Err(Error::InvalidParameter(format!("{field} is not finite ({raw})")));
    }
    // Formulas that are integers in exact arithmetic may land a few ulps below.
    let snapped = if (raw - raw.round()).abs() <= 1e-9 * raw.abs() { raw.round() } else { raw };
    let floor = snapped.floor();
    if floor < 1.0 {
        if strict {
            return Err(Error::Infeasible(format!("{field} = {raw} rounds below 1")));
        }
        log.push(Rounding { field: field.into(), raw, rounded: 1, clamped: true });
        return Ok(1);
    }
    if floor > (usize::MAX / 4) as f64 {
        return Err(Error::Infeasible(format!("{field} = {raw} is too large")));
    }
    log.push(Rounding { field: field.into(), raw, rounded: floor as usize, clamped: false });
    Ok(floor as usize)
}

/// Largest ε for which the mss construction has 𝒯 ≥ T.
pub fn mss_eps_ceiling(delta: f64, lbar: f64, sigma: f64) -> f64 {
    6.0 * sigma * sigma * ELL_HAT / (4.0 * GAMMA.powi(3) * delta * lbar)
}

fn validate(setting: Setting, c: &ProblemConstants) -> Result<()> {
    let positive = [("Δ", c.delta), ("L", c.lipschitz), ("ε", c.eps), ("c₀", c.c0)];
    for (name, v) in positive {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")));
        }
    }
    if !matches!(setting, Setting::Deterministic { .. }) && !(c.sigma > 0.0 && c.sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("σ must be positive and finite, got {}", c.sigma)));
    }
    if let Setting::Deterministic { p } = setting {
        if p == 0 {
            return Err(Error::InvalidParameter("p must be at least 1".into()));
        }
    }
    if let Some(ell) = c.ell {
        if !(ell > 0.0 && ell.is_finite()) {
            return Err(Error::InvalidParameter(format!("ℓ must be positive, got {ell}")));
        }
    }
    Ok(())
}

/// Derives α, β, T, 𝒯, radii and the dimension floor; `d` is set to the floor.
pub fn params_for(setting: Setting, c: ProblemConstants) -> Result<InstanceParams> {
    validate(setting, &c)?;
    let mut rounding = Vec::new();
    let strict = c.strict_rounding;
    let (alpha, beta, t, columns, ell, smoothness) = match setting {
        Setting::Deterministic { p } => {
            let ell = match (c.ell, p) {
                (Some(ell), _) => ell,
                (None, 1) => ELL_1,
                (None, _) => {
                    return Err(Error::InvalidParameter(format!(
                        "ℓ_{p} has no closed form; supply it (for instance from estimate_lipschitz)"
                    )))
                }
            };
            let pf = p as f64;
            let beta = (ell * c.eps / c.lipschitz).powf(1.0 / pf);
            let alpha = c.lipschitz * beta.powf(pf + 1.0) / ell;
            let t_raw = c.c0 * c.delta * (c.lipschitz / ell).powf(1.0 / pf) * c.eps.powf(-(1.0 + pf) / pf);
            let t = round_count("T", t_raw, strict, &mut rounding)?;
            (alpha, beta, t, t, ell, c.lipschitz)
        }
        Setting::Stochastic => {
            let ell = c.ell.unwrap_or(ELL_1);
            let beta = 2.0 * ell * c.eps / c.lipschitz;
            let alpha = c.lipschitz * beta * beta / ell;
            let budget = c.delta * ell / (12.0 * c.lipschitz * beta * beta);
            let variance = c.sigma * c.sigma * beta * beta / (4.0 * GAMMA * GAMMA * alpha * alpha);
            let t = round_count("T", budget.min(variance), strict, &mut rounding)?;
            let columns = c.columns.unwrap_or(t).max(1);
            (alpha, beta, t, columns, ell, c.lipschitz)
        }
        Setting::StochasticMss => {
            let ceiling = mss_eps_ceiling(c.delta, c.lipschitz, c.sigma);
            if c.eps > ceiling {
                return Err(Error::Infeasible(format!(
                    "ε = {} exceeds the mss feasibility ceiling 6σ²ℓ̂/(4γ³ΔL̄) = {ceiling}",
                    c.eps
                )));
            }
            let ell = c.ell.unwrap_or(ELL_1);
            let l = 2.0 * ell * GAMMA * c.eps * c.lipschitz / (ELL_HAT * c.sigma);
            let beta = 2.0 * ell * c.eps / l;
            let alpha = l * beta * beta / ell;
            let t_raw = l * c.delta / (48.0 * ell * c.eps * c.eps);
            let cols_raw = c.sigma * c.sigma / (4.0 * GAMMA * GAMMA * c.eps * c.eps);
            let t = round_count("T", t_raw, strict, &mut rounding)?;
            let columns = round_count("columns", cols_raw, strict, &mut rounding)?;
            (alpha, beta, t, columns, ell, l)
        }
    };
    let floor = d_floor(setting, t, columns);
    let tf = t as f64;
    let mut taint = Vec::new();
    if rounding.iter().any(|r| r.clamped) {
        taint.push("count-clamped-to-1".into());
    }
    Ok(InstanceParams {
        setting,
        t,
        d: floor,
        columns,
        alpha,
        beta,
        eps: c.eps,
        constants: Some(c),
        ell,
        smoothness,
        radius: 2.0 * beta * tf.sqrt(),
        soft_radius: SOFT_RADIUS_FACTOR * beta * tf.sqrt(),
        gamma: GAMMA,
        d_floor: floor,
        rounding,
        taint,
    })
}

/// The Ω-expression of the matching lower bound, scaled by `c0`.
pub fn lower_bound_value(setting: Setting, c: &ProblemConstants) -> Result<f64> {
    validate(setting, c)?;
    Ok(match setting {
        Setting::Deterministic { p } => {
            let ell = c.ell.unwrap_or(ELL_1);
            let pf = p as f64;
            c.c0 * c.delta * (c.lipschitz / ell).powf(1.0 / pf) * c.eps.powf(-(1.0 + pf) / pf)
        }
        Setting::Stochastic => {
            let a = (c.lipschitz * c.delta).powi(2);
            let b = c.sigma.powi(4);
            c.c0 * a.min(b) / c.eps.powi(4)
        }
        Setting::StochasticMss => c.c0 * c.delta * c.lipschitz * c.sigma / c.eps.powi(3),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_example() {
        let mut c = ProblemConstants::new(1.0, 1.0, 0.0, 0.1);
        c.ell = Some(152.0);
        let p = params_for(Setting::Deterministic { p: 1 }, c).unwrap();
        assert!((p.beta - 15.2).abs() < 1e-12);
        assert!((p.alpha - 1.52).abs() < 1e-12);
        assert!((p.grad_threshold() - 0.1).abs() < 1e-15);
        assert_eq!(p.t, 1);
        assert!(p.rounding[0].clamped);
        assert_eq!(p.radius, 2.0 * p.beta);
    }

    #[test]
    fn deterministic_strict_rejects_empty_chain() {
        let mut c = ProblemConstants::new(1.0, 1.0, 0.0, 0.1);
        c.strict_rounding = true;
        assert!(matches!(params_for(Setting::Deterministic { p: 1 }, c), Err(Error::Infeasible(_))));
    }

    #[test]
    fn stochastic_small_sigma_clamps() {
        let c = ProblemConstants::new(10.0, 1.0, 1e-9, 0.01);
        let p = params_for(Setting::Stochastic, c).unwrap();
        assert_eq!(p.t, 1);
        assert!((p.grad_threshold() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn mss_column_count() {
        // σ²/(4γ²ε²) with σ = 4.6 = 0.2·γ: 𝒯 = 0.01/ε².
        let c = ProblemConstants::new(1.0, 1.0, 4.6, 0.01);
        let p = params_for(Setting::StochasticMss, c).unwrap();
        assert_eq!(p.columns, 100);
        let c = ProblemConstants::new(1.0, 1.0, 4.6, 0.1);
        assert_eq!(params_for(Setting::StochasticMss, c).unwrap().columns, 1);
        assert!(mss_eps_ceiling(1.0, 1.0, 4.6) < 1.0);
        let c = ProblemConstants::new(1.0, 1.0, 4.6, 1.0);
        assert!(matches!(params_for(Setting::StochasticMss, c), Err(Error::Infeasible(_))));
    }

    #[test]
    fn lower_bounds() {
        let mut c = ProblemConstants::new(1.0, 1.0, 1.0, 0.1);
        c.c0 = 2.0;
        assert!((lower_bound_value(Setting::StochasticMss, &c).unwrap() - 2000.0).abs() < 1e-9);
        let a = lower_bound_value(Setting::Deterministic { p: 1 }, &c).unwrap();
        c.eps = 0.05;
        let b = lower_bound_value(Setting::Deterministic { p: 1 }, &c).unwrap();
        assert!((b / a - 4.0).abs() < 1e-12);
        let s = ProblemConstants::new(10.0, 1.0, 0.5, 0.1);
        assert!((lower_bound_value(Setting::Stochastic, &s).unwrap() - 0.0625 / 1e-4 / 12.0).abs() < 1e-9);
    }
}
