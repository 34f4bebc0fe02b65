//! Dense state-vector amplitude amplification over a discretized Bernoulli register.

use std::collections::BTreeSet;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

pub const MAX_STATES: usize = 1 << 24;
pub const MAX_INVERSE_P: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedOracle {
    pub n: usize,
    pub marked: BTreeSet<usize>,
}

impl MarkedOracle {
    pub fn new(n: usize, marked: impl IntoIterator<Item = usize>) -> Result<Self> {
        if n == 0 || n > MAX_STATES {
            return Err(Error::InvalidParameter(format!("search space N = {n} outside [1, 2^24]")));
        }
        let marked: BTreeSet<usize> = marked.into_iter().collect();
        if marked.is_empty() || marked.iter().any(|&i| i >= n) {
            return Err(Error::InvalidParameter("marked set must be nonempty and inside [0, N)".into()));
        }
        Ok(Self { n, marked })
    }

    /// Phase flip |i⟩ → −|i⟩ on marked states.
    pub fn apply(&self, s: &mut StateVector) {
        for &i in &self.marked {
            s.amps[i] = -s.amps[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub amps: Vec<Complex64>,
}

fn pairwise_sum(v: &[Complex64]) -> Complex64 {
    if v.len() <= 64 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

impl StateVector {
    pub fn uniform(n: usize) -> Self {
        Self { amps: vec![Complex64::new(1.0 / (n as f64).sqrt(), 0.0); n] }
    }

    pub fn norm(&self) -> f64 {
        let sq: Vec<Complex64> = self.amps.iter().map(|a| Complex64::new(a.norm_sqr(), 0.0)).collect();
        pairwise_sum(&sq).re.sqrt()
    }

    /// a → 2·mean(a) − a, the reflection about the uniform state.
    pub fn reflect_about_mean(&mut self) {
        let mean = pairwise_sum(&self.amps) / self.amps.len() as f64;
        for a in self.amps.iter_mut() {
            *a = 2.0 * mean - *a;
        }
    }

    pub fn probability(&self, set: &BTreeSet<usize>) -> f64 {
        set.iter().map(|&i| self.amps[i].norm_sqr()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroverOutcome {
    pub success: f64,
    pub oracle_calls: usize,
    /// Largest |∥a∥ − 1| seen after any reflection.
    pub norm_drift: f64,
}

/// k rounds of (phase flip, reflect about mean) from the uniform state.
pub fn grover_run(oracle: &MarkedOracle, k: usize) -> GroverOutcome {
    let mut s = StateVector::uniform(oracle.n);
    let mut drift = (s.norm() - 1.0).abs();
    for _ in 0..k {
        oracle.apply(&mut s);
        drift = drift.max((s.norm() - 1.0).abs());
        s.reflect_about_mean();
        drift = drift.max((s.norm() - 1.0).abs());
    }
    GroverOutcome { success: s.probability(&oracle.marked), oracle_calls: k, norm_drift: drift }
}

/// sin²((2k+1)·asin√(m/N)).
pub fn closed_form(n: usize, m: usize, k: usize) -> f64 {
    let theta = (m as f64 / n as f64).sqrt().asin();
    ((2 * k + 1) as f64 * theta).sin().powi(2)
}

/// ⌈(π/4)√N⌉.
pub fn iterations_for(n: usize) -> usize {
    (std::f64::consts::FRAC_PI_4 * (n as f64).sqrt()).ceil() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub p: f64,
    pub classical_mean: f64,
    pub classical_std_err: f64,
    pub quantum_queries: usize,
    pub quantum_success: f64,
    pub closed_form: f64,
    pub ratio: f64,
    pub trials: usize,
    pub seed: u64,
}

/// N = 1/p as an integer, or an error.
pub fn register_size(p: f64) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter(format!("p = {p} outside (0, 1]")));
    }
    let inv = 1.0 / p;
    let n = inv.round();
    if (inv - n).abs() > 1e-9 * n {
        return Err(Error::InvalidParameter(format!("1/p = {inv} is not an integer")));
    }
    if n as usize > MAX_INVERSE_P {
        return Err(Error::InvalidParameter(format!("1/p = {n} exceeds 2^20")));
    }
    Ok(n as usize)
}

/// Classical draws until the one revealing value of a uniform N = 1/p register appears,
/// against ⌈(π/4)√N⌉ rounds of amplitude amplification on the same register.
pub fn speedup_demo(p: f64, trials: usize, seed: u64) -> Result<SpeedupReport> {
    let n = register_size(p)?;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let draws: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = keyed_rng(seed, "classical-draws", i as u64);
            let mut count = 1u64;
            while rng.gen_range(0..n) != 0 {
                count += 1;
            }
            count as f64
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / trials as f64;
    let var = if trials > 1 { draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (trials - 1) as f64 } else { 0.0 };
    let k = iterations_for(n);
    let run = grover_run(&MarkedOracle::new(n, [0])?, k);
    Ok(SpeedupReport {
        p,
        classical_mean: mean,
        classical_std_err: (var / trials as f64).sqrt(),
        quantum_queries: k,
        quantum_success: run.success,
        closed_form: closed_form(n, 1, k),
        ratio: mean / k as f64,
        trials,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_states_one_round() {
        let r = grover_run(&MarkedOracle::new(4, [2]).unwrap(), 1);
        assert!((r.success - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rounds_is_uniform() {
        let r = grover_run(&MarkedOracle::new(10, [1, 7, 9]).unwrap(), 0);
        assert!((r.success - 0.3).abs() < 1e-15);
    }

    #[test]
    fn register_size_rules() {
        assert_eq!(register_size(1.0 / 1024.0).unwrap(), 1024);
        assert!(register_size(0.3).is_err());
        assert!(register_size(1.0 / (1 << 21) as f64).is_err());
        assert!(MarkedOracle::new(MAX_STATES + 1, [0]).is_err());
    }
}
