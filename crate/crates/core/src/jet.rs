//! Truncated Taylor-series arithmetic for derivatives of order ≥ 3.
//!
//! A `Jet` of order `n` holds the Taylor coefficients `c[0..=n]` of a function of
//! one variable around the expansion point, so the k-th derivative is `c[k]·k!`.

use std::ops::{Add, Mul, Neg, Sub};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Jet<S> {
    c: Vec<S>,
}

impl<S: Scalar> Jet<S> {
    pub fn constant(v: S, order: usize) -> Self {
        let mut c = vec![S::zero(); order + 1];
        c[0] = v;
        Self { c }
    }

    /// The identity `t ↦ x0 + t`.
    pub fn variable(x0: S, order: usize) -> Self {
        let mut j = Self::constant(x0, order);
        if order >= 1 {
            j.c[1] = S::one();
        }
        j
    }

    pub fn order(&self) -> usize {
        self.c.len() - 1
    }

    pub fn coeffs(&self) -> &[S] {
        &self.c
    }

    pub fn value(&self) -> S {
        self.c[0]
    }

    pub fn derivative(&self, k: usize) -> S {
        let mut fact = S::one();
        for i in 2..=k {
            fact *= S::from_usize(i).unwrap();
        }
        self.c[k] * fact
    }

    /// All derivatives `0..=order`.
    pub fn derivatives(&self) -> Vec<S> {
        (0..self.c.len()).map(|k| self.derivative(k)).collect()
    }

    pub fn scale(&self, s: S) -> Self {
        Self { c: self.c.iter().map(|&v| v * s).collect() }
    }

    pub fn add_scalar(&self, s: S) -> Self {
        let mut out = self.clone();
        out.c[0] += s;
        out
    }

    pub fn recip(&self) -> Self {
        let n = self.c.len();
        let a0 = self.c[0];
        let mut b = vec![S::zero(); n];
        b[0] = S::one() / a0;
        for k in 1..n {
            let mut acc = S::zero();
            for j in 1..=k {
                acc += self.c[j] * b[k - j];
            }
            b[k] = -acc / a0;
        }
        Self { c: b }
    }

    pub fn exp(&self) -> Self {
        let n = self.c.len();
        let mut b = vec![S::zero(); n];
        b[0] = self.c[0].exp();
        for k in 1..n {
            let mut acc = S::zero();
            for j in 1..=k {
                acc += S::from_usize(j).unwrap() * self.c[j] * b[k - j];
            }
            b[k] = acc / S::from_usize(k).unwrap();
        }
        Self { c: b }
    }
}

impl<S: Scalar> Add for &Jet<S> {
    type Output = Jet<S>;
    fn add(self, rhs: Self) -> Jet<S> {
        Jet { c: self.c.iter().zip(&rhs.c).map(|(&a, &b)| a + b).collect() }
    }
}

impl<S: Scalar> Sub for &Jet<S> {
    type Output = Jet<S>;
    fn sub(self, rhs: Self) -> Jet<S> {
        Jet { c: self.c.iter().zip(&rhs.c).map(|(&a, &b)| a - b).collect() }
    }
}

impl<S: Scalar> Neg for &Jet<S> {
    type Output = Jet<S>;
    fn neg(self) -> Jet<S> {
        Jet { c: self.c.iter().map(|&a| -a).collect() }
    }
}

impl<S: Scalar> Mul for &Jet<S> {
    type Output = Jet<S>;
    fn mul(self, rhs: Self) -> Jet<S> {
        let n = self.c.len().min(rhs.c.len());
        let mut c = vec![S::zero(); n];
        for (k, ck) in c.iter_mut().enumerate() {
            for j in 0..=k {
                *ck += self.c[j] * rhs.c[k - j];
            }
        }
        Jet { c }
    }
}
