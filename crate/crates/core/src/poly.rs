//! Sparse multivariate polynomials with `f64` coefficients.
//!
//! Terms are kept in a [`BTreeMap`] keyed by [`Monomial`], whose ordering is
//! graded lexicographic. That single ordering drives canonical printing,
//! evaluation order and the row order of every SDP assembled from these
//! polynomials, so results are reproducible run to run.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Coefficients whose magnitude falls at or below this after arithmetic are
/// dropped from the canonical form.
pub const ZERO_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolyError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("variable index {index} out of range for dimension {dim}")]
    VariableOutOfRange { index: usize, dim: usize },
    #[error("point has length {got}, expected {expected}")]
    PointLength { got: usize, expected: usize },
    #[error("non-finite coefficient {0}")]
    NonFinite(f64),
}

/// Exponent vector of a single monomial `x1^e1 * ... * xn^en`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Monomial {
    exps: Vec<u32>,
    degree: u32,
}

impl Monomial {
    pub fn new(exps: Vec<u32>) -> Self {
        let degree = exps.iter().sum();
        Monomial { exps, degree }
    }

    pub fn one(dim: usize) -> Self {
        Monomial { exps: vec![0; dim], degree: 0 }
    }

    /// The monomial `x_index`.
    pub fn var(dim: usize, index: usize) -> Self {
        let mut exps = vec![0; dim];
        exps[index] = 1;
        Monomial { exps, degree: 1 }
    }

    pub fn exps(&self) -> &[u32] {
        &self.exps
    }

    pub fn dim(&self) -> usize {
        self.exps.len()
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.dim(), other.dim());
        let exps: Vec<u32> = self.exps.iter().zip(&other.exps).map(|(a, b)| a + b).collect();
        Monomial { exps, degree: self.degree + other.degree }
    }

    pub fn evaluate(&self, point: &[f64]) -> f64 {
        self.exps
            .iter()
            .zip(point)
            .filter(|(e, _)| **e > 0)
            .map(|(e, x)| x.powi(*e as i32))
            .product()
    }

    fn render(&self) -> String {
        let parts: Vec<String> = self
            .exps
            .iter()
            .enumerate()
            .filter(|(_, e)| **e > 0)
            .map(|(i, e)| if *e == 1 { format!("x{}", i + 1) } else { format!("x{}^{}", i + 1, e) })
            .collect();
        parts.join("*")
    }
}

impl Ord for Monomial {
    /// Graded lexicographic: total degree first, then exponents compared
    /// from `x1` onward.
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree
            .cmp(&other.degree)
            .then_with(|| self.exps.cmp(&other.exps))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All monomials in `dim` variables with total degree at most `max_degree`,
/// in increasing graded-lex order.
pub fn monomials_up_to(dim: usize, max_degree: u32) -> Vec<Monomial> {
    let mut out = Vec::new();
    for d in 0..=max_degree {
        let mut level = Vec::new();
        let mut exps = vec![0u32; dim];
        compositions(d, 0, &mut exps, &mut level);
        level.sort();
        out.extend(level);
    }
    out
}

fn compositions(remaining: u32, pos: usize, exps: &mut Vec<u32>, out: &mut Vec<Monomial>) {
    if pos + 1 == exps.len() {
        exps[pos] = remaining;
        out.push(Monomial::new(exps.clone()));
        exps[pos] = 0;
        return;
    }
    if exps.is_empty() {
        if remaining == 0 {
            out.push(Monomial::new(Vec::new()));
        }
        return;
    }
    for e in 0..=remaining {
        exps[pos] = e;
        compositions(remaining - e, pos + 1, exps, out);
    }
    exps[pos] = 0;
}

/// A polynomial in a fixed number of variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    dim: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(dim: usize) -> Self {
        Polynomial { dim, terms: BTreeMap::new() }
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        let mut p = Polynomial::zero(dim);
        p.add_term(Monomial::one(dim), value);
        p
    }

    /// The coordinate polynomial `x_index` (zero based).
    pub fn var(dim: usize, index: usize) -> Result<Self, PolyError> {
        if index >= dim {
            return Err(PolyError::VariableOutOfRange { index, dim });
        }
        let mut p = Polynomial::zero(dim);
        p.add_term(Monomial::var(dim, index), 1.0);
        Ok(p)
    }

    /// Builds a polynomial from `(coefficient, exponents)` pairs, merging
    /// repeated monomials.
    pub fn from_terms<I>(dim: usize, terms: I) -> Result<Self, PolyError>
    where
        I: IntoIterator<Item = (f64, Vec<u32>)>,
    {
        let mut p = Polynomial::zero(dim);
        for (c, exps) in terms {
            if exps.len() != dim {
                return Err(PolyError::DimensionMismatch { left: dim, right: exps.len() });
            }
            if !c.is_finite() {
                return Err(PolyError::NonFinite(c));
            }
            p.add_term(Monomial::new(exps), c);
        }
        p.canonicalize();
        Ok(p)
    }

    pub fn from_monomial(mono: Monomial, coeff: f64) -> Self {
        let mut p = Polynomial::zero(mono.dim());
        p.add_term(mono, coeff);
        p
    }

    /// `x^T x`.
    pub fn norm_squared(dim: usize) -> Self {
        let mut p = Polynomial::zero(dim);
        for i in 0..dim {
            let mut exps = vec![0; dim];
            exps[i] = 2;
            p.add_term(Monomial::new(exps), 1.0);
        }
        p
    }

    fn add_term(&mut self, mono: Monomial, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        let entry = self.terms.entry(mono.clone()).or_insert(0.0);
        *entry += coeff;
        if *entry == 0.0 {
            self.terms.remove(&mono);
        }
    }

    fn canonicalize(&mut self) {
        self.terms.retain(|_, c| c.abs() > ZERO_THRESHOLD);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; the zero polynomial reports 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().next_back().map(|m| m.degree()).unwrap_or(0)
    }

    pub fn terms(&self) -> impl DoubleEndedIterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coeff(&self, mono: &Monomial) -> f64 {
        self.terms.get(mono).copied().unwrap_or(0.0)
    }

    /// Coefficient of the monomial with exponents `exps` (zero if absent).
    pub fn coeff_of(&self, exps: &[u32]) -> f64 {
        self.coeff(&Monomial::new(exps.to_vec()))
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    fn check_dim(&self, other: &Polynomial) -> Result<(), PolyError> {
        if self.dim != other.dim {
            return Err(PolyError::DimensionMismatch { left: self.dim, right: other.dim });
        }
        Ok(())
    }

    pub fn add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_dim(other)?;
        let mut out = self.clone();
        for (m, c) in &other.terms {
            *out.terms.entry(m.clone()).or_insert(0.0) += c;
        }
        out.canonicalize();
        Ok(out)
    }

    pub fn sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Polynomial {
        self.scale(-1.0)
    }

    pub fn scale(&self, factor: f64) -> Polynomial {
        let mut out = Polynomial::zero(self.dim);
        for (m, c) in &self.terms {
            out.terms.insert(m.clone(), c * factor);
        }
        out.canonicalize();
        out
    }

    pub fn add_constant(&self, value: f64) -> Polynomial {
        let mut out = self.clone();
        *out.terms.entry(Monomial::one(self.dim)).or_insert(0.0) += value;
        out.canonicalize();
        out
    }

    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_dim(other)?;
        let mut out = Polynomial::zero(self.dim);
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                *out.terms.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        out.canonicalize();
        Ok(out)
    }

    pub fn pow(&self, k: u32) -> Polynomial {
        let mut out = Polynomial::constant(self.dim, 1.0);
        for _ in 0..k {
            out = out.mul(self).expect("same dimension");
        }
        out
    }

    /// Formal partial derivative with respect to `x_var` (zero based).
    pub fn differentiate(&self, var: usize) -> Result<Polynomial, PolyError> {
        if var >= self.dim {
            return Err(PolyError::VariableOutOfRange { index: var, dim: self.dim });
        }
        let mut out = Polynomial::zero(self.dim);
        for (m, c) in &self.terms {
            let e = m.exps[var];
            if e == 0 {
                continue;
            }
            let mut exps = m.exps.clone();
            exps[var] -= 1;
            *out.terms.entry(Monomial::new(exps)).or_insert(0.0) += c * f64::from(e);
        }
        out.canonicalize();
        Ok(out)
    }

    pub fn gradient(&self) -> Vec<Polynomial> {
        (0..self.dim)
            .map(|i| self.differentiate(i).expect("index in range"))
            .collect()
    }

    pub fn hessian(&self) -> Vec<Vec<Polynomial>> {
        let grad = self.gradient();
        let mut h = vec![vec![Polynomial::zero(self.dim); self.dim]; self.dim];
        for i in 0..self.dim {
            for j in i..self.dim {
                let d = grad[i].differentiate(j).expect("index in range");
                h[j][i] = d.clone();
                h[i][j] = d;
            }
        }
        h
    }

    /// Evaluates by summing terms in increasing graded-lex order.
    pub fn evaluate(&self, point: &[f64]) -> Result<f64, PolyError> {
        if point.len() != self.dim {
            return Err(PolyError::PointLength { got: point.len(), expected: self.dim });
        }
        Ok(self.eval_unchecked(point))
    }

    pub(crate) fn eval_unchecked(&self, point: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.evaluate(point)).sum()
    }

    /// Largest coefficient-wise difference against `other`.
    pub fn max_abs_diff(&self, other: &Polynomial) -> Result<f64, PolyError> {
        Ok(self.sub(other)?.max_abs_coeff())
    }
}

impl fmt::Display for Polynomial {
    /// Highest graded-lex term first, e.g. `-8*x1^4 + 8*x1^2 + 0.4`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (m, c)) in self.terms.iter().rev().enumerate() {
            let mono = m.render();
            let (sign, mag) = if *c < 0.0 { ("-", -c) } else { ("+", *c) };
            if k == 0 {
                if sign == "-" {
                    write!(f, "-")?;
                }
            } else {
                write!(f, " {sign} ")?;
            }
            if mono.is_empty() {
                write!(f, "{mag}")?;
            } else {
                write!(f, "{mag}*{mono}")?;
            }
        }
        Ok(())
    }
}

/// A polynomial flattened for fast repeated evaluation in simulation loops.
#[derive(Debug, Clone)]
pub struct CompiledPoly {
    dim: usize,
    coeffs: Vec<f64>,
    exps: Vec<u32>,
}

impl CompiledPoly {
    pub fn new(p: &Polynomial) -> Self {
        let mut coeffs = Vec::with_capacity(p.num_terms());
        let mut exps = Vec::with_capacity(p.num_terms() * p.dim());
        for (m, c) in p.terms() {
            coeffs.push(c);
            exps.extend_from_slice(m.exps());
        }
        CompiledPoly { dim: p.dim(), coeffs, exps }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.exps.iter().all(|e| *e == 0)
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (t, c) in self.coeffs.iter().enumerate() {
            let e = &self.exps[t * self.dim..(t + 1) * self.dim];
            let mut v = *c;
            for (xi, ei) in x.iter().zip(e) {
                match ei {
                    0 => {}
                    1 => v *= xi,
                    2 => v *= xi * xi,
                    _ => v *= xi.powi(*ei as i32),
                }
            }
            acc += v;
        }
        acc
    }
}
