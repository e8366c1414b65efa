//! Polynomial SDEs `dx = f(x) dt + g(x) dW`, semialgebraic targets, and the
//! symbolic generator.

use thiserror::Error;

use crate::poly::{CompiledPoly, PolyError, Polynomial};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdeError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("drift has {got} components, expected {expected}")]
    DriftLength { got: usize, expected: usize },
    #[error("diffusion must be {rows}x{cols}, got a row of length {got}")]
    DiffusionShape { rows: usize, cols: usize, got: usize },
    #[error("system needs at least one state and one noise dimension")]
    EmptyDimension,
    #[error("target set needs at least one constraint")]
    EmptyTarget,
    #[error("lambda must be positive, got {0}")]
    NonPositiveLambda(f64),
}

/// Drift, diffusion and the cached diffusion Gram `g g^T`.
#[derive(Debug, Clone)]
pub struct SdeSystem {
    n: usize,
    m: usize,
    drift: Vec<Polynomial>,
    diffusion: Vec<Vec<Polynomial>>,
    gram: Vec<Vec<Polynomial>>,
}

impl SdeSystem {
    pub fn new(drift: Vec<Polynomial>, diffusion: Vec<Vec<Polynomial>>) -> Result<Self, SdeError> {
        let n = drift.len();
        if n == 0 || diffusion.is_empty() || diffusion[0].is_empty() {
            return Err(SdeError::EmptyDimension);
        }
        if diffusion.len() != n {
            return Err(SdeError::DiffusionShape { rows: n, cols: diffusion[0].len(), got: diffusion.len() });
        }
        let m = diffusion[0].len();
        for row in &diffusion {
            if row.len() != m {
                return Err(SdeError::DiffusionShape { rows: n, cols: m, got: row.len() });
            }
            for p in row {
                if p.dim() != n {
                    return Err(PolyError::DimensionMismatch { left: n, right: p.dim() }.into());
                }
            }
        }
        for p in &drift {
            if p.dim() != n {
                return Err(PolyError::DimensionMismatch { left: n, right: p.dim() }.into());
            }
        }
        let mut gram = vec![vec![Polynomial::zero(n); n]; n];
        for i in 0..n {
            for j in i..n {
                let mut acc = Polynomial::zero(n);
                for k in 0..m {
                    acc = acc.add(&diffusion[i][k].mul(&diffusion[j][k])?)?;
                }
                gram[j][i] = acc.clone();
                gram[i][j] = acc;
            }
        }
        Ok(SdeSystem { n, m, drift, diffusion, gram })
    }

    /// `dx = A x dt + B dW` with constant matrices given row-major.
    pub fn linear(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Self, SdeError> {
        let n = a.len();
        let drift = a
            .iter()
            .map(|row| {
                Polynomial::from_terms(
                    n,
                    row.iter().enumerate().map(|(j, c)| {
                        let mut e = vec![0; n];
                        e[j] = 1;
                        (*c, e)
                    }),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let diffusion = b
            .iter()
            .map(|row| row.iter().map(|c| Polynomial::constant(n, *c)).collect())
            .collect();
        SdeSystem::new(drift, diffusion)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn drift(&self) -> &[Polynomial] {
        &self.drift
    }

    pub fn diffusion(&self) -> &[Vec<Polynomial>] {
        &self.diffusion
    }

    /// `G = g g^T`, computed once at construction.
    pub fn diffusion_gram(&self) -> &[Vec<Polynomial>] {
        &self.gram
    }

    pub fn is_noiseless(&self) -> bool {
        self.diffusion.iter().flatten().all(Polynomial::is_zero)
    }

    fn check(&self, p: &Polynomial) -> Result<(), SdeError> {
        if p.dim() != self.n {
            return Err(PolyError::DimensionMismatch { left: self.n, right: p.dim() }.into());
        }
        Ok(())
    }

    /// `f^T grad(B) + 1/2 tr(G hess(B))`, the generator applied to a
    /// polynomial test function.
    pub fn generator_apply(&self, b: &Polynomial) -> Result<Polynomial, SdeError> {
        self.check(b)?;
        let grad = b.gradient();
        let hess = b.hessian();
        let mut out = Polynomial::zero(self.n);
        for i in 0..self.n {
            out = out.add(&self.drift[i].mul(&grad[i])?)?;
        }
        let mut trace = Polynomial::zero(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                trace = trace.add(&self.gram[i][j].mul(&hess[i][j])?)?;
            }
        }
        Ok(out.add(&trace.scale(0.5))?)
    }

    /// `grad(a)^T G grad(b)` expanded symbolically.
    pub fn gram_form(&self, grad_a: &[Polynomial], grad_b: &[Polynomial]) -> Result<Polynomial, SdeError> {
        let mut out = Polynomial::zero(self.n);
        for i in 0..self.n {
            if grad_a[i].is_zero() {
                continue;
            }
            for j in 0..self.n {
                if grad_b[j].is_zero() || self.gram[i][j].is_zero() {
                    continue;
                }
                out = out.add(&grad_a[i].mul(&self.gram[i][j])?.mul(&grad_b[j])?)?;
            }
        }
        Ok(out)
    }

    /// The polynomial `beta` with `A U = exp(-lambda zeta) beta` for the
    /// exponential variant `U = (1 - exp(-lambda zeta)) / lambda`.
    pub fn beta_poly(&self, zeta: &Polynomial, lambda: f64) -> Result<Polynomial, SdeError> {
        if !(lambda > 0.0) {
            return Err(SdeError::NonPositiveLambda(lambda));
        }
        self.check(zeta)?;
        let generator = self.generator_apply(zeta)?;
        let grad = zeta.gradient();
        let quad = self.gram_form(&grad, &grad)?;
        Ok(generator.sub(&quad.scale(0.5 * lambda))?)
    }

    pub fn compile(&self) -> CompiledSystem {
        CompiledSystem {
            n: self.n,
            m: self.m,
            drift: self.drift.iter().map(CompiledPoly::new).collect(),
            diffusion: self.diffusion.iter().flatten().map(CompiledPoly::new).collect(),
        }
    }
}

/// Evaluation-only view of an [`SdeSystem`] used by the integrators.
#[derive(Debug, Clone)]
pub struct CompiledSystem {
    pub(crate) n: usize,
    pub(crate) m: usize,
    drift: Vec<CompiledPoly>,
    /// Row-major `n x m`.
    diffusion: Vec<CompiledPoly>,
}

impl CompiledSystem {
    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.drift) {
            *o = f.eval(x);
        }
    }

    #[inline]
    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.diffusion) {
            *o = if g.is_zero() { 0.0 } else { g.eval(x) };
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.diffusion.iter().all(CompiledPoly::is_zero)
    }

    /// Additive noise: `g` does not depend on the state.
    pub fn has_constant_diffusion(&self) -> bool {
        self.diffusion.iter().all(CompiledPoly::is_constant)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }
}

/// `{x : g_i(x) < 0 for all i}`.
#[derive(Debug, Clone)]
pub struct SemialgebraicSet {
    constraints: Vec<Polynomial>,
    compiled: Vec<CompiledPoly>,
}

impl SemialgebraicSet {
    pub fn new(constraints: Vec<Polynomial>) -> Result<Self, SdeError> {
        let Some(first) = constraints.first() else {
            return Err(SdeError::EmptyTarget);
        };
        let dim = first.dim();
        for c in &constraints {
            if c.dim() != dim {
                return Err(PolyError::DimensionMismatch { left: dim, right: c.dim() }.into());
            }
        }
        let compiled = constraints.iter().map(CompiledPoly::new).collect();
        Ok(SemialgebraicSet { constraints, compiled })
    }

    /// Open ball `{ ||x - center||^2 - radius^2 < 0 }`.
    pub fn ball(center: &[f64], radius: f64) -> Self {
        let n = center.len();
        let mut terms = Vec::new();
        let mut constant = -radius * radius;
        for (i, c) in center.iter().enumerate() {
            let mut e2 = vec![0; n];
            e2[i] = 2;
            terms.push((1.0, e2));
            let mut e1 = vec![0; n];
            e1[i] = 1;
            terms.push((-2.0 * c, e1));
            constant += c * c;
        }
        terms.push((constant, vec![0; n]));
        let p = Polynomial::from_terms(n, terms).expect("consistent dimension");
        SemialgebraicSet::new(vec![p]).expect("one constraint")
    }

    pub fn dim(&self) -> usize {
        self.constraints[0].dim()
    }

    pub fn constraints(&self) -> &[Polynomial] {
        &self.constraints
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.compiled.iter().all(|g| g.eval(x) < 0.0)
    }
}

/// `U(x) = (1 - exp(-lambda zeta(x))) / lambda`, with the exponent clamped to
/// `[-700, 700]` so that large `|zeta|` saturates instead of overflowing.
pub fn variant_from_zeta(zeta_value: f64, lambda: f64) -> f64 {
    let arg = (-lambda * zeta_value).clamp(-700.0, 700.0);
    -arg.exp_m1() / lambda
}

pub fn variant_value(zeta: &Polynomial, lambda: f64, x: &[f64]) -> Result<f64, SdeError> {
    if !(lambda > 0.0) {
        return Err(SdeError::NonPositiveLambda(lambda));
    }
    Ok(variant_from_zeta(zeta.evaluate(x)?, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p1(terms: &[(f64, u32)]) -> Polynomial {
        Polynomial::from_terms(1, terms.iter().map(|(c, e)| (*c, vec![*e]))).unwrap()
    }

    fn double_well() -> SdeSystem {
        let f = p1(&[(-4.0, 3), (4.0, 1)]);
        let g = Polynomial::constant(1, 0.4f64.sqrt());
        SdeSystem::new(vec![f], vec![vec![g]]).unwrap()
    }

    #[test]
    fn double_well_generator_of_square() {
        let av = double_well().generator_apply(&p1(&[(1.0, 2)])).unwrap();
        assert_eq!(av, p1(&[(-8.0, 4), (8.0, 2), (0.4, 0)]));
    }

    #[test]
    fn generator_kills_constants() {
        let av = double_well().generator_apply(&Polynomial::constant(1, 3.5)).unwrap();
        assert!(av.is_zero());
    }

    #[test]
    fn linear_generator_of_quadratic() {
        // A = -I, B = I, V = |x|^2 -> -2|x|^2 + 2
        let sys = SdeSystem::linear(&[vec![-1.0, 0.0], vec![0.0, -1.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]])
            .unwrap();
        let av = sys.generator_apply(&Polynomial::norm_squared(2)).unwrap();
        let expected = Polynomial::norm_squared(2).scale(-2.0).add_constant(2.0);
        assert_eq!(av, expected);
    }

    #[test]
    fn beta_double_well() {
        let rho: f64 = 0.2;
        let zeta = p1(&[(1.0, 2), (-2.0, 1), (1.0 - rho * rho, 0)]);
        for lambda in [1.0, 16.0, 32.0] {
            let beta = double_well().beta_poly(&zeta, lambda).unwrap();
            // -8x(x-1)^2(x+1) + 2/5 - (4/5) lambda (x-1)^2
            let xm1 = p1(&[(1.0, 1), (-1.0, 0)]);
            let expected = p1(&[(-8.0, 1)])
                .mul(&xm1.pow(2))
                .unwrap()
                .mul(&p1(&[(1.0, 1), (1.0, 0)]))
                .unwrap()
                .add_constant(0.4)
                .sub(&xm1.pow(2).scale(0.8 * lambda))
                .unwrap();
            assert!(beta.max_abs_diff(&expected).unwrap() < 1e-12, "lambda {lambda}");
        }
    }

    #[test]
    fn beta_of_constant_is_zero() {
        let beta = double_well().beta_poly(&Polynomial::constant(1, 2.0), 3.0).unwrap();
        assert!(beta.is_zero());
    }

    #[test]
    fn beta_pure_brownian() {
        let sys = SdeSystem::new(vec![Polynomial::zero(1)], vec![vec![Polynomial::constant(1, 1.0)]]).unwrap();
        let beta = sys.beta_poly(&p1(&[(1.0, 2)]), 0.7).unwrap();
        // 1 - 2 lambda x^2
        assert!(beta.max_abs_diff(&p1(&[(1.0, 0), (-1.4, 2)])).unwrap() < 1e-15);
        assert!(matches!(sys.beta_poly(&p1(&[(1.0, 2)]), 0.0), Err(SdeError::NonPositiveLambda(_))));
    }

    #[test]
    fn variant_value_examples() {
        let zeta = p1(&[(1.0, 2), (-2.0, 1), (1.0 - 0.04, 0)]);
        assert_eq!(variant_value(&Polynomial::zero(1), 2.0, &[0.3]).unwrap(), 0.0);
        let z = Polynomial::constant(1, 2f64.ln());
        assert!((variant_value(&z, 1.0, &[0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(variant_value(&zeta, 16.0, &[1.2]).unwrap().abs() < 1e-12);
        // saturation
        let big = Polynomial::constant(1, -1e6);
        assert!(variant_value(&big, 1.0, &[0.0]).unwrap().is_finite());
        assert_eq!(variant_value(&Polynomial::constant(1, 1e6), 4.0, &[0.0]).unwrap(), 0.25);
    }

    #[test]
    fn rejects_bad_shapes() {
        let f = vec![Polynomial::zero(2), Polynomial::zero(2)];
        assert!(SdeSystem::new(f.clone(), vec![vec![Polynomial::zero(2)]]).is_err());
        assert!(SdeSystem::new(vec![Polynomial::zero(1)], vec![vec![Polynomial::zero(2)]]).is_err());
        assert!(SemialgebraicSet::new(vec![]).is_err());
    }

    #[test]
    fn ball_membership() {
        let g = SemialgebraicSet::ball(&[1.0, -1.0], 0.5);
        assert!(g.contains(&[1.2, -1.1]));
        assert!(!g.contains(&[1.5, -1.0]));
    }
}
