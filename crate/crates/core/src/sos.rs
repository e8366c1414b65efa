//! Sum-of-squares programs lowered to semidefinite programs over Gram
//! matrices, plus the drift and variant certificate syntheses built on them.

use std::collections::BTreeMap;

use log::{debug, info};
use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::poly::{monomials_up_to, Monomial, PolyError, Polynomial};
use crate::sde::{SdeError, SdeSystem, SemialgebraicSet};
use crate::sdp::{
    certify_infeasibility, InteriorPoint, LinearForm, RayCheck, SdpBackend, SdpError, SdpOptions, SdpProblem,
    SdpStatus,
};

pub const DEFAULT_BASIS_CAP: usize = 500;
/// Max coefficient of `target - z^T Q z` accepted after re-expansion.
pub const RESIDUAL_TOL: f64 = 1e-6;
/// Gram matrices may dip this far below zero.
pub const EIG_TOL: f64 = -1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SosError {
    #[error("monomial basis for n={n}, half degree {half_degree} has {size} elements (cap {cap})")]
    BasisTooLarge { n: usize, half_degree: u32, size: usize, cap: usize },
    #[error("dimension must be at least 1")]
    EmptyDimension,
    #[error("polynomial dimension {got} does not match program dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degree {0} must be even and at least 2")]
    BadDegree(u32),
    #[error("check_sos needs a nonzero polynomial")]
    ZeroPolynomial,
    #[error("system has zero diffusion")]
    Noiseless,
    #[error("both the multiplier and the template are unknown; the constraint would be bilinear")]
    Bilinear,
    #[error("no drift certificate at degree {degree}; try a higher degree")]
    Infeasible { degree: u32, ray: Option<RayCheck> },
    #[error("SDP solver ended with status {0:?}")]
    Solver(SdpStatus),
    #[error("certificate failed re-verification: {label} residual {residual:e}, min eigenvalue {min_eig:e}")]
    Verification { label: String, residual: f64, min_eig: f64 },
    #[error("multiplier step infeasible at the initial template (lambda = {lambda})")]
    InitialInfeasible { lambda: f64 },
    #[error("alternation stalled at lambda = {lambda} with epsilon trace {trace:?}")]
    Stalled { lambda: f64, trace: Vec<f64> },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonomialBasis {
    n: usize,
    half_degree: u32,
    monomials: Vec<Monomial>,
}

fn binomial(n: usize, k: usize) -> usize {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc.min(usize::MAX as u128) as usize
}

impl MonomialBasis {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_degree(&self) -> u32 {
        self.half_degree
    }

    pub fn monomials(&self) -> &[Monomial] {
        &self.monomials
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    /// `z(x)`.
    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        self.monomials.iter().map(|m| m.evaluate(x)).collect()
    }

    /// Expands `z^T Q z` into a polynomial.
    pub fn gram_polynomial(&self, q: &DMatrix<f64>) -> Result<Polynomial, SosError> {
        let s = self.len();
        if q.nrows() != s || q.ncols() != s {
            return Err(SosError::DimensionMismatch { expected: s, got: q.nrows() });
        }
        let mut terms = Vec::with_capacity(s * (s + 1) / 2);
        for i in 0..s {
            for j in i..s {
                let c = if i == j { q[(i, i)] } else { q[(i, j)] + q[(j, i)] };
                terms.push((c, self.monomials[i].mul(&self.monomials[j]).exps().to_vec()));
            }
        }
        Ok(Polynomial::from_terms(self.n, terms)?)
    }
}

pub fn build_basis(n: usize, half_degree: u32) -> Result<MonomialBasis, SosError> {
    build_basis_capped(n, half_degree, DEFAULT_BASIS_CAP)
}

/// All monomials of degree at most `half_degree`, graded-lex ordered.
pub fn build_basis_capped(n: usize, half_degree: u32, cap: usize) -> Result<MonomialBasis, SosError> {
    if n == 0 {
        return Err(SosError::EmptyDimension);
    }
    let size = binomial(n + half_degree as usize, half_degree as usize);
    if size > cap {
        return Err(SosError::BasisTooLarge { n, half_degree, size, cap });
    }
    let monomials = monomials_up_to(n, half_degree);
    debug_assert_eq!(monomials.len(), size);
    Ok(MonomialBasis { n, half_degree, monomials })
}

/// A scalar decision variable. `Psd` names the entry `(row, col)` of a Gram
/// block with `row <= col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKey {
    Free(usize),
    Psd { block: usize, row: usize, col: usize },
}

/// `constant + sum coeff * var`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    pub constant: f64,
    pub coeffs: BTreeMap<VarKey, f64>,
}

impl AffineExpr {
    pub fn constant(c: f64) -> Self {
        AffineExpr { constant: c, coeffs: BTreeMap::new() }
    }

    pub fn var(key: VarKey) -> Self {
        let mut e = AffineExpr::default();
        e.coeffs.insert(key, 1.0);
        e
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.coeffs.is_empty()
    }

    pub fn add_scaled(&mut self, other: &AffineExpr, s: f64) {
        if s == 0.0 {
            return;
        }
        self.constant += s * other.constant;
        for (k, v) in &other.coeffs {
            let e = self.coeffs.entry(*k).or_insert(0.0);
            *e += s * v;
            if *e == 0.0 {
                self.coeffs.remove(k);
            }
        }
    }

    pub fn plus(&self, other: &AffineExpr) -> AffineExpr {
        let mut out = self.clone();
        out.add_scaled(other, 1.0);
        out
    }

    pub fn minus(&self, other: &AffineExpr) -> AffineExpr {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn scaled(&self, s: f64) -> AffineExpr {
        let mut out = AffineExpr::default();
        out.add_scaled(self, s);
        out
    }
}

/// A polynomial whose coefficients are affine in the decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LinPoly {
    dim: usize,
    terms: BTreeMap<Monomial, AffineExpr>,
}

impl LinPoly {
    pub fn zero(dim: usize) -> Self {
        LinPoly { dim, terms: BTreeMap::new() }
    }

    pub fn from_poly(p: &Polynomial) -> Self {
        let mut out = LinPoly::zero(p.dim());
        for (m, c) in p.terms() {
            out.add_term(m.clone(), &AffineExpr::constant(c), 1.0);
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &AffineExpr)> {
        self.terms.iter()
    }

    pub fn coeff(&self, m: &Monomial) -> Option<&AffineExpr> {
        self.terms.get(m)
    }

    /// Highest degree with a nonzero coefficient expression.
    pub fn degree(&self) -> u32 {
        self.terms.keys().next_back().map(|m| m.degree()).unwrap_or(0)
    }

    fn add_term(&mut self, m: Monomial, e: &AffineExpr, s: f64) {
        let slot = self.terms.entry(m.clone()).or_default();
        slot.add_scaled(e, s);
        if slot.is_zero() {
            self.terms.remove(&m);
        }
    }

    fn check(&self, dim: usize) -> Result<(), SosError> {
        if self.dim != dim {
            return Err(SosError::DimensionMismatch { expected: self.dim, got: dim });
        }
        Ok(())
    }

    /// `self += e * p`.
    pub fn add_expr_times_poly(&mut self, e: &AffineExpr, p: &Polynomial) -> Result<(), SosError> {
        self.check(p.dim())?;
        for (m, c) in p.terms() {
            self.add_term(m.clone(), e, c);
        }
        Ok(())
    }

    pub fn add(&self, other: &LinPoly) -> Result<LinPoly, SosError> {
        self.check(other.dim)?;
        let mut out = self.clone();
        for (m, e) in &other.terms {
            out.add_term(m.clone(), e, 1.0);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &LinPoly) -> Result<LinPoly, SosError> {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> LinPoly {
        let mut out = LinPoly::zero(self.dim);
        for (m, e) in &self.terms {
            out.add_term(m.clone(), e, s);
        }
        out
    }

    pub fn add_constant_expr(&self, e: &AffineExpr) -> LinPoly {
        let mut out = self.clone();
        out.add_term(Monomial::one(self.dim), e, 1.0);
        out
    }

    pub fn mul_poly(&self, p: &Polynomial) -> Result<LinPoly, SosError> {
        self.check(p.dim())?;
        let mut out = LinPoly::zero(self.dim);
        for (m, e) in &self.terms {
            for (pm, c) in p.terms() {
                out.add_term(m.mul(pm), e, c);
            }
        }
        Ok(out)
    }
}

/// An equality `target - z^T Q z = 0` tying a target to a Gram block.
#[derive(Debug, Clone)]
pub struct SosConstraint {
    pub label: String,
    pub target: LinPoly,
    pub basis: MonomialBasis,
    pub gram_block_id: usize,
    pub margin: f64,
}

/// A Gram block introduced directly as an SOS polynomial unknown.
#[derive(Debug, Clone)]
struct SosUnknown {
    label: String,
    basis: MonomialBasis,
    block: usize,
    margin: f64,
}

/// `p = z^T Q z` with its re-verified residual and spectrum.
#[derive(Debug, Clone)]
pub struct GramDecomposition {
    pub label: String,
    pub basis: MonomialBasis,
    pub gram: DMatrix<f64>,
    pub target: Polynomial,
    pub residual: f64,
    pub min_eigenvalue: f64,
}

impl GramDecomposition {
    pub fn new(label: &str, basis: MonomialBasis, gram: DMatrix<f64>, target: Polynomial) -> Result<Self, SosError> {
        let expanded = basis.gram_polynomial(&gram)?;
        let residual = target.max_abs_diff(&expanded)?;
        let min_eigenvalue = min_eig(&gram);
        Ok(GramDecomposition { label: label.to_string(), basis, gram, target, residual, min_eigenvalue })
    }

    pub fn is_valid(&self) -> bool {
        self.residual <= RESIDUAL_TOL && self.min_eigenvalue >= EIG_TOL
    }

    /// The coefficient mismatch can be folded into the Gram matrix without
    /// losing positive semidefiniteness, so the target is exactly SOS.
    pub fn is_rigorous(&self) -> bool {
        self.min_eigenvalue >= self.basis.len() as f64 * self.residual
    }

    fn ensure_valid(&self) -> Result<(), SosError> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(SosError::Verification {
                label: self.label.clone(),
                residual: self.residual,
                min_eig: self.min_eigenvalue,
            })
        }
    }
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// Builder for a linear program over free scalars and Gram blocks.
#[derive(Debug, Clone)]
pub struct SosProgram {
    dim: usize,
    n_free: usize,
    blocks: Vec<usize>,
    eqs: Vec<AffineExpr>,
    constraints: Vec<SosConstraint>,
    unknowns: Vec<SosUnknown>,
    objective: AffineExpr,
    basis_cap: usize,
    margin: f64,
}

pub enum SosOutcome {
    Feasible(SosSolution),
    /// `None` when the equalities alone are inconsistent.
    Infeasible(Option<RayCheck>),
    Failed(SdpStatus),
}

#[derive(Debug, Clone)]
pub struct SosSolution {
    free: Vec<f64>,
    blocks: Vec<DMatrix<f64>>,
    pub objective: f64,
    /// One entry per SOS constraint, then one per SOS unknown.
    pub grams: Vec<GramDecomposition>,
    pub iterations: usize,
}

impl SosSolution {
    pub fn value(&self, e: &AffineExpr) -> f64 {
        let mut acc = e.constant;
        for (k, v) in &e.coeffs {
            acc += v * match *k {
                VarKey::Free(i) => self.free[i],
                VarKey::Psd { block, row, col } => self.blocks[block][(row, col)],
            };
        }
        acc
    }

    pub fn poly_value(&self, p: &LinPoly) -> Result<Polynomial, SosError> {
        let terms: Vec<(f64, Vec<u32>)> = p.terms.iter().map(|(m, e)| (self.value(e), m.exps().to_vec())).collect();
        Ok(Polynomial::from_terms(p.dim, terms)?)
    }

    pub fn gram(&self, label: &str) -> Option<&GramDecomposition> {
        self.grams.iter().find(|g| g.label == label)
    }
}

impl SosProgram {
    pub fn new(dim: usize) -> Self {
        SosProgram {
            dim,
            n_free: 0,
            blocks: Vec::new(),
            eqs: Vec::new(),
            constraints: Vec::new(),
            unknowns: Vec::new(),
            objective: AffineExpr::default(),
            basis_cap: DEFAULT_BASIS_CAP,
            margin: 0.0,
        }
    }

    /// Every Gram matrix added afterwards is `Q' + δI` with `Q' ⪰ 0`, so a
    /// feasible point is strictly inside the cone by `δ`.
    pub fn with_margin(mut self, delta: f64) -> Self {
        self.margin = delta;
        self
    }

    pub fn with_basis_cap(mut self, cap: usize) -> Self {
        self.basis_cap = cap;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn constraints(&self) -> &[SosConstraint] {
        &self.constraints
    }

    pub fn free_var(&mut self) -> AffineExpr {
        self.n_free += 1;
        AffineExpr::var(VarKey::Free(self.n_free - 1))
    }

    /// A scalar constrained to be nonnegative (a 1x1 PSD block).
    pub fn nonneg_var(&mut self) -> AffineExpr {
        self.blocks.push(1);
        AffineExpr::var(VarKey::Psd { block: self.blocks.len() - 1, row: 0, col: 0 })
    }

    /// Polynomial with one free coefficient per given monomial.
    pub fn free_poly(&mut self, monomials: &[Monomial]) -> LinPoly {
        let mut p = LinPoly::zero(self.dim);
        for m in monomials {
            let v = self.free_var();
            p.add_term(m.clone(), &v, 1.0);
        }
        p
    }

    /// An unknown SOS polynomial of the given even degree.
    pub fn sos_poly(&mut self, label: &str, degree: u32) -> Result<LinPoly, SosError> {
        if !degree.is_multiple_of(2) {
            return Err(SosError::BadDegree(degree));
        }
        let basis = build_basis_capped(self.dim, degree / 2, self.basis_cap)?;
        let block = self.push_gram(&basis);
        self.unknowns.push(SosUnknown { label: label.to_string(), basis: basis.clone(), block, margin: self.margin });
        Ok(gram_linpoly(&basis, block, self.margin))
    }

    fn push_gram(&mut self, basis: &MonomialBasis) -> usize {
        self.blocks.push(basis.len());
        self.blocks.len() - 1
    }

    /// `target` in Σ, with basis of half degree `ceil(deg / 2)`.
    pub fn add_sos(&mut self, label: &str, target: LinPoly) -> Result<usize, SosError> {
        target.check(self.dim)?;
        let kappa = target.degree().div_ceil(2);
        let basis = build_basis_capped(self.dim, kappa, self.basis_cap)?;
        let block = self.push_gram(&basis);
        let diff = target.sub(&gram_linpoly(&basis, block, self.margin))?;
        let mut all: Vec<&Monomial> = diff.terms.keys().collect();
        all.dedup();
        for m in all {
            self.eqs.push(diff.terms[m].clone());
        }
        self.constraints.push(SosConstraint { label: label.to_string(), target, basis, gram_block_id: block, margin: self.margin });
        Ok(self.constraints.len() - 1)
    }

    pub fn add_eq(&mut self, e: AffineExpr) {
        self.eqs.push(e);
    }

    /// `e >= 0` through a nonnegative slack.
    pub fn add_ge(&mut self, e: AffineExpr) {
        let s = self.nonneg_var();
        self.eqs.push(e.minus(&s));
    }

    pub fn maximize(&mut self, e: AffineExpr) {
        self.objective = e;
    }

    pub fn to_sdp(&self) -> SdpProblem {
        self.lower(&Reduction::identity(&self.blocks))
    }

    /// The SDP restricted to the kept rows and columns of each Gram block;
    /// entries touching a dropped index are fixed at zero.
    fn lower(&self, red: &Reduction) -> SdpProblem {
        let sizes = red.keep.iter().map(Vec::len).collect();
        let mut p = SdpProblem::new(sizes, self.n_free);
        let form = |e: &AffineExpr| {
            let mut f = LinearForm::new();
            for (k, v) in &e.coeffs {
                match *k {
                    VarKey::Free(i) => f.add_free(i, *v),
                    // the form counts off-diagonal entries twice
                    VarKey::Psd { block, row, col } => {
                        if let (Some(r), Some(c)) = (red.index(block, row), red.index(block, col)) {
                            f.add_psd(block, r, c, if row == col { *v } else { 0.5 * v });
                        }
                    }
                }
            }
            f
        };
        for e in &self.eqs {
            p.add_constraint(form(e), -e.constant);
        }
        p.set_objective(form(&self.objective));
        p
    }

    /// Gram diagonal entries that the equalities pin to zero force their
    /// whole row to zero; dropping those rows repeatedly restores strict
    /// feasibility or exposes strong infeasibility. Returns `None` when
    /// nothing can be dropped.
    fn facial_reduction(&self) -> Option<Reduction> {
        let mut red = Reduction::identity(&self.blocks);
        let mut changed = false;
        loop {
            // column index of every surviving variable
            let mut cols: BTreeMap<VarKey, usize> = BTreeMap::new();
            for i in 0..self.n_free {
                let n = cols.len();
                cols.insert(VarKey::Free(i), n);
            }
            for (b, keep) in red.keep.iter().enumerate() {
                for (a, &r) in keep.iter().enumerate() {
                    for &c in &keep[a..] {
                        let n = cols.len();
                        cols.insert(VarKey::Psd { block: b, row: r, col: c }, n);
                    }
                }
            }
            let m = self.eqs.len();
            if m == 0 || cols.is_empty() {
                break;
            }
            let mut a = DMatrix::<f64>::zeros(m, cols.len());
            let mut rhs = nalgebra::DVector::<f64>::zeros(m);
            for (i, e) in self.eqs.iter().enumerate() {
                rhs[i] = -e.constant;
                for (k, v) in &e.coeffs {
                    if let Some(&j) = cols.get(k) {
                        a[(i, j)] = *v;
                    }
                }
            }
            let svd = a.svd(true, true);
            let (Some(_u), Some(v_t)) = (&svd.u, &svd.v_t) else { break };
            let smax = svd.singular_values.max();
            let tol = 1e-10 * smax.max(1.0);
            let rank_rows: Vec<usize> = (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > tol).collect();
            let Ok(x_ls) = svd.solve(&rhs, tol) else { break };
            let scale = 1e-9 * (1.0 + rhs.amax());
            let mut drop: Vec<(usize, usize)> = Vec::new();
            for (b, keep) in red.keep.iter().enumerate() {
                for &r in keep {
                    let j = cols[&VarKey::Psd { block: b, row: r, col: r }];
                    let in_row_space: f64 = rank_rows.iter().map(|&k| v_t[(k, j)].powi(2)).sum();
                    if in_row_space >= 1.0 - 1e-9 && x_ls[j].abs() <= scale {
                        drop.push((b, r));
                    }
                }
            }
            if drop.is_empty() {
                break;
            }
            changed = true;
            for (b, r) in drop {
                red.keep[b].retain(|&k| k != r);
            }
        }
        changed.then_some(red)
    }

    fn attempt(&self, backend: &dyn SdpBackend, red: &Reduction) -> Result<SosOutcome, SosError> {
        let sdp = self.lower(red);
        let sol = match backend.solve(&sdp) {
            Ok(s) => s,
            Err(SdpError::InconsistentEqualities { .. }) => return Ok(SosOutcome::Infeasible(None)),
            Err(e) => return Err(e.into()),
        };
        debug!("sdp status {:?} after {} iterations, residuals {:?}", sol.status, sol.iterations, sol.residuals);
        match sol.status {
            SdpStatus::Optimal => {}
            SdpStatus::PrimalInfeasible => {
                let ray = certify_infeasibility(&sdp, &sol)?;
                return Ok(if ray.valid { SosOutcome::Infeasible(Some(ray)) } else { SosOutcome::Failed(SdpStatus::NumericalFailure) });
            }
            other => return Ok(SosOutcome::Failed(other)),
        }
        let mut out = SosSolution {
            free: sol.free.clone(),
            blocks: red.lift(&self.blocks, &sol.blocks),
            objective: 0.0,
            grams: Vec::new(),
            iterations: sol.iterations,
        };
        out.objective = out.value(&self.objective);
        for c in &self.constraints {
            let target = out.poly_value(&c.target)?;
            let gram = shifted(&out.blocks[c.gram_block_id], c.margin);
            let g = GramDecomposition::new(&c.label, c.basis.clone(), gram, target)?;
            g.ensure_valid()?;
            out.grams.push(g);
        }
        for u in &self.unknowns {
            let gram = shifted(&out.blocks[u.block], u.margin);
            let target = u.basis.gram_polynomial(&gram)?;
            let g = GramDecomposition::new(&u.label, u.basis.clone(), gram, target)?;
            g.ensure_valid()?;
            out.grams.push(g);
        }
        for (b, m) in out.blocks.iter().enumerate() {
            let e = min_eig(m);
            if e < EIG_TOL {
                return Err(SosError::Verification { label: format!("block {b}"), residual: 0.0, min_eig: e });
            }
        }
        Ok(SosOutcome::Feasible(out))
    }

    pub fn solve(&self, opts: &SdpOptions) -> Result<SosOutcome, SosError> {
        self.solve_with(&InteriorPoint { options: opts.clone() })
    }

    /// Solves directly; if the solver cannot decide, retries once on the
    /// facially reduced program.
    pub fn solve_with(&self, backend: &dyn SdpBackend) -> Result<SosOutcome, SosError> {
        let first = self.attempt(backend, &Reduction::identity(&self.blocks))?;
        if !matches!(first, SosOutcome::Failed(_)) {
            return Ok(first);
        }
        let Some(red) = self.facial_reduction() else {
            return Ok(first);
        };
        debug!("retrying after facial reduction: {:?}", red.keep.iter().map(Vec::len).collect::<Vec<_>>());
        let second = self.attempt(backend, &red)?;
        Ok(if matches!(second, SosOutcome::Failed(_)) { first } else { second })
    }
}

/// Rows and columns of each Gram block kept in the lowered SDP.
#[derive(Debug, Clone)]
struct Reduction {
    keep: Vec<Vec<usize>>,
}

impl Reduction {
    fn identity(sizes: &[usize]) -> Self {
        Reduction { keep: sizes.iter().map(|s| (0..*s).collect()).collect() }
    }

    fn index(&self, block: usize, orig: usize) -> Option<usize> {
        self.keep[block].iter().position(|&k| k == orig)
    }

    fn lift(&self, sizes: &[usize], reduced: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        sizes
            .iter()
            .zip(&self.keep)
            .zip(reduced)
            .map(|((&s, keep), r)| {
                let mut full = DMatrix::zeros(s, s);
                for (a, &i) in keep.iter().enumerate() {
                    for (b, &j) in keep.iter().enumerate() {
                        full[(i, j)] = r[(a, b)];
                    }
                }
                full
            })
            .collect()
    }
}

fn shifted(q: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    q + DMatrix::identity(q.nrows(), q.ncols()) * delta
}

/// `z^T (Q + δI) z` as a polynomial in the Gram entries of `block`.
fn gram_linpoly(basis: &MonomialBasis, block: usize, delta: f64) -> LinPoly {
    let mut p = LinPoly::zero(basis.n);
    let z = &basis.monomials;
    for zi in z {
        if delta != 0.0 {
            p.add_term(zi.mul(zi), &AffineExpr::constant(delta), 1.0);
        }
    }
    for i in 0..z.len() {
        for j in i..z.len() {
            let w = if i == j { 1.0 } else { 2.0 };
            p.add_term(z[i].mul(&z[j]), &AffineExpr::var(VarKey::Psd { block, row: i, col: j }), w);
        }
    }
    p
}

#[derive(Debug, Clone)]
pub enum SosCheck {
    Sos(GramDecomposition),
    NotSos(NotSosReason),
}

#[derive(Debug, Clone, PartialEq)]
pub enum NotSosReason {
    OddDegree,
    /// The Gram feasibility program is infeasible; the validated dual ray
    /// is attached when one was found.
    Infeasible(Option<RayCheck>),
}

pub fn check_sos(p: &Polynomial, opts: &SdpOptions) -> Result<SosCheck, SosError> {
    if p.is_zero() {
        return Err(SosError::ZeroPolynomial);
    }
    if !p.degree().is_multiple_of(2) {
        return Ok(SosCheck::NotSos(NotSosReason::OddDegree));
    }
    let mut prog = SosProgram::new(p.dim());
    prog.add_sos("p", LinPoly::from_poly(p))?;
    match prog.solve(opts)? {
        SosOutcome::Feasible(mut sol) => Ok(SosCheck::Sos(sol.grams.remove(0))),
        SosOutcome::Infeasible(ray) => Ok(SosCheck::NotSos(NotSosReason::Infeasible(ray))),
        SosOutcome::Failed(status) => Err(SosError::Solver(status)),
    }
}

#[derive(Debug, Clone)]
pub struct DriftParams {
    pub gamma_min: f64,
    /// Gram matrices must dominate this multiple of the identity; keeps the
    /// solver away from boundary points that only fit within tolerance.
    pub margin: f64,
    pub sdp: SdpOptions,
}

impl Default for DriftParams {
    fn default() -> Self {
        DriftParams { gamma_min: 1e-3, margin: 1e-6, sdp: SdpOptions::default() }
    }
}

/// `V - γ0|x|² + λ0 ∈ Σ` and `-AV - γ1|x|² + λ1 ∈ Σ`, so that `AV <= λ1`
/// everywhere and `AV <= 0` outside `{|x|² <= λ1/γ1}`.
#[derive(Debug, Clone)]
pub struct DriftCertificate {
    pub v: Polynomial,
    pub degree: u32,
    pub gamma0: f64,
    pub lambda0: f64,
    pub gamma1: f64,
    pub lambda1: f64,
    pub compact_radius: f64,
    pub grams: Vec<GramDecomposition>,
}

impl DriftCertificate {
    /// `d` in the drift condition.
    pub fn d(&self) -> f64 {
        self.lambda1
    }
}

pub fn synthesize_drift(sys: &SdeSystem, deg_v: u32, params: &DriftParams) -> Result<DriftCertificate, SosError> {
    if deg_v < 2 || !deg_v.is_multiple_of(2) {
        return Err(SosError::BadDegree(deg_v));
    }
    if sys.is_noiseless() {
        return Err(SosError::Noiseless);
    }
    if !(params.gamma_min > 0.0) {
        return Err(SosError::InvalidParam(format!("gamma_min = {}", params.gamma_min)));
    }
    if !(params.margin >= 0.0) {
        return Err(SosError::InvalidParam(format!("margin = {}", params.margin)));
    }
    let n = sys.n();
    let mut prog = SosProgram::new(n).with_margin(params.margin);
    // no constant term: it would only duplicate λ0
    let monos: Vec<Monomial> = monomials_up_to(n, deg_v).into_iter().filter(|m| m.degree() > 0).collect();
    let v = prog.free_poly(&monos);
    let gmin = AffineExpr::constant(params.gamma_min);
    let gamma0 = gmin.plus(&prog.nonneg_var());
    let gamma1 = gmin.plus(&prog.nonneg_var());
    let lambda0 = prog.free_var();
    let lambda1 = prog.nonneg_var();
    let norm2 = Polynomial::norm_squared(n);

    let mut av = LinPoly::zero(n);
    for (m, e) in v.terms() {
        let gen = sys.generator_apply(&Polynomial::from_monomial(m.clone(), 1.0))?;
        av.add_expr_times_poly(e, &gen)?;
    }
    let mut t0 = v.clone();
    t0.add_expr_times_poly(&gamma0.scaled(-1.0), &norm2)?;
    let t0 = t0.add_constant_expr(&lambda0);
    prog.add_sos("V", t0)?;
    let mut t1 = av.scale(-1.0);
    t1.add_expr_times_poly(&gamma1.scaled(-1.0), &norm2)?;
    let t1 = t1.add_constant_expr(&lambda1);
    prog.add_sos("-AV", t1)?;
    prog.maximize(lambda1.scaled(-1.0));

    match prog.solve(&params.sdp)? {
        SosOutcome::Feasible(sol) => {
            if let Some(g) = sol.grams.iter().find(|g| !g.is_rigorous()) {
                return Err(SosError::Verification { label: g.label.clone(), residual: g.residual, min_eig: g.min_eigenvalue });
            }
            let g0 = sol.value(&gamma0);
            let g1 = sol.value(&gamma1);
            let l1 = sol.value(&lambda1).max(0.0);
            Ok(DriftCertificate {
                v: sol.poly_value(&v)?,
                degree: deg_v,
                gamma0: g0,
                lambda0: sol.value(&lambda0),
                gamma1: g1,
                lambda1: l1,
                compact_radius: (l1 / g1).sqrt(),
                grams: sol.grams,
            })
        }
        SosOutcome::Infeasible(ray) => Err(SosError::Infeasible { degree: deg_v, ray }),
        SosOutcome::Failed(status) => Err(SosError::Solver(status)),
    }
}

/// Sign of `g_i` in the containment constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContainmentForm {
    /// `-g_i + S_i ζ - α_i ∈ Σ`, giving `ζ <= 0 ⇒ g_i <= -α_i`.
    #[default]
    Implication,
    /// `g_i + S_i ζ - α_i ∈ Σ` taken literally from the joint program.
    Literal,
}

/// One factor of a product term: either already fixed or still unknown.
#[derive(Debug, Clone)]
pub enum Factor<'a> {
    Fixed(&'a Polynomial),
    Unknown(&'a LinPoly),
}

/// An SOS multiplier: a fresh unknown of the given degree or a fixed one.
#[derive(Debug, Clone)]
pub enum Multiplier<'a> {
    Free { degree: u32 },
    Fixed(&'a Polynomial),
}

fn product(prog: &mut SosProgram, label: &str, mult: &Multiplier, zeta: &Factor) -> Result<(LinPoly, Option<LinPoly>), SosError> {
    match (mult, zeta) {
        (Multiplier::Free { degree }, Factor::Fixed(z)) => {
            let s = prog.sos_poly(label, *degree)?;
            Ok((s.mul_poly(z)?, Some(s)))
        }
        (Multiplier::Fixed(s), Factor::Fixed(z)) => Ok((LinPoly::from_poly(&s.mul(z)?), None)),
        (Multiplier::Fixed(s), Factor::Unknown(z)) => Ok((z.mul_poly(s)?, None)),
        (Multiplier::Free { .. }, Factor::Unknown(_)) => Err(SosError::Bilinear),
    }
}

#[derive(Debug, Clone)]
pub struct ContainmentParts {
    pub constraint_ids: Vec<usize>,
    /// Unknown multipliers (`None` where the multiplier was fixed).
    pub multipliers: Vec<Option<LinPoly>>,
    pub alpha: Vec<AffineExpr>,
}

/// For each `g_i`: `∓g_i + S_i ζ - α_i ∈ Σ`, `S_i ∈ Σ`, `α_i >= ε`.
pub fn containment_constraints(
    prog: &mut SosProgram,
    zeta: &Factor,
    set: &SemialgebraicSet,
    multipliers: &[Multiplier],
    eps: &AffineExpr,
    form: ContainmentForm,
) -> Result<ContainmentParts, SosError> {
    if multipliers.len() != set.constraints().len() {
        return Err(SosError::InvalidParam(format!(
            "{} multipliers for {} constraints",
            multipliers.len(),
            set.constraints().len()
        )));
    }
    let mut parts = ContainmentParts { constraint_ids: Vec::new(), multipliers: Vec::new(), alpha: Vec::new() };
    for (i, (g, mult)) in set.constraints().iter().zip(multipliers).enumerate() {
        if let Multiplier::Free { degree } = mult {
            if degree % 2 != 0 {
                return Err(SosError::BadDegree(*degree));
            }
        }
        let (sz, s) = product(prog, &format!("S{}", i + 1), mult, zeta)?;
        let alpha = eps.plus(&prog.nonneg_var());
        let sign = match form {
            ContainmentForm::Implication => -1.0,
            ContainmentForm::Literal => 1.0,
        };
        let target = LinPoly::from_poly(&g.scale(sign)).add(&sz)?.add_constant_expr(&alpha.scaled(-1.0));
        parts.constraint_ids.push(prog.add_sos(&format!("containment{}", i + 1), target)?);
        parts.multipliers.push(s);
        parts.alpha.push(alpha);
    }
    Ok(parts)
}

#[derive(Debug, Clone)]
pub struct DecreaseParts {
    pub constraint_id: usize,
    pub multiplier: Option<LinPoly>,
}

/// `-β - μ - Λ ζ ∈ Σ`, `Λ ∈ Σ`, so that `β <= -μ` on `{ζ >= 0}`.
pub fn mean_decrease_constraint(
    prog: &mut SosProgram,
    beta: &LinPoly,
    zeta: &Factor,
    mu: &AffineExpr,
    lambda_mult: &Multiplier,
) -> Result<DecreaseParts, SosError> {
    if let Multiplier::Free { degree } = lambda_mult {
        if degree % 2 != 0 {
            return Err(SosError::BadDegree(*degree));
        }
    }
    let (lz, l) = product(prog, "Lambda", lambda_mult, zeta)?;
    let target = beta.scale(-1.0).sub(&lz)?.add_constant_expr(&mu.scaled(-1.0));
    let id = prog.add_sos("decrease", target)?;
    Ok(DecreaseParts { constraint_id: id, multiplier: l })
}

#[derive(Debug, Clone)]
pub struct VariantParams {
    /// Template degree for ζ; defaults to the larger of the initial degree
    /// and the degree of a potential for the drift.
    pub deg_zeta: Option<u32>,
    pub deg_s: u32,
    pub deg_lambda: u32,
    pub lambda_grid: Vec<f64>,
    pub max_iters: usize,
    pub eps_target: f64,
    pub stall_tol: f64,
    pub stall_window: usize,
    pub containment: ContainmentForm,
    /// Box half-width of a template step, relative to `max(1, max |coeff|)`.
    pub trust_radius: f64,
    /// Lower bound on ε in every step; keeps programs bounded when no
    /// positive margin exists yet.
    pub eps_floor: f64,
    /// Half-width and points per axis of the grid used to centre a default
    /// initial template.
    pub init_box: f64,
    pub init_resolution: usize,
    pub sdp: SdpOptions,
}

impl Default for VariantParams {
    fn default() -> Self {
        VariantParams {
            deg_zeta: None,
            deg_s: 2,
            deg_lambda: 2,
            lambda_grid: (0..7).map(|k| f64::from(1u32 << k)).collect(),
            max_iters: 20,
            eps_target: 1e-4,
            stall_tol: 1e-9,
            stall_window: 3,
            containment: ContainmentForm::Implication,
            trust_radius: 0.2,
            eps_floor: -1.0,
            init_box: 5.0,
            init_resolution: 41,
            sdp: SdpOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantCertificate {
    pub zeta: Polynomial,
    pub lambda: f64,
    pub mu: f64,
    pub alpha: Vec<f64>,
    pub s_multipliers: Vec<Polynomial>,
    pub lambda_multiplier: Polynomial,
    pub epsilon: f64,
    pub grams: Vec<GramDecomposition>,
    /// Best ε after each multiplier step.
    pub trace: Vec<f64>,
}

/// Result of one multiplier step.
struct MStep {
    zeta: Polynomial,
    mu: f64,
    alpha: Vec<f64>,
    s: Vec<Polynomial>,
    lam: Polynomial,
    eps: f64,
    grams: Vec<GramDecomposition>,
}

enum StepResult<T> {
    Ok(T),
    Infeasible,
    Failed(String),
}

fn outcome_to_step<T>(
    out: Result<SosOutcome, SosError>,
    f: impl FnOnce(SosSolution) -> Result<T, SosError>,
) -> StepResult<T> {
    match out {
        Ok(SosOutcome::Feasible(sol)) => match f(sol) {
            Ok(v) => StepResult::Ok(v),
            Err(e) => StepResult::Failed(e.to_string()),
        },
        Ok(SosOutcome::Infeasible(_)) => StepResult::Infeasible,
        Ok(SosOutcome::Failed(status)) => StepResult::Failed(format!("{status:?}")),
        Err(e) => StepResult::Failed(e.to_string()),
    }
}

fn eps_bounds(prog: &mut SosProgram, lambda: f64, floor: f64) -> AffineExpr {
    let eps = prog.free_var();
    prog.add_ge(eps.minus(&AffineExpr::constant(floor)));
    prog.add_ge(AffineExpr::constant(lambda).minus(&eps));
    eps
}

fn multiplier_step(
    sys: &SdeSystem,
    set: &SemialgebraicSet,
    zeta: &Polynomial,
    lambda: f64,
    params: &VariantParams,
) -> StepResult<MStep> {
    let build = || -> Result<(SosProgram, AffineExpr, AffineExpr, ContainmentParts, DecreaseParts), SosError> {
        let mut prog = SosProgram::new(sys.n());
        let eps = eps_bounds(&mut prog, lambda, params.eps_floor);
        let mults: Vec<Multiplier> = set.constraints().iter().map(|_| Multiplier::Free { degree: params.deg_s }).collect();
        let cont = containment_constraints(&mut prog, &Factor::Fixed(zeta), set, &mults, &eps, params.containment)?;
        let beta = LinPoly::from_poly(&sys.beta_poly(zeta, lambda)?);
        let mu = eps.plus(&prog.nonneg_var());
        let dec = mean_decrease_constraint(
            &mut prog,
            &beta,
            &Factor::Fixed(zeta),
            &mu,
            &Multiplier::Free { degree: params.deg_lambda },
        )?;
        prog.maximize(eps.clone());
        Ok((prog, eps, mu, cont, dec))
    };
    let (prog, eps, mu, cont, dec) = match build() {
        Ok(v) => v,
        Err(e) => return StepResult::Failed(e.to_string()),
    };
    outcome_to_step(prog.solve(&params.sdp), |sol| {
        let s = cont
            .multipliers
            .iter()
            .map(|m| sol.poly_value(m.as_ref().expect("free multiplier")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MStep {
            zeta: zeta.clone(),
            mu: sol.value(&mu),
            alpha: cont.alpha.iter().map(|a| sol.value(a)).collect(),
            s,
            lam: sol.poly_value(dec.multiplier.as_ref().expect("free multiplier"))?,
            eps: sol.value(&eps),
            grams: sol.grams,
        })
    })
}

/// Linearization of `β` around `ζ_k` in the template coefficients. The
/// dropped term `½λ|gᵀ∇(ζ - ζ_k)|²` is SOS, so the linear model is an
/// upper bound on `β`.
fn beta_linearized(sys: &SdeSystem, zeta_k: &Polynomial, template: &[(Monomial, AffineExpr)], lambda: f64) -> Result<LinPoly, SosError> {
    let n = sys.n();
    let grad_k = zeta_k.gradient();
    let mut out = LinPoly::zero(n);
    for (m, e) in template {
        let mp = Polynomial::from_monomial(m.clone(), 1.0);
        let gen = sys.generator_apply(&mp)?;
        let cross = sys.gram_form(&grad_k, &mp.gradient())?;
        out.add_expr_times_poly(e, &gen.sub(&cross.scale(lambda))?)?;
    }
    let quad_k = sys.gram_form(&grad_k, &grad_k)?;
    out.add_expr_times_poly(&AffineExpr::constant(1.0), &quad_k.scale(0.5 * lambda))?;
    Ok(out)
}

fn template_step(
    sys: &SdeSystem,
    set: &SemialgebraicSet,
    m: &MStep,
    deg_zeta: u32,
    lambda: f64,
    params: &VariantParams,
) -> StepResult<Polynomial> {
    let build = || -> Result<(SosProgram, LinPoly), SosError> {
        let n = sys.n();
        let mut prog = SosProgram::new(n);
        let eps = eps_bounds(&mut prog, lambda, params.eps_floor);
        let monos = monomials_up_to(n, deg_zeta);
        let zeta = prog.free_poly(&monos);
        let template: Vec<(Monomial, AffineExpr)> = zeta.terms().map(|(m, e)| (m.clone(), e.clone())).collect();
        let radius = params.trust_radius * m.zeta.max_abs_coeff().max(1.0);
        for (mono, e) in &template {
            let c = m.zeta.coeff(mono);
            prog.add_ge(e.minus(&AffineExpr::constant(c - radius)));
            prog.add_ge(AffineExpr::constant(c + radius).minus(e));
        }
        let mults: Vec<Multiplier> = m.s.iter().map(Multiplier::Fixed).collect();
        containment_constraints(&mut prog, &Factor::Unknown(&zeta), set, &mults, &eps, params.containment)?;
        let beta = beta_linearized(sys, &m.zeta, &template, lambda)?;
        let mu = eps.plus(&prog.nonneg_var());
        mean_decrease_constraint(&mut prog, &beta, &Factor::Unknown(&zeta), &mu, &Multiplier::Fixed(&m.lam))?;
        prog.maximize(eps);
        Ok((prog, zeta))
    };
    let (prog, zeta) = match build() {
        Ok(v) => v,
        Err(e) => return StepResult::Failed(e.to_string()),
    };
    outcome_to_step(prog.solve(&params.sdp), |sol| sol.poly_value(&zeta))
}

/// Default initial template: `g_1` for a single constraint, otherwise the
/// sum of the constraints shifted to be negative at the deepest grid point
/// of the target.
pub fn default_initial_zeta(set: &SemialgebraicSet, half_width: f64, resolution: usize) -> Result<Polynomial, SosError> {
    let gs = set.constraints();
    if gs.len() == 1 {
        return Ok(gs[0].clone());
    }
    let n = set.dim();
    let res = resolution.max(2);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let total = res.checked_pow(n as u32).unwrap_or(usize::MAX).min(1 << 22);
    let mut x = vec![0.0; n];
    for idx in 0..total {
        let mut k = idx;
        for xi in x.iter_mut() {
            *xi = -half_width + 2.0 * half_width * (k % res) as f64 / (res - 1) as f64;
            k /= res;
        }
        let depth = gs.iter().map(|g| -g.evaluate(&x).unwrap_or(f64::NEG_INFINITY)).fold(f64::INFINITY, f64::min);
        if best.as_ref().is_none_or(|(d, _)| depth > *d) {
            best = Some((depth, x.clone()));
        }
    }
    let (depth, center) = best.expect("nonempty grid");
    let mut sum = Polynomial::zero(n);
    for g in gs {
        sum = sum.add(g)?;
    }
    let at_center = sum.evaluate(&center)?;
    let margin = 0.5 * depth.max(0.0);
    if at_center < 0.0 {
        return Ok(sum);
    }
    Ok(sum.add_constant(-at_center - margin.max(1e-3)))
}

fn default_deg_zeta(sys: &SdeSystem, zeta0: &Polynomial) -> u32 {
    let fdeg = sys.drift().iter().map(Polynomial::degree).max().unwrap_or(1);
    let pot = (fdeg + 1).div_ceil(2) * 2;
    pot.max(zeta0.degree()).max(2)
}

/// Alternating multiplier/template steps at a fixed λ.
pub fn alternate_at_lambda(
    sys: &SdeSystem,
    set: &SemialgebraicSet,
    zeta0: &Polynomial,
    lambda: f64,
    params: &VariantParams,
) -> Result<VariantCertificate, SosError> {
    if !(lambda > 0.0) {
        return Err(SosError::InvalidParam(format!("lambda = {lambda}")));
    }
    if zeta0.dim() != sys.n() || set.dim() != sys.n() {
        return Err(SosError::DimensionMismatch { expected: sys.n(), got: zeta0.dim() });
    }
    let deg_zeta = params.deg_zeta.unwrap_or_else(|| default_deg_zeta(sys, zeta0));
    let mut best = match multiplier_step(sys, set, zeta0, lambda, params) {
        StepResult::Ok(m) => m,
        StepResult::Infeasible => return Err(SosError::InitialInfeasible { lambda }),
        StepResult::Failed(msg) => {
            debug!("lambda {lambda}: initial multiplier step failed: {msg}");
            return Err(SosError::InitialInfeasible { lambda });
        }
    };
    let mut trace = vec![best.eps];
    let mut flat = 0;
    for iter in 1..=params.max_iters {
        if best.eps >= params.eps_target {
            break;
        }
        let prev = best.eps;
        match template_step(sys, set, &best, deg_zeta, lambda, params) {
            StepResult::Ok(zeta) => match multiplier_step(sys, set, &zeta, lambda, params) {
                StepResult::Ok(m) if m.eps > best.eps => best = m,
                StepResult::Ok(m) => debug!("lambda {lambda}: no gain ({} after template step)", m.eps),
                StepResult::Infeasible => debug!("lambda {lambda}: multiplier step infeasible"),
                StepResult::Failed(msg) => debug!("lambda {lambda}: multiplier step failed: {msg}"),
            },
            StepResult::Infeasible => debug!("lambda {lambda}: template step infeasible"),
            StepResult::Failed(msg) => debug!("lambda {lambda}: template step failed: {msg}"),
        }
        trace.push(best.eps);
        debug!("lambda {lambda}: iteration {iter}, epsilon {}", best.eps);
        if best.eps - prev < params.stall_tol {
            flat += 1;
            if flat >= params.stall_window {
                break;
            }
        } else {
            flat = 0;
        }
    }
    if !(best.eps > 0.0) {
        return Err(SosError::Stalled { lambda, trace });
    }
    Ok(VariantCertificate {
        zeta: best.zeta,
        lambda,
        mu: best.mu,
        alpha: best.alpha,
        s_multipliers: best.s,
        lambda_multiplier: best.lam,
        epsilon: best.eps,
        grams: best.grams,
        trace,
    })
}

/// ε values this close (relative) count as equal when picking the best λ.
pub const EPS_TIE_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub enum LambdaOutcome {
    Certified(Box<VariantCertificate>),
    InitialInfeasible,
    Stalled { trace: Vec<f64> },
    Error(String),
}

impl LambdaOutcome {
    pub fn certificate(&self) -> Option<&VariantCertificate> {
        match self {
            LambdaOutcome::Certified(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantSweep {
    pub best: Option<VariantCertificate>,
    pub outcomes: Vec<(f64, LambdaOutcome)>,
}

/// Runs [`alternate_at_lambda`] over the λ grid in parallel and keeps the
/// largest ε, preferring the smaller λ on ties.
pub fn synthesize_variant_alternating(
    sys: &SdeSystem,
    set: &SemialgebraicSet,
    zeta0: Option<&Polynomial>,
    params: &VariantParams,
) -> Result<VariantSweep, SosError> {
    if params.lambda_grid.is_empty() {
        return Err(SosError::InvalidParam("empty lambda grid".into()));
    }
    if let Some(bad) = params.lambda_grid.iter().find(|l| !(**l > 0.0)) {
        return Err(SosError::InvalidParam(format!("lambda = {bad}")));
    }
    if sys.is_noiseless() {
        return Err(SosError::Noiseless);
    }
    let zeta0 = match zeta0 {
        Some(z) => z.clone(),
        None => default_initial_zeta(set, params.init_box, params.init_resolution)?,
    };
    let runs: Vec<Result<VariantCertificate, SosError>> = params
        .lambda_grid
        .par_iter()
        .map(|&lambda| alternate_at_lambda(sys, set, &zeta0, lambda, params))
        .collect();
    let mut outcomes = Vec::new();
    for (&lambda, run) in params.lambda_grid.iter().zip(runs) {
        let outcome = match run {
            Ok(cert) => LambdaOutcome::Certified(Box::new(cert)),
            Err(SosError::InitialInfeasible { .. }) => LambdaOutcome::InitialInfeasible,
            Err(SosError::Stalled { trace, .. }) => LambdaOutcome::Stalled { trace },
            Err(e) => LambdaOutcome::Error(e.to_string()),
        };
        info!("lambda {lambda}: {outcome:?}");
        outcomes.push((lambda, outcome));
    }
    Ok(VariantSweep { best: pick_best(&outcomes).cloned(), outcomes })
}

fn pick_best(outcomes: &[(f64, LambdaOutcome)]) -> Option<&VariantCertificate> {
    let certs: Vec<&VariantCertificate> = outcomes.iter().filter_map(|(_, o)| o.certificate()).collect();
    let top = certs.iter().map(|c| c.epsilon).fold(f64::NEG_INFINITY, f64::max);
    let band = EPS_TIE_TOL * top.abs().max(1e-12);
    certs
        .into_iter()
        .filter(|c| c.epsilon >= top - band)
        .min_by(|a, b| a.lambda.total_cmp(&b.lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p1(terms: &[(f64, u32)]) -> Polynomial {
        Polynomial::from_terms(1, terms.iter().map(|(c, e)| (*c, vec![*e]))).unwrap()
    }

    fn opts() -> SdpOptions {
        SdpOptions::default()
    }

    #[test]
    fn basis_sizes() {
        let b = build_basis(1, 2).unwrap();
        assert_eq!(b.monomials().iter().map(|m| m.exps()[0]).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(build_basis(2, 1).unwrap().len(), 3);
        assert_eq!(build_basis(2, 3).unwrap().len(), 10);
        assert!(matches!(build_basis(6, 6), Err(SosError::BasisTooLarge { size: 924, .. })));
        assert!(build_basis_capped(6, 6, 1000).is_ok());
        let b = build_basis(3, 3).unwrap();
        assert!(b.monomials().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn perfect_square_is_sos() {
        let p = p1(&[(1.0, 0), (-2.0, 1), (1.0, 2)]);
        let SosCheck::Sos(g) = check_sos(&p, &opts()).unwrap() else { panic!("not certified") };
        assert!(g.residual <= RESIDUAL_TOL);
        assert!(g.min_eigenvalue >= EIG_TOL);
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!((&g.gram - expected).norm() < 1e-6);
    }

    #[test]
    fn negative_square_is_rejected() {
        let p = p1(&[(-1.0, 2)]);
        match check_sos(&p, &opts()).unwrap() {
            SosCheck::NotSos(NotSosReason::Infeasible(_)) => {}
            other => panic!("{other:?}"),
        }
        let odd = p1(&[(1.0, 3)]);
        assert!(matches!(check_sos(&odd, &opts()).unwrap(), SosCheck::NotSos(NotSosReason::OddDegree)));
        assert!(matches!(check_sos(&Polynomial::zero(1), &opts()), Err(SosError::ZeroPolynomial)));
    }

    #[test]
    fn interval_containment_identity() {
        // G = {x² - 1 < 0}, ζ = x² - 0.25, S = 1: best margin 0.75
        let set = SemialgebraicSet::new(vec![p1(&[(-1.0, 0), (1.0, 2)])]).unwrap();
        let zeta = p1(&[(-0.25, 0), (1.0, 2)]);
        let one = p1(&[(1.0, 0)]);
        let mut prog = SosProgram::new(1);
        let eps = prog.free_var();
        prog.add_ge(AffineExpr::constant(10.0).minus(&eps));
        let parts = containment_constraints(
            &mut prog,
            &Factor::Fixed(&zeta),
            &set,
            &[Multiplier::Fixed(&one)],
            &eps,
            ContainmentForm::Implication,
        )
        .unwrap();
        prog.maximize(eps.clone());
        let SosOutcome::Feasible(sol) = prog.solve(&opts()).unwrap() else { panic!() };
        assert!((sol.value(&eps) - 0.75).abs() < 1e-6);
        assert!((sol.value(&parts.alpha[0]) - 0.75).abs() < 1e-6);
    }

    #[test]
    fn zeta_equal_to_target_has_no_margin() {
        let g = p1(&[(-1.0, 0), (1.0, 2)]);
        let set = SemialgebraicSet::new(vec![g.clone()]).unwrap();
        let one = p1(&[(1.0, 0)]);
        let mut prog = SosProgram::new(1);
        let eps = prog.free_var();
        prog.add_ge(eps.plus(&AffineExpr::constant(1.0)));
        containment_constraints(&mut prog, &Factor::Fixed(&g), &set, &[Multiplier::Fixed(&one)], &eps, ContainmentForm::Implication)
            .unwrap();
        prog.maximize(eps.clone());
        let SosOutcome::Feasible(sol) = prog.solve(&opts()).unwrap() else { panic!() };
        assert!(sol.value(&eps).abs() < 1e-6);
    }

    #[test]
    fn double_well_closed_form_containment() {
        let rho: f64 = 0.2;
        let g1 = p1(&[(1.0 - 4.0 * rho * rho, 0), (-2.0, 1), (1.0, 2)]);
        let zeta = p1(&[(1.0 - rho * rho, 0), (-2.0, 1), (1.0, 2)]);
        let residual = g1.scale(-1.0).add(&zeta).unwrap().add_constant(-3.0 * rho * rho);
        assert!(residual.max_abs_coeff() < 1e-15);
    }

    #[test]
    fn mean_decrease_examples() {
        // β = -1, μ = 0.5, Λ = 0
        let mut prog = SosProgram::new(1);
        let zero = Polynomial::zero(1);
        let zeta = p1(&[(1.0, 0), (-1.0, 2)]);
        mean_decrease_constraint(
            &mut prog,
            &LinPoly::from_poly(&p1(&[(-1.0, 0)])),
            &Factor::Fixed(&zeta),
            &AffineExpr::constant(0.5),
            &Multiplier::Fixed(&zero),
        )
        .unwrap();
        let SosOutcome::Feasible(sol) = prog.solve(&opts()).unwrap() else { panic!() };
        assert!((sol.grams[0].gram[(0, 0)] - 0.5).abs() < 1e-8);

        // β = x² - 2, ζ = 1 - x², μ = 1, Λ = 1 cancels exactly
        let mut prog = SosProgram::new(1);
        let one = p1(&[(1.0, 0)]);
        mean_decrease_constraint(
            &mut prog,
            &LinPoly::from_poly(&p1(&[(-2.0, 0), (1.0, 2)])),
            &Factor::Fixed(&zeta),
            &AffineExpr::constant(1.0),
            &Multiplier::Fixed(&one),
        )
        .unwrap();
        let SosOutcome::Feasible(sol) = prog.solve(&opts()).unwrap() else { panic!() };
        assert!(sol.grams[0].target.is_zero());
    }

    #[test]
    fn bilinear_products_are_refused() {
        let mut prog = SosProgram::new(1);
        let z = prog.free_poly(&monomials_up_to(1, 2));
        let set = SemialgebraicSet::new(vec![p1(&[(-1.0, 0), (1.0, 2)])]).unwrap();
        let eps = prog.free_var();
        let r = containment_constraints(&mut prog, &Factor::Unknown(&z), &set, &[Multiplier::Free { degree: 2 }], &eps, ContainmentForm::Implication);
        assert!(matches!(r, Err(SosError::Bilinear)));
    }

    #[test]
    fn default_zeta_for_two_constraints_is_negative_inside() {
        // box (-1, 1) as two half-lines
        let set = SemialgebraicSet::new(vec![p1(&[(-1.0, 0), (1.0, 1)]), p1(&[(-1.0, 0), (-1.0, 1)])]).unwrap();
        let z = default_initial_zeta(&set, 3.0, 31).unwrap();
        assert!(z.evaluate(&[0.0]).unwrap() < 0.0);
        let single = SemialgebraicSet::ball(&[0.5], 1.0);
        assert_eq!(default_initial_zeta(&single, 3.0, 31).unwrap(), single.constraints()[0]);
    }
}
