//! Reachability classification of linear SDEs `dx = A x dt + B dW` from the
//! spectrum of `A`, plus the Lyapunov-equation drift certificate for the
//! Hurwitz case.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::Polynomial;
use crate::sde::{SdeError, SdeSystem};

/// Default relative band for deciding that an eigenvalue sits on the
/// imaginary axis.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Eigenvalues closer than this (relative to `max(1, ||A||_F)`) are grouped
/// into one cluster before multiplicities are counted.
const CLUSTER_REL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinClassError {
    #[error("matrix A must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("B has {rows} rows but A is {n}x{n}")]
    ShapeMismatch { rows: usize, n: usize },
    #[error("B must be nonzero")]
    ZeroNoise,
    #[error("B has rank {rank} < {n}; the classification requires full row rank")]
    RankDeficient { rank: usize, n: usize },
    #[error("tolerance must be positive")]
    BadTolerance,
    #[error("eigenvalue cluster at real part {real_part:e} is neither clearly on nor off the imaginary axis")]
    AmbiguousSpectrum { real_part: f64 },
    #[error("A is not Hurwitz (spectral abscissa {0})")]
    NotHurwitz(f64),
    #[error("Q must be symmetric positive semidefinite and nonzero")]
    BadWeight,
    #[error("Lyapunov system is singular")]
    Singular,
    #[error("non-finite entry in matrix")]
    NonFinite,
    #[error(transparent)]
    Sde(#[from] SdeError),
}

/// One eigenvalue cluster: its centroid and algebraic multiplicity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
    pub multiplicity: usize,
    pub geometric_multiplicity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub eigenvalues: Vec<Eigenvalue>,
    pub spectral_abscissa: f64,
    pub neutral_dim: usize,
    pub has_defective_neutral_block: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    AlmostSurelyReachable,
    NotAlmostSurelyReachable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rationale {
    Hurwitz,
    UnstableSpectrum,
    DefectiveNeutralBlock,
    NeutralDimAtMost2,
    NeutralDimAtLeast3,
}

impl Rationale {
    pub fn verdict(self) -> Verdict {
        match self {
            Rationale::Hurwitz | Rationale::NeutralDimAtMost2 => Verdict::AlmostSurelyReachable,
            _ => Verdict::NotAlmostSurelyReachable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachabilityVerdict {
    pub verdict: Verdict,
    pub rationale: Rationale,
    pub summary: SpectralSummary,
}

/// `dx = A x dt + B dW`.
#[derive(Debug, Clone)]
pub struct LinearSde {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    full_row_rank: bool,
}

impl LinearSde {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, LinClassError> {
        if a.nrows() != a.ncols() {
            return Err(LinClassError::NotSquare { rows: a.nrows(), cols: a.ncols() });
        }
        if b.nrows() != a.nrows() {
            return Err(LinClassError::ShapeMismatch { rows: b.nrows(), n: a.nrows() });
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(LinClassError::NonFinite);
        }
        if b.iter().all(|v| *v == 0.0) {
            return Err(LinClassError::ZeroNoise);
        }
        let full_row_rank = numerical_rank(&b, DEFAULT_TOL) == a.nrows();
        Ok(LinearSde { a, b, full_row_rank })
    }

    pub fn from_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Self, LinClassError> {
        LinearSde::new(dense(a)?, dense(b)?)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_full_row_rank(&self) -> bool {
        self.full_row_rank
    }

    pub fn to_system(&self) -> Result<SdeSystem, LinClassError> {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        Ok(SdeSystem::linear(&rows(&self.a), &rows(&self.b))?)
    }
}

/// Row-major nested vectors to a dense matrix.
pub fn dense(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, LinClassError> {
    let r = rows.len();
    let c = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|row| row.len() != c) {
        return Err(LinClassError::NotSquare { rows: r, cols: c });
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().fold(0.0f64, |a, b| a.max(*b));
    let thresh = tol * smax.max(1.0);
    sv.iter().filter(|s| **s > thresh).count()
}

/// Eigenvalue clusters of `A` with algebraic and geometric multiplicities.
///
/// The geometric multiplicity of a cluster with centroid `c` is
/// `n - rank(A - c I)` with rank threshold `tol * max(1, ||A||_F)`.
pub fn spectral_summary(a: &DMatrix<f64>, tol: f64) -> Result<SpectralSummary, LinClassError> {
    if a.nrows() != a.ncols() {
        return Err(LinClassError::NotSquare { rows: a.nrows(), cols: a.ncols() });
    }
    if !(tol > 0.0) {
        return Err(LinClassError::BadTolerance);
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(LinClassError::NonFinite);
    }
    let n = a.nrows();
    let scale = a.norm().max(1.0);
    let band = tol * scale;
    let raw: Vec<Complex<f64>> = a.clone().complex_eigenvalues().iter().copied().collect();

    // single-linkage clustering
    let link = (CLUSTER_REL * scale).max(band);
    let mut cluster_of: Vec<usize> = (0..raw.len()).collect();
    for i in 0..raw.len() {
        for j in 0..i {
            if (raw[i] - raw[j]).norm() <= link {
                let (ci, cj) = (cluster_of[i], cluster_of[j]);
                for c in cluster_of.iter_mut() {
                    if *c == ci {
                        *c = cj;
                    }
                }
            }
        }
    }
    let mut roots: Vec<usize> = cluster_of.clone();
    roots.sort_unstable();
    roots.dedup();

    let ac = a.map(|v| Complex::new(v, 0.0));
    let mut eigenvalues = Vec::new();
    for root in roots {
        let members: Vec<Complex<f64>> =
            raw.iter().zip(&cluster_of).filter(|(_, c)| **c == root).map(|(z, _)| *z).collect();
        let k = members.len();
        let centroid = members.iter().fold(Complex::new(0.0, 0.0), |s, z| s + z) / k as f64;
        let shifted = &ac - DMatrix::<Complex<f64>>::identity(n, n) * centroid;
        let sv = shifted.svd(false, false).singular_values;
        let geometric = sv.iter().filter(|s| **s <= band).count().clamp(1, k);
        eigenvalues.push(Eigenvalue { re: centroid.re, im: centroid.im, multiplicity: k, geometric_multiplicity: geometric });
    }
    eigenvalues.sort_by(|x, y| {
        y.re.partial_cmp(&x.re).unwrap().then(x.im.partial_cmp(&y.im).unwrap())
    });

    let spectral_abscissa = eigenvalues.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
    let mut neutral_dim = 0;
    let mut defective = false;
    for e in &eigenvalues {
        if e.re.abs() <= band {
            neutral_dim += e.multiplicity;
            defective |= e.geometric_multiplicity < e.multiplicity;
        } else if e.re.abs() <= link {
            return Err(LinClassError::AmbiguousSpectrum { real_part: e.re });
        }
    }
    Ok(SpectralSummary { eigenvalues, spectral_abscissa, neutral_dim, has_defective_neutral_block: defective })
}

/// Case split on the spectrum of `A`: Hurwitz, unstable, defective on the
/// axis, or semisimple on the axis decided by the neutral dimension.
pub fn classify(sys: &LinearSde, tol: f64) -> Result<ReachabilityVerdict, LinClassError> {
    if !sys.full_row_rank {
        return Err(LinClassError::RankDeficient { rank: numerical_rank(&sys.b, tol), n: sys.n() });
    }
    let summary = spectral_summary(&sys.a, tol)?;
    let band = tol * sys.a.norm().max(1.0);
    let rationale = if summary.spectral_abscissa < -band {
        Rationale::Hurwitz
    } else if summary.spectral_abscissa > band {
        Rationale::UnstableSpectrum
    } else if summary.has_defective_neutral_block {
        Rationale::DefectiveNeutralBlock
    } else if summary.neutral_dim <= 2 {
        Rationale::NeutralDimAtMost2
    } else {
        Rationale::NeutralDimAtLeast3
    };
    Ok(ReachabilityVerdict { verdict: rationale.verdict(), rationale, summary })
}

/// Solves `A^T P + P A = -Q` through the Kronecker-product linear system.
pub fn lyapunov_solve(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, LinClassError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinClassError::NotSquare { rows: n, cols: a.ncols() });
    }
    if q.nrows() != n || q.ncols() != n {
        return Err(LinClassError::BadWeight);
    }
    let asym = (q - q.transpose()).norm();
    if asym > 1e-12 * q.norm().max(1.0) || q.norm() == 0.0 {
        return Err(LinClassError::BadWeight);
    }
    let qmin = q.clone().symmetric_eigen().eigenvalues.min();
    if qmin < -1e-12 * q.norm() {
        return Err(LinClassError::BadWeight);
    }
    let summary = spectral_summary(a, DEFAULT_TOL)?;
    if summary.spectral_abscissa >= -DEFAULT_TOL * a.norm().max(1.0) {
        return Err(LinClassError::NotHurwitz(summary.spectral_abscissa));
    }
    // vec(A^T P + P A) = (I (x) A^T + A^T (x) I) vec(P), column-major vec
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let k = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DMatrix::from_iterator(n * n, 1, q.iter().map(|v| -v));
    let sol = k.lu().solve(&rhs).ok_or(LinClassError::Singular)?;
    let p = DMatrix::from_iterator(n, n, sol.iter().copied());
    Ok((&p + p.transpose()) * 0.5)
}

/// A quadratic drift certificate `V = x^T P x` for a Hurwitz linear SDE.
#[derive(Debug, Clone)]
pub struct LyapunovDrift {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub v: Polynomial,
    pub generator: Polynomial,
    /// `tr(P B B^T)`; the compact set is `{x : x^T Q x <= offset}`.
    pub offset: f64,
}

pub fn quadratic_form(p: &DMatrix<f64>) -> Polynomial {
    let n = p.nrows();
    let mut terms = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let mut e = vec![0u32; n];
            e[i] += 1;
            e[j] += 1;
            terms.push((p[(i, j)], e));
        }
    }
    Polynomial::from_terms(n, terms).expect("consistent dimension")
}

pub fn drift_from_lyapunov(sys: &LinearSde, q: &DMatrix<f64>) -> Result<LyapunovDrift, LinClassError> {
    let p = lyapunov_solve(&sys.a, q)?;
    let v = quadratic_form(&p);
    let generator = sys.to_system()?.generator_apply(&v)?;
    let offset = (&p * &sys.b * sys.b.transpose()).trace();
    Ok(LyapunovDrift { p, q: q.clone(), v, generator, offset })
}
