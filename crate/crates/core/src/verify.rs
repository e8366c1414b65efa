//! Sampling checks of drift and variant certificates, Cantelli bounds and
//! the closed-form double-well certificate.
//!
//! Every check here evaluates polynomials only. The variant condition is
//! tested through `beta`, never through the exponential `U`, so nothing can
//! overflow.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{CompiledPoly, PolyError, Polynomial};
use crate::rng::{Domain, Stream};
use crate::sde::{variant_from_zeta, SdeError, SdeSystem, SemialgebraicSet};
use crate::simulate::{grid_points, variant_increments, SimError};
use crate::sos::{DriftCertificate, MonomialBasis, SosError, VariantCertificate};

/// Absolute slack allowed in every sampled inequality.
pub const CHECK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("box has dimension {got}, system has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Gram matrix is {rows}x{cols} but the basis has {basis} monomials")]
    GramSize { rows: usize, cols: usize, basis: usize },
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// No sampled point fell in the region the check is about.
    Vacuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    /// Point with the smallest margin; present unless the check is vacuous.
    pub witness: Option<Vec<f64>>,
    /// Smallest `rhs - lhs` over the relevant points. Negative means violated.
    pub margin: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub bounds: Vec<(f64, f64)>,
    pub resolution: usize,
    pub n_random: usize,
    pub seed: u64,
}

impl SamplingSpec {
    /// Splits `n_samples` into a full grid (at least 2 per axis, about half
    /// the budget) plus uniform random points.
    pub fn new(bounds: &[(f64, f64)], n_samples: usize, seed: u64) -> Self {
        let n = bounds.len().max(1) as i32;
        let mut resolution = ((n_samples as f64 / 2.0).powf(1.0 / n as f64).floor() as usize).max(2);
        while resolution > 2 && resolution.pow(n as u32) > n_samples {
            resolution -= 1;
        }
        let n_random = n_samples.saturating_sub(resolution.pow(n as u32));
        SamplingSpec { bounds: bounds.to_vec(), resolution, n_random, seed }
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut pts = grid_points(&self.bounds, self.resolution);
        let mut rng = Stream::new(self.seed, Domain::Sampling, u64::MAX);
        for _ in 0..self.n_random {
            pts.push(self.bounds.iter().map(|(lo, hi)| lo + (hi - lo) * rng.uniform()).collect());
        }
        pts
    }

    fn validate(&self, dim: usize) -> Result<(), VerifyError> {
        if self.bounds.len() != dim {
            return Err(VerifyError::DimensionMismatch { expected: dim, got: self.bounds.len() });
        }
        if self.bounds.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(VerifyError::InvalidArgument("box bounds must be finite with lo <= hi".into()));
        }
        Ok(())
    }
}

/// Derived V2 quantities for one sublevel radius `r` and window `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantQuantities {
    pub r: f64,
    /// Grid maximum of `zeta` over `{V <= r}` in the box.
    pub zeta_max: f64,
    /// `H(r) = U(zeta_max)`.
    pub h_bound: f64,
    /// Lower bound on `-AU` over the region: `exp(-lambda zeta_max) mu`.
    pub mu: f64,
    pub tau: f64,
    /// `mu tau / 4`.
    pub delta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Time window, equal to `tau`.
    pub h: f64,
    /// Largest empirical mean of `U(x(tau)) - U(x)` over the sampled starts.
    pub observed_mean_increment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
    pub sampling: SamplingSpec,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub quantities: Option<VariantQuantities>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Fail)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let status = match c.status {
                CheckStatus::Pass => "pass",
                CheckStatus::Fail => "FAIL",
                CheckStatus::Vacuous => "vacuous",
            };
            s.push_str(&format!("{:<28} {:<8} margin {:+.3e} over {} points", c.name, status, c.margin, c.points));
            if c.status == CheckStatus::Fail {
                if let Some(w) = &c.witness {
                    s.push_str(&format!(" witness {w:?}"));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Minimum of `slack(x)` over the points where `slack` returns a value.
fn run_check(name: &str, points: &[Vec<f64>], slack: impl Fn(&[f64]) -> Option<f64> + Sync) -> Check {
    let vals: Vec<Option<f64>> = points.par_iter().map(|x| slack(x)).collect();
    let mut worst: Option<(usize, f64)> = None;
    let mut count = 0;
    for (i, v) in vals.iter().enumerate() {
        if let Some(v) = *v {
            count += 1;
            // NaN counts as a violation
            let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
            if worst.is_none_or(|(_, w)| v < w) {
                worst = Some((i, v));
            }
        }
    }
    match worst {
        None => Check { name: name.into(), status: CheckStatus::Vacuous, witness: None, margin: f64::INFINITY, points: 0 },
        Some((i, m)) => Check {
            name: name.into(),
            status: if m >= -CHECK_TOL { CheckStatus::Pass } else { CheckStatus::Fail },
            witness: Some(points[i].clone()),
            margin: m,
            points: count,
        },
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Checks `V >= gamma0 |x|^2 - lambda0`, `AV <= lambda1 - gamma1 |x|^2`
/// and `AV <= 0` wherever `|x|^2 > lambda1 / gamma1`.
pub fn verify_drift(sys: &SdeSystem, cert: &DriftCertificate, sampling: &SamplingSpec) -> Result<VerificationReport, VerifyError> {
    sampling.validate(sys.n())?;
    let av = CompiledPoly::new(&sys.generator_apply(&cert.v)?);
    let v = CompiledPoly::new(&cert.v);
    let points = sampling.points();
    let radius2 = if cert.gamma1 > 0.0 { cert.lambda1 / cert.gamma1 } else { f64::INFINITY };
    let checks = vec![
        run_check("norm_like", &points, |x| Some(v.eval(x) - cert.gamma0 * norm2(x) + cert.lambda0)),
        run_check("generator_bound", &points, |x| Some(cert.lambda1 - cert.gamma1 * norm2(x) - av.eval(x))),
        run_check("nonpositive_outside_compact", &points, |x| (norm2(x) > radius2).then(|| -av.eval(x))),
    ];
    Ok(VerificationReport { checks, sampling: sampling.clone(), quantities: None })
}

/// Checks containment (`zeta <= 0` implies `g_i <= -alpha_i`) and
/// `beta <= -mu` on `{zeta >= 0}`.
pub fn verify_variant(
    sys: &SdeSystem,
    cert: &VariantCertificate,
    target: &SemialgebraicSet,
    sampling: &SamplingSpec,
) -> Result<VerificationReport, VerifyError> {
    sampling.validate(sys.n())?;
    if target.dim() != sys.n() || cert.zeta.dim() != sys.n() {
        return Err(VerifyError::DimensionMismatch { expected: sys.n(), got: target.dim().min(cert.zeta.dim()) });
    }
    if cert.alpha.len() != target.constraints().len() {
        return Err(VerifyError::InvalidArgument(format!(
            "{} alpha values for {} target constraints",
            cert.alpha.len(),
            target.constraints().len()
        )));
    }
    let beta = CompiledPoly::new(&sys.beta_poly(&cert.zeta, cert.lambda)?);
    let zeta = CompiledPoly::new(&cert.zeta);
    let gs: Vec<CompiledPoly> = target.constraints().iter().map(CompiledPoly::new).collect();
    let points = sampling.points();
    let checks = vec![
        run_check("containment", &points, |x| {
            (zeta.eval(x) <= 0.0).then(|| gs.iter().zip(&cert.alpha).map(|(g, a)| -a - g.eval(x)).fold(f64::INFINITY, f64::min))
        }),
        run_check("beta_decrease", &points, |x| (zeta.eval(x) >= 0.0).then(|| -cert.mu - beta.eval(x))),
    ];
    Ok(VerificationReport { checks, sampling: sampling.clone(), quantities: None })
}

/// `mu^2 tau^2 / (mu^2 tau^2 + 16 gamma)`.
pub fn cantelli_epsilon(mu: f64, tau: f64, gamma: f64) -> Result<f64, VerifyError> {
    if !(mu > 0.0) || !(tau > 0.0) || !(gamma >= 0.0) {
        return Err(VerifyError::InvalidArgument(format!("mu = {mu}, tau = {tau}, gamma = {gamma}")));
    }
    let a = (mu * tau).powi(2);
    Ok(a / (a + 16.0 * gamma))
}

/// Smallest `lambda` for which the closed-form double-well argument gives
/// `beta < 0` on `{zeta >= 0}`.
pub fn doublewell_lambda_threshold(rho: f64) -> Result<f64, VerifyError> {
    if !(rho > 0.0) {
        return Err(VerifyError::InvalidArgument(format!("rho = {rho}")));
    }
    Ok(2.5 + 1.0 / (2.0 * rho * rho))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    /// Largest sample variance plus three standard errors.
    pub gamma: f64,
    pub worst_point: Vec<f64>,
    pub max_mean_increment: f64,
    pub points: usize,
}

/// Monte Carlo estimate of `max_x Var(U(x(tau)) - U(x))` over a grid of
/// `resolution` points per axis. This is an estimate, not a certified
/// bound.
#[allow(clippy::too_many_arguments)]
pub fn estimate_variance_bound(
    sys: &SdeSystem,
    zeta: &Polynomial,
    lambda: f64,
    bounds: &[(f64, f64)],
    resolution: usize,
    tau: f64,
    n_samples: usize,
    seed: u64,
) -> Result<VarianceEstimate, VerifyError> {
    if bounds.len() != sys.n() {
        return Err(VerifyError::DimensionMismatch { expected: sys.n(), got: bounds.len() });
    }
    if resolution == 0 || n_samples < 2 {
        return Err(VerifyError::InvalidArgument("need resolution >= 1 and at least 2 samples".into()));
    }
    let points = grid_points(bounds, resolution);
    let stats: Vec<(f64, f64)> = points
        .par_iter()
        .map(|x| {
            let inc = variant_increments(sys, zeta, lambda, x, tau, n_samples, seed)?;
            let n = inc.len() as f64;
            let mean = inc.iter().sum::<f64>() / n;
            let var = inc.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let m4 = inc.iter().map(|d| (d - mean).powi(4)).sum::<f64>() / n;
            // large-sample standard error of the variance, no normality assumed
            let se = ((m4 - var * var).max(0.0) / n).sqrt();
            Ok((var + 3.0 * se, mean))
        })
        .collect::<Result<_, SimError>>()?;
    let (worst, &(gamma, _)) = stats.iter().enumerate().max_by(|a, b| a.1 .0.total_cmp(&b.1 .0)).expect("non-empty grid");
    let max_mean_increment = stats.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(VarianceEstimate { gamma, worst_point: points[worst].clone(), max_mean_increment, points: points.len() })
}

/// Configuration for [`variant_quantities`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantityConfig {
    pub r: f64,
    pub tau: f64,
    pub resolution: usize,
    pub n_samples: usize,
    pub seed: u64,
}

/// `H(r)`, `delta`, `epsilon` and `h` for a variant certificate on the
/// sublevel set `{V <= r}` of a drift certificate, restricted to `bounds`.
pub fn variant_quantities(
    sys: &SdeSystem,
    drift: &DriftCertificate,
    cert: &VariantCertificate,
    bounds: &[(f64, f64)],
    cfg: &QuantityConfig,
) -> Result<VariantQuantities, VerifyError> {
    if bounds.len() != sys.n() {
        return Err(VerifyError::DimensionMismatch { expected: sys.n(), got: bounds.len() });
    }
    if !(cert.mu > 0.0) {
        return Err(VerifyError::InvalidArgument(format!("certificate mu = {} is not positive", cert.mu)));
    }
    let v = CompiledPoly::new(&drift.v);
    let zeta = CompiledPoly::new(&cert.zeta);
    let sub: Vec<Vec<f64>> = grid_points(bounds, cfg.resolution).into_iter().filter(|x| v.eval(x) <= cfg.r).collect();
    if sub.is_empty() {
        return Err(VerifyError::InvalidArgument(format!("no grid point with V <= {}", cfg.r)));
    }
    let zeta_max = sub.iter().map(|x| zeta.eval(x)).fold(f64::NEG_INFINITY, f64::max);
    let mu = (-cert.lambda * zeta_max.max(0.0)).exp() * cert.mu;
    let var = estimate_variance_bound(sys, &cert.zeta, cert.lambda, bounds, cfg.resolution, cfg.tau, cfg.n_samples, cfg.seed)?;
    let epsilon = if mu > 0.0 { cantelli_epsilon(mu, cfg.tau, var.gamma)? } else { 0.0 };
    Ok(VariantQuantities {
        r: cfg.r,
        zeta_max,
        h_bound: variant_from_zeta(zeta_max, cert.lambda),
        mu,
        tau: cfg.tau,
        delta: mu * cfg.tau / 4.0,
        gamma: var.gamma,
        epsilon,
        h: cfg.tau,
        observed_mean_increment: var.max_mean_increment,
    })
}

/// Largest coefficient of `p - z^T Q z`.
pub fn gram_residual(p: &Polynomial, basis: &MonomialBasis, q: &DMatrix<f64>) -> Result<f64, VerifyError> {
    if q.nrows() != basis.len() || q.ncols() != basis.len() {
        return Err(VerifyError::GramSize { rows: q.nrows(), cols: q.ncols(), basis: basis.len() });
    }
    Ok(p.max_abs_diff(&basis.gram_polynomial(q)?)?)
}

/// Noise variance of the double-well example.
pub const DOUBLEWELL_SIGMA2: f64 = 0.4;

/// `dx = (-4x^3 + 4x) dt + sqrt(0.4) dW`.
pub fn doublewell_system() -> SdeSystem {
    let f = Polynomial::from_terms(1, [(-4.0, vec![3]), (4.0, vec![1])]).expect("1-d terms");
    let g = Polynomial::constant(1, DOUBLEWELL_SIGMA2.sqrt());
    SdeSystem::new(vec![f], vec![vec![g]]).expect("consistent shapes")
}

/// `G = (1 - 2 rho, 1 + 2 rho)` as `{(x - 1)^2 - 4 rho^2 < 0}`.
pub fn doublewell_target(rho: f64) -> SemialgebraicSet {
    SemialgebraicSet::ball(&[1.0], 2.0 * rho)
}

/// `V = x^2` with `AV = -8x^4 + 8x^2 + 0.4 <= 2.93125 - x^2`.
pub fn doublewell_drift_certificate() -> DriftCertificate {
    let v = Polynomial::from_terms(1, [(1.0, vec![2])]).expect("1-d term");
    // max of -8x^4 + 9x^2 + 0.4 is at x^2 = 9/16
    let lambda1 = 81.0 / 32.0 + 0.4;
    DriftCertificate {
        v,
        degree: 2,
        gamma0: 1.0,
        lambda0: 0.0,
        gamma1: 1.0,
        lambda1,
        compact_radius: lambda1.sqrt(),
        grams: Vec::new(),
    }
}

/// `zeta = (x - 1)^2 - rho^2` with the analytic bounds
/// `beta <= 2/5 - rho^2 (4 lambda / 5 - 2)` and `alpha = 3 rho^2`.
/// `mu` is clamped at zero below the threshold.
pub fn doublewell_certificate(rho: f64, lambda: f64) -> Result<VariantCertificate, VerifyError> {
    if !(rho > 0.0) || !(lambda > 0.0) {
        return Err(VerifyError::InvalidArgument(format!("rho = {rho}, lambda = {lambda}")));
    }
    let zeta = Polynomial::from_terms(1, [(1.0, vec![2]), (-2.0, vec![1]), (1.0 - rho * rho, vec![0])])?;
    let mu = (rho * rho * (0.8 * lambda - 2.0) - 0.4).max(0.0);
    let alpha = 3.0 * rho * rho;
    Ok(VariantCertificate {
        zeta,
        lambda,
        mu,
        alpha: vec![alpha],
        s_multipliers: Vec::new(),
        lambda_multiplier: Polynomial::zero(1),
        epsilon: mu.min(alpha),
        grams: Vec::new(),
        trace: Vec::new(),
    })
}
