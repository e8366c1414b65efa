//! Euler–Maruyama simulation, hitting-time CDFs and one-step decrease
//! probabilities.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::poly::{CompiledPoly, PolyError, Polynomial};
use crate::rng::{Domain, Stream};
use crate::sde::{variant_from_zeta, CompiledSystem, SdeSystem, SemialgebraicSet};

/// States beyond this magnitude end a trajectory as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e12;
pub const BOOTSTRAP_RESAMPLES: usize = 200;
/// Sub-steps per decrease window `tau`.
pub const DECREASE_SUBSTEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("expected a point of dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dynamics produced a non-finite value at step {step}")]
    Dynamics { step: usize },
    #[error("no grid point satisfies zeta > 0")]
    EmptyGrid,
    #[error(transparent)]
    Poly(#[from] PolyError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub t_max: f64,
    pub n_traj: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidConfig(format!("dt = {}", self.dt)));
        }
        if !(self.t_max >= self.dt && self.t_max.is_finite()) {
            return Err(SimError::InvalidConfig(format!("t_max = {} must be at least dt = {}", self.t_max, self.dt)));
        }
        if self.n_traj == 0 {
            return Err(SimError::InvalidConfig("n_traj must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_max / self.dt).round() as usize
    }
}

/// One Euler–Maruyama map with scratch space for `f`, `g` and the noise.
struct Stepper<'a> {
    sys: &'a CompiledSystem,
    dt: f64,
    sqrt_dt: f64,
    noiseless: bool,
    /// `g` was evaluated once up front.
    const_g: bool,
    f: Vec<f64>,
    g: Vec<f64>,
    w: Vec<f64>,
}

enum StepOutcome {
    Ok,
    Diverged,
}

impl<'a> Stepper<'a> {
    fn new(sys: &'a CompiledSystem, dt: f64) -> Self {
        let const_g = sys.has_constant_diffusion();
        let mut g = vec![0.0; sys.n() * sys.m()];
        if const_g {
            sys.diffusion_into(&vec![0.0; sys.n()], &mut g);
        }
        Stepper {
            sys,
            dt,
            sqrt_dt: dt.sqrt(),
            noiseless: sys.is_noiseless(),
            const_g,
            f: vec![0.0; sys.n()],
            g,
            w: vec![0.0; sys.m()],
        }
    }

    fn step(&mut self, x: &mut [f64], rng: &mut Stream, index: usize) -> Result<StepOutcome, SimError> {
        let m = self.sys.m();
        self.sys.drift_into(x, &mut self.f);
        if !self.noiseless {
            if !self.const_g {
                self.sys.diffusion_into(x, &mut self.g);
            }
            rng.fill_normal(&mut self.w);
        }
        for (i, xi) in x.iter_mut().enumerate() {
            let mut dx = self.f[i] * self.dt;
            if !self.noiseless {
                let row = &self.g[i * m..(i + 1) * m];
                dx += self.sqrt_dt * row.iter().zip(&self.w).map(|(g, w)| g * w).sum::<f64>();
            }
            *xi += dx;
        }
        if x.iter().any(|v| v.is_nan()) {
            return Err(SimError::Dynamics { step: index });
        }
        if x.iter().any(|v| !(v.abs() <= DIVERGENCE_BOUND)) {
            return Ok(StepOutcome::Diverged);
        }
        Ok(StepOutcome::Ok)
    }
}

fn check_point(sys: &SdeSystem, x: &[f64]) -> Result<(), SimError> {
    if x.len() != sys.n() {
        return Err(SimError::DimensionMismatch { expected: sys.n(), got: x.len() });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub dt: f64,
    /// Row-major, one state per recorded step starting with `x0`.
    pub states: Vec<f64>,
    pub diverged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,time");
        for i in 1..=self.dim {
            let _ = write!(s, ",x{i}");
        }
        s.push('\n');
        for k in 0..self.len() {
            let _ = write!(s, "{k},{:.16e}", k as f64 * self.dt);
            for v in self.state(k) {
                let _ = write!(s, ",{v:.16e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Trajectory `index` of the seeded family; stops early with `diverged` set
/// once any component leaves `[-1e12, 1e12]`.
pub fn euler_maruyama(sys: &SdeSystem, x0: &[f64], cfg: &SimConfig, index: u64) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    check_point(sys, x0)?;
    let compiled = sys.compile();
    let mut stepper = Stepper::new(&compiled, cfg.dt);
    let mut rng = Stream::new(cfg.seed, Domain::Trajectory, index);
    let mut x = x0.to_vec();
    let steps = cfg.steps();
    let mut states = Vec::with_capacity((steps + 1) * x.len());
    states.extend_from_slice(&x);
    let mut diverged = false;
    for k in 1..=steps {
        let out = stepper.step(&mut x, &mut rng, k)?;
        states.extend_from_slice(&x);
        if matches!(out, StepOutcome::Diverged) {
            diverged = true;
            break;
        }
    }
    Ok(Trajectory { dim: x0.len(), dt: cfg.dt, states, diverged })
}

/// First step index at which the state lies in `set`, if any.
fn first_hit(
    compiled: &CompiledSystem,
    set: &SemialgebraicSet,
    x0: &[f64],
    cfg: &SimConfig,
    index: u64,
) -> Result<Option<usize>, SimError> {
    if set.contains(x0) {
        return Ok(Some(0));
    }
    let mut stepper = Stepper::new(compiled, cfg.dt);
    let mut rng = Stream::new(cfg.seed, Domain::Trajectory, index);
    let mut x = x0.to_vec();
    for k in 1..=cfg.steps() {
        if let StepOutcome::Diverged = stepper.step(&mut x, &mut rng, k)? {
            return Ok(None);
        }
        if set.contains(&x) {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// Empirical `P(tau_G <= t)` with bootstrap percentile bands.
#[derive(Debug, Clone, PartialEq)]
pub struct HittingCdf {
    pub horizons: Vec<f64>,
    pub p_mean: Vec<f64>,
    pub p10: Vec<f64>,
    pub p90: Vec<f64>,
    /// Hit time per trajectory, `None` when the target was not reached.
    pub hit_times: Vec<Option<f64>>,
}

impl HittingCdf {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,p_mean,p10,p90\n");
        for i in 0..self.horizons.len() {
            let _ = writeln!(s, "{:.16e},{:.16e},{:.16e},{:.16e}", self.horizons[i], self.p_mean[i], self.p10[i], self.p90[i]);
        }
        s
    }

    pub fn terminal(&self) -> f64 {
        *self.p_mean.last().expect("at least one horizon")
    }
}

/// Linear-interpolation quantile of sorted data (Hyndman–Fan type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn cdf_at(hits: &[Option<f64>], idx: impl Iterator<Item = usize>, horizons: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut n = 0usize;
    for i in idx {
        n += 1;
        if let Some(t) = hits[i] {
            for (o, h) in out.iter_mut().zip(horizons) {
                if t <= *h {
                    *o += 1.0;
                }
            }
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
}

pub fn hitting_cdf(
    sys: &SdeSystem,
    x0: &[f64],
    set: &SemialgebraicSet,
    cfg: &SimConfig,
    horizons: &[f64],
) -> Result<HittingCdf, SimError> {
    cfg.validate()?;
    check_point(sys, x0)?;
    if set.dim() != sys.n() {
        return Err(SimError::DimensionMismatch { expected: sys.n(), got: set.dim() });
    }
    if horizons.is_empty() || horizons.windows(2).any(|w| !(w[0] < w[1])) || horizons.iter().any(|h| !(*h >= 0.0)) {
        return Err(SimError::InvalidConfig("horizons must be non-negative and strictly increasing".into()));
    }
    if horizons[horizons.len() - 1] > cfg.t_max * (1.0 + 1e-12) {
        return Err(SimError::InvalidConfig(format!("horizon beyond t_max = {}", cfg.t_max)));
    }
    let compiled = sys.compile();
    let hit_times: Vec<Option<f64>> = (0..cfg.n_traj as u64)
        .into_par_iter()
        .map(|k| first_hit(&compiled, set, x0, cfg, k).map(|h| h.map(|s| s as f64 * cfg.dt)))
        .collect::<Result<_, _>>()?;

    let nh = horizons.len();
    let mut p_mean = vec![0.0; nh];
    cdf_at(&hit_times, 0..hit_times.len(), horizons, &mut p_mean);
    let boots: Vec<Vec<f64>> = (0..BOOTSTRAP_RESAMPLES as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = Stream::new(cfg.seed, Domain::Bootstrap, b);
            let n = hit_times.len();
            let idx: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
            let mut out = vec![0.0; nh];
            cdf_at(&hit_times, idx.into_iter(), horizons, &mut out);
            out
        })
        .collect();
    let mut p10 = Vec::with_capacity(nh);
    let mut p90 = Vec::with_capacity(nh);
    let mut col = vec![0.0; boots.len()];
    for j in 0..nh {
        for (c, b) in col.iter_mut().zip(&boots) {
            *c = b[j];
        }
        col.sort_by(f64::total_cmp);
        // bands always bracket the point estimate
        p10.push(quantile_sorted(&col, 0.1).min(p_mean[j]));
        p90.push(quantile_sorted(&col, 0.9).max(p_mean[j]));
    }
    Ok(HittingCdf { horizons: horizons.to_vec(), p_mean, p10, p90, hit_times })
}

/// Monte Carlo fraction with its Wilson (z = 1) standard error, which stays
/// positive when the fraction is 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
}

pub fn wilson_stderr(successes: usize, n: usize) -> f64 {
    let nf = n as f64;
    let p = successes as f64 / nf;
    (p * (1.0 - p) / nf + 0.25 / (nf * nf)).sqrt() / (1.0 + 1.0 / nf)
}

struct DecreaseSetup {
    compiled: CompiledSystem,
    zeta: CompiledPoly,
}

impl DecreaseSetup {
    /// Samples of `U(x(tau)) - U(x)`. Sample `s` always uses the same
    /// stream, so nearby points see common random numbers.
    fn increments(&self, lambda: f64, x: &[f64], tau: f64, n_samples: usize, seed: u64) -> Result<Vec<f64>, SimError> {
        let dt = tau / DECREASE_SUBSTEPS as f64;
        let u0 = variant_from_zeta(self.zeta.eval(x), lambda);
        let mut stepper = Stepper::new(&self.compiled, dt);
        let mut y = vec![0.0; x.len()];
        let mut out = Vec::with_capacity(n_samples);
        for s in 0..n_samples {
            let mut rng = Stream::new(seed, Domain::Sampling, s as u64);
            y.copy_from_slice(x);
            for k in 1..=DECREASE_SUBSTEPS {
                if let StepOutcome::Diverged = stepper.step(&mut y, &mut rng, k)? {
                    break;
                }
            }
            out.push(variant_from_zeta(self.zeta.eval(&y), lambda) - u0);
        }
        Ok(out)
    }

    fn estimate(&self, lambda: f64, x: &[f64], tau: f64, delta: f64, n_samples: usize, seed: u64) -> Result<Estimate, SimError> {
        let hits = self.increments(lambda, x, tau, n_samples, seed)?.iter().filter(|d| **d <= -delta).count();
        Ok(Estimate { value: hits as f64 / n_samples as f64, stderr: wilson_stderr(hits, n_samples), n: n_samples })
    }
}

fn decrease_setup(sys: &SdeSystem, zeta: &Polynomial, lambda: f64, tau: f64, delta: f64, n_samples: usize) -> Result<DecreaseSetup, SimError> {
    if zeta.dim() != sys.n() {
        return Err(SimError::DimensionMismatch { expected: sys.n(), got: zeta.dim() });
    }
    if !(lambda > 0.0) || !(tau > 0.0) || delta.is_nan() || n_samples == 0 {
        return Err(SimError::InvalidConfig(format!("lambda = {lambda}, tau = {tau}, delta = {delta}, n_samples = {n_samples}")));
    }
    Ok(DecreaseSetup { compiled: sys.compile(), zeta: CompiledPoly::new(zeta) })
}

/// `P(U(x(tau)) - U(x) <= -delta)` with `U = (1 - exp(-lambda zeta)) / lambda`,
/// integrated with `dt = tau / 100`.
#[allow(clippy::too_many_arguments)]
pub fn decrease_probability(
    sys: &SdeSystem,
    zeta: &Polynomial,
    lambda: f64,
    x: &[f64],
    tau: f64,
    delta: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Estimate, SimError> {
    check_point(sys, x)?;
    decrease_setup(sys, zeta, lambda, tau, delta, n_samples)?.estimate(lambda, x, tau, delta, n_samples, seed)
}

/// Raw samples of `U(x(tau)) - U(x)`, on the same streams as
/// [`decrease_probability`].
pub fn variant_increments(
    sys: &SdeSystem,
    zeta: &Polynomial,
    lambda: f64,
    x: &[f64],
    tau: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>, SimError> {
    check_point(sys, x)?;
    decrease_setup(sys, zeta, lambda, tau, 0.0, n_samples)?.increments(lambda, x, tau, n_samples, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldPoint {
    pub x: Vec<f64>,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecreaseField {
    pub points: Vec<FieldPoint>,
    pub argmin: usize,
}

impl DecreaseField {
    pub fn minimum(&self) -> &FieldPoint {
        &self.points[self.argmin]
    }

    pub fn to_csv(&self) -> String {
        let dim = self.points.first().map_or(0, |p| p.x.len());
        let mut s = String::new();
        for i in 1..=dim {
            let _ = write!(s, "x{i},");
        }
        s.push_str("estimate,stderr\n");
        for p in &self.points {
            for v in &p.x {
                let _ = write!(s, "{v:.16e},");
            }
            let _ = writeln!(s, "{:.16e},{:.16e}", p.estimate.value, p.estimate.stderr);
        }
        s
    }
}

/// Points of a `resolution`-per-axis grid over `region`, in row-major order
/// with the last axis fastest.
pub fn grid_points(region: &[(f64, f64)], resolution: usize) -> Vec<Vec<f64>> {
    let n = region.len();
    let axis = |lo: f64, hi: f64, k: usize| {
        if resolution == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * k as f64 / (resolution - 1) as f64
        }
    };
    let total = resolution.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            let mut x = vec![0.0; n];
            for i in (0..n).rev() {
                let k = idx % resolution;
                idx /= resolution;
                x[i] = axis(region[i].0, region[i].1, k);
            }
            x
        })
        .collect()
}

/// Decrease probability on the grid points of `region` where `zeta > 0`.
#[allow(clippy::too_many_arguments)]
pub fn grid_sweep_decrease(
    sys: &SdeSystem,
    zeta: &Polynomial,
    lambda: f64,
    region: &[(f64, f64)],
    resolution: usize,
    tau: f64,
    delta: f64,
    n_samples: usize,
    seed: u64,
) -> Result<DecreaseField, SimError> {
    if region.len() != sys.n() {
        return Err(SimError::DimensionMismatch { expected: sys.n(), got: region.len() });
    }
    if resolution == 0 || region.iter().any(|(lo, hi)| !(lo <= hi)) {
        return Err(SimError::InvalidConfig("empty region or zero resolution".into()));
    }
    let setup = decrease_setup(sys, zeta, lambda, tau, delta, n_samples)?;
    let admissible: Vec<Vec<f64>> = grid_points(region, resolution).into_iter().filter(|x| setup.zeta.eval(x) > 0.0).collect();
    if admissible.is_empty() {
        return Err(SimError::EmptyGrid);
    }
    let points: Vec<FieldPoint> = admissible
        .into_par_iter()
        .map(|x| {
            let estimate = setup.estimate(lambda, &x, tau, delta, n_samples, seed)?;
            Ok(FieldPoint { x, estimate })
        })
        .collect::<Result<_, SimError>>()?;
    let argmin = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.estimate.value.total_cmp(&b.1.estimate.value))
        .map(|(i, _)| i)
        .expect("non-empty");
    Ok(DecreaseField { points, argmin })
}

/// `sqrt(1 + 3 / (4 dt))`: above it the noiseless double-well map at least
/// doubles `|x|` every step.
pub fn divergence_threshold(dt: f64) -> f64 {
    (1.0 + 3.0 / (4.0 * dt)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoStep {
    pub n: usize,
    pub sign: f64,
    /// `ln |x_n|`.
    pub ln_abs: f64,
    /// `ln(|x_{n+1}| / |x_n|)`.
    pub ln_ratio: f64,
}

impl DemoStep {
    pub fn ratio_at_least_two(&self) -> bool {
        self.ln_ratio >= std::f64::consts::LN_2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceDemo {
    pub dt: f64,
    pub threshold: f64,
    pub x0: f64,
    pub steps: Vec<DemoStep>,
    /// Some iterate exceeded the divergence bound.
    pub diverged: bool,
}

impl DivergenceDemo {
    pub fn to_table(&self) -> String {
        let mut s = format!("threshold {:.10}\nx0 {:.10}\nn,abs_x,ratio,ratio_ge_2\n", self.threshold, self.x0);
        for st in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                st.n,
                format_log10(st.ln_abs),
                format_log10(st.ln_ratio),
                st.ratio_at_least_two()
            );
        }
        s
    }
}

/// `exp(ln_value)` printed as a decimal mantissa and exponent, valid far
/// past the `f64` range.
pub fn format_log10(ln_value: f64) -> String {
    if ln_value == f64::NEG_INFINITY {
        return "0".into();
    }
    let l10 = ln_value / std::f64::consts::LN_10;
    let e = l10.floor();
    format!("{:.6}e{}", 10f64.powf(l10 - e), e as i64)
}

/// Iterates the noiseless double-well map `x + (-4x^3 + 4x) dt` in log
/// space, so the cubic blow-up can be followed for many steps without
/// overflow.
pub fn divergence_demo(dt: f64, x0: f64, steps: usize) -> Result<DivergenceDemo, SimError> {
    if !(dt > 0.0 && dt.is_finite()) || !x0.is_finite() {
        return Err(SimError::InvalidConfig(format!("dt = {dt}, x0 = {x0}")));
    }
    let a = 4.0 * dt;
    let mut sign = x0.signum();
    let mut ln_abs = x0.abs().ln();
    let mut out = Vec::with_capacity(steps);
    let mut diverged = false;
    for n in 0..steps {
        // |x_{n+1}| / |x_n| = |1 + a - a x^2|
        let (factor_sign, ln_ratio) = if ln_abs > 0.5 * (1e6f64).ln() {
            // a x^2 dominates; ln(a x^2 - 1 - a) without forming x^2
            let ln_ax2 = a.ln() + 2.0 * ln_abs;
            (-1.0, ln_ax2 + (-(1.0 + a) * (-ln_ax2).exp()).ln_1p())
        } else {
            let x2 = (2.0 * ln_abs).exp();
            let f = 1.0 + a - a * x2;
            (f.signum(), f.abs().ln())
        };
        out.push(DemoStep { n, sign, ln_abs, ln_ratio });
        ln_abs += ln_ratio;
        sign *= factor_sign;
        if ln_abs > DIVERGENCE_BOUND.ln() {
            diverged = true;
        }
    }
    Ok(DivergenceDemo { dt, threshold: divergence_threshold(dt), x0, steps: out, diverged })
}
