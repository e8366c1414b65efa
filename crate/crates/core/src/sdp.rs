//! Dense semidefinite programming.
//!
//! Problems are stated as
//!
//! ```text
//! maximize   <C, X> + c_f^T y
//! subject to <A_i, X> + f_i^T y = b_i     i = 1..m
//!            X = diag(X_1, ..., X_k) PSD, y free
//! ```
//!
//! and solved with a homogeneous self-dual embedding: a primal-dual
//! path-following method (HKM search direction, Mehrotra predictor-corrector)
//! applied to the skew-symmetric embedding, so that optimality, primal
//! infeasibility and dual infeasibility are all read off the same iterate.
//!
//! Internally the problem is handled in minimization form with cost
//! `c = -objective`; the dual reported in [`SdpSolution`] is the `z` of
//!
//! ```text
//! maximize b^T z  s.t.  c - A^T z = (S, 0),  S PSD.
//! ```

use std::fmt::Write as _;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdpError {
    #[error("problem has no variables")]
    NoVariables,
    #[error("entry refers to block {block} at ({row}, {col}) outside the declared sizes")]
    EntryOutOfRange { block: usize, row: usize, col: usize },
    #[error("free variable index {0} out of range")]
    FreeOutOfRange(usize),
    #[error("constraint {row} is a linear combination of earlier rows with an inconsistent right-hand side")]
    InconsistentEqualities { row: usize },
    #[error("infeasibility can only be certified for a primal-infeasible solution")]
    NotInfeasible,
    #[error("malformed dump: {0}")]
    Parse(String),
}

/// A coefficient of a symmetric constraint matrix. Off-diagonal entries
/// stand for both `(row, col)` and `(col, row)`, so they contribute
/// `2 * value * X[row, col]` to the inner product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymEntry {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// A linear functional over the PSD blocks and the free scalars.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearForm {
    pub psd: Vec<SymEntry>,
    pub free: Vec<(usize, f64)>,
}

impl LinearForm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_psd(&mut self, block: usize, row: usize, col: usize, value: f64) {
        let (row, col) = if row <= col { (row, col) } else { (col, row) };
        self.psd.push(SymEntry { block, row, col, value });
    }

    pub fn add_free(&mut self, index: usize, value: f64) {
        self.free.push((index, value));
    }

    pub fn is_empty(&self) -> bool {
        self.psd.is_empty() && self.free.is_empty()
    }

    pub fn eval(&self, blocks: &[DMatrix<f64>], free: &[f64]) -> f64 {
        let mut acc = 0.0;
        for e in &self.psd {
            let w = if e.row == e.col { 1.0 } else { 2.0 };
            acc += w * e.value * blocks[e.block][(e.row, e.col)];
        }
        for (k, v) in &self.free {
            acc += v * free[*k];
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpProblem {
    pub block_sizes: Vec<usize>,
    pub n_free: usize,
    pub constraints: Vec<LinearForm>,
    pub rhs: Vec<f64>,
    /// Maximized.
    pub objective: LinearForm,
}

impl SdpProblem {
    pub fn new(block_sizes: Vec<usize>, n_free: usize) -> Self {
        SdpProblem { block_sizes, n_free, constraints: Vec::new(), rhs: Vec::new(), objective: LinearForm::new() }
    }

    pub fn add_constraint(&mut self, row: LinearForm, rhs: f64) -> usize {
        self.constraints.push(row);
        self.rhs.push(rhs);
        self.constraints.len() - 1
    }

    pub fn set_objective(&mut self, objective: LinearForm) {
        self.objective = objective;
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        if self.block_sizes.iter().sum::<usize>() + self.n_free == 0 {
            return Err(SdpError::NoVariables);
        }
        for form in self.constraints.iter().chain(std::iter::once(&self.objective)) {
            for e in &form.psd {
                let ok = e.block < self.block_sizes.len()
                    && e.row < self.block_sizes[e.block]
                    && e.col < self.block_sizes[e.block];
                if !ok {
                    return Err(SdpError::EntryOutOfRange { block: e.block, row: e.row, col: e.col });
                }
            }
            for (k, _) in &form.free {
                if *k >= self.n_free {
                    return Err(SdpError::FreeOutOfRange(*k));
                }
            }
        }
        Ok(())
    }

    /// Plain-text sparse triplet dump for cross-checking with other solvers.
    ///
    /// ```text
    /// sdp-triplets 1
    /// blocks <k> <s_1> ... <s_k>
    /// free <n_free>
    /// constraints <m>
    /// c <row> b <block> <i> <j> <value>
    /// c <row> f <index> <value>
    /// rhs <row> <value>
    /// o b <block> <i> <j> <value>
    /// o f <index> <value>
    /// ```
    ///
    /// Indices are zero based; `o` lines describe the maximized objective.
    pub fn to_triplets(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sdp-triplets 1");
        let sizes: Vec<String> = self.block_sizes.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(s, "blocks {} {}", self.block_sizes.len(), sizes.join(" "));
        let _ = writeln!(s, "free {}", self.n_free);
        let _ = writeln!(s, "constraints {}", self.constraints.len());
        for (r, form) in self.constraints.iter().enumerate() {
            for e in &form.psd {
                let _ = writeln!(s, "c {r} b {} {} {} {:.17e}", e.block, e.row, e.col, e.value);
            }
            for (k, v) in &form.free {
                let _ = writeln!(s, "c {r} f {k} {v:.17e}");
            }
            let _ = writeln!(s, "rhs {r} {:.17e}", self.rhs[r]);
        }
        for e in &self.objective.psd {
            let _ = writeln!(s, "o b {} {} {} {:.17e}", e.block, e.row, e.col, e.value);
        }
        for (k, v) in &self.objective.free {
            let _ = writeln!(s, "o f {k} {v:.17e}");
        }
        s
    }

    pub fn from_triplets(text: &str) -> Result<Self, SdpError> {
        let bad = |line: &str| SdpError::Parse(line.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        if header.trim() != "sdp-triplets 1" {
            return Err(bad(header));
        }
        let mut problem = SdpProblem::new(Vec::new(), 0);
        for line in lines {
            let tok: Vec<&str> = line.split_whitespace().collect();
            let us = |i: usize| tok.get(i).and_then(|t| t.parse::<usize>().ok()).ok_or_else(|| bad(line));
            let fl = |i: usize| tok.get(i).and_then(|t| t.parse::<f64>().ok()).ok_or_else(|| bad(line));
            match tok.first().copied() {
                Some("blocks") => {
                    let k = us(1)?;
                    problem.block_sizes = (0..k).map(|i| us(2 + i)).collect::<Result<_, _>>()?;
                }
                Some("free") => problem.n_free = us(1)?,
                Some("constraints") => {
                    let m = us(1)?;
                    problem.constraints = vec![LinearForm::new(); m];
                    problem.rhs = vec![0.0; m];
                }
                Some("c") => {
                    let r = us(1)?;
                    let form = problem.constraints.get_mut(r).ok_or_else(|| bad(line))?;
                    match tok.get(2).copied() {
                        Some("b") => form.add_psd(us(3)?, us(4)?, us(5)?, fl(6)?),
                        Some("f") => form.add_free(us(3)?, fl(4)?),
                        _ => return Err(bad(line)),
                    }
                }
                Some("rhs") => {
                    let r = us(1)?;
                    *problem.rhs.get_mut(r).ok_or_else(|| bad(line))? = fl(2)?;
                }
                Some("o") => match tok.get(1).copied() {
                    Some("b") => problem.objective.add_psd(us(2)?, us(3)?, us(4)?, fl(5)?),
                    Some("f") => problem.objective.add_free(us(2)?, fl(3)?),
                    _ => return Err(bad(line)),
                },
                _ => return Err(bad(line)),
            }
        }
        problem.validate()?;
        Ok(problem)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdpStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    IterLimit,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `||A x - b|| / (1 + ||b||)`.
    pub primal: f64,
    /// `||c - A^T z - s|| / (1 + ||c||)`.
    pub dual: f64,
    /// `|p - d| / (1 + |p| + |d|)`.
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub blocks: Vec<DMatrix<f64>>,
    pub free: Vec<f64>,
    /// Equality multipliers, one per original constraint (zero for rows
    /// dropped as redundant).
    pub dual: Vec<f64>,
    pub dual_slack: Vec<DMatrix<f64>>,
    /// Value of the maximized objective at the primal point.
    pub objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SdpOptions {
    pub max_iters: usize,
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub infeas_tol: f64,
    pub step_fraction: f64,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions { max_iters: 200, feas_tol: 1e-8, gap_tol: 1e-7, infeas_tol: 1e-8, step_fraction: 0.97 }
    }
}

type Blocks = Vec<DMatrix<f64>>;

/// Normalized problem data used by the iteration.
struct Data {
    sizes: Vec<usize>,
    nf: usize,
    /// `rows[i][b]` lists `(r, c, v)` with `r <= c`.
    rows: Vec<Vec<Vec<(usize, usize, f64)>>>,
    free: DMatrix<f64>,
    b: DVector<f64>,
    c_blocks: Blocks,
    c_free: DVector<f64>,
    /// Original index of each kept row and its scale factor.
    kept: Vec<usize>,
    scale: Vec<f64>,
    n_orig: usize,
    b_norm: f64,
    c_norm: f64,
}

fn dense_form(sizes: &[usize], form: &LinearForm, sign: f64) -> Blocks {
    let mut out: Blocks = sizes.iter().map(|s| DMatrix::zeros(*s, *s)).collect();
    for e in &form.psd {
        out[e.block][(e.row, e.col)] += sign * e.value;
        if e.row != e.col {
            out[e.block][(e.col, e.row)] += sign * e.value;
        }
    }
    out
}

fn inner(a: &Blocks, b: &Blocks) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

impl Data {
    fn build(p: &SdpProblem) -> Result<Data, SdpError> {
        let sizes = p.block_sizes.clone();
        let nb = sizes.len();
        let nf = p.n_free;
        let offsets: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, s| {
                let o = *acc;
                *acc += s * (s + 1) / 2;
                Some(o)
            })
            .collect();
        let svec_len = sizes.iter().map(|s| s * (s + 1) / 2).sum::<usize>();
        let width = svec_len + nf;
        let svec_index = |b: usize, r: usize, c: usize| {
            let s = sizes[b];
            // column-wise packing of the upper triangle
            offsets[b] + c * (c + 1) / 2 + r - if c >= s { unreachable!() } else { 0 }
        };

        // Rows in the isometric svec coordinates (sqrt(2) on off-diagonals).
        let mut basis: Vec<(DVector<f64>, f64)> = Vec::new();
        let mut kept = Vec::new();
        let mut rows = Vec::new();
        let mut free_rows = Vec::new();
        let mut scale = Vec::new();
        let mut b = Vec::new();
        for (i, form) in p.constraints.iter().enumerate() {
            let mut v = DVector::zeros(width);
            let mut per_block: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); nb];
            for e in &form.psd {
                let w = if e.row == e.col { 1.0 } else { std::f64::consts::SQRT_2 };
                v[svec_index(e.block, e.row, e.col)] += w * e.value;
                per_block[e.block].push((e.row, e.col, e.value));
            }
            let mut fr = vec![0.0; nf];
            for (k, val) in &form.free {
                v[svec_len + k] += val;
                fr[*k] += val;
            }
            let norm = v.norm();
            let mut res = v.clone();
            let mut rb = p.rhs[i];
            for _ in 0..2 {
                for (q, qb) in &basis {
                    let c = q.dot(&res);
                    res.axpy(-c, q, 1.0);
                    rb -= c * qb;
                }
            }
            let rn = res.norm();
            if norm == 0.0 || rn <= 1e-10 * norm {
                if rb.abs() > 1e-9 * (1.0 + p.rhs[i].abs()) {
                    return Err(SdpError::InconsistentEqualities { row: i });
                }
                warn!("dropping redundant equality constraint {i}");
                continue;
            }
            basis.push((res / rn, rb / rn));
            kept.push(i);
            scale.push(norm);
            for blk in per_block.iter_mut() {
                for e in blk.iter_mut() {
                    e.2 /= norm;
                }
            }
            rows.push(per_block);
            free_rows.push(fr.iter().map(|x| x / norm).collect::<Vec<_>>());
            b.push(p.rhs[i] / norm);
        }
        let m = rows.len();
        let free = DMatrix::from_fn(m, nf, |i, k| free_rows[i][k]);
        let c_blocks = dense_form(&sizes, &p.objective, -1.0);
        let mut c_free: DVector<f64> = DVector::zeros(nf);
        for (k, v) in &p.objective.free {
            c_free[*k] -= v;
        }
        let b_norm = DVector::from_vec(p.rhs.clone()).norm();
        let c_norm = (c_blocks.iter().map(|m| m.norm_squared()).sum::<f64>() + c_free.norm_squared()).sqrt();
        Ok(Data {
            sizes,
            nf,
            rows,
            free,
            b: DVector::from_vec(b),
            c_blocks,
            c_free,
            kept,
            scale,
            n_orig: p.constraints.len(),
            b_norm,
            c_norm,
        })
    }

    fn m(&self) -> usize {
        self.rows.len()
    }

    fn apply_a(&self, x: &Blocks, xf: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.free * xf;
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for (bi, entries) in row.iter().enumerate() {
                for (r, c, v) in entries {
                    let w = if r == c { 1.0 } else { 2.0 };
                    acc += w * v * x[bi][(*r, *c)];
                }
            }
            out[i] += acc;
        }
        out
    }

    fn apply_at(&self, z: &DVector<f64>) -> (Blocks, DVector<f64>) {
        let mut blocks: Blocks = self.sizes.iter().map(|s| DMatrix::zeros(*s, *s)).collect();
        for (i, row) in self.rows.iter().enumerate() {
            let zi = z[i];
            if zi == 0.0 {
                continue;
            }
            for (bi, entries) in row.iter().enumerate() {
                for (r, c, v) in entries {
                    blocks[bi][(*r, *c)] += zi * v;
                    if r != c {
                        blocks[bi][(*c, *r)] += zi * v;
                    }
                }
            }
        }
        (blocks, self.free.transpose() * z)
    }
}

/// State of the embedded iteration.
#[derive(Clone)]
struct Iterate {
    x: Blocks,
    xf: DVector<f64>,
    z: DVector<f64>,
    s: Blocks,
    tau: f64,
    kappa: f64,
}

struct Direction {
    dx: Blocks,
    dxf: DVector<f64>,
    dz: DVector<f64>,
    ds: Blocks,
    dtau: f64,
    dkappa: f64,
}

impl Direction {
    fn add(&mut self, o: &Direction) {
        for (a, b) in self.dx.iter_mut().zip(&o.dx) {
            *a += b;
        }
        for (a, b) in self.ds.iter_mut().zip(&o.ds) {
            *a += b;
        }
        self.dxf += &o.dxf;
        self.dz += &o.dz;
        self.dtau += o.dtau;
        self.dkappa += o.dkappa;
    }
}

struct NewtonRhs {
    rp: DVector<f64>,
    rd: Blocks,
    rdf: DVector<f64>,
    rg: f64,
    rx: Blocks,
    rkappa: f64,
}

/// Per-iteration factorization and scaled quantities.
struct Scaling {
    s_inv: Blocks,
    kkt: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    kkt_mat: DMatrix<f64>,
    /// `A W(C)` and `<C, W(C)>`.
    awc: DVector<f64>,
    c_wc: f64,
    q: DVector<f64>,
}

fn w_apply(x: &Blocks, s_inv: &Blocks, d: &Blocks) -> Blocks {
    x.iter()
        .zip(s_inv)
        .zip(d)
        .map(|((x, si), d)| sym(&(x * d * si)))
        .collect()
}

/// Largest `alpha` keeping `m + alpha * dm` PSD (infinity if unbounded).
fn max_step(m: &DMatrix<f64>, dm: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let Some(chol) = m.clone().cholesky() else {
        return 0.0;
    };
    let l = chol.l();
    let Some(linv) = l.clone().try_inverse() else {
        return 0.0;
    };
    let t = sym(&(&linv * dm * linv.transpose()));
    let lmin = t.symmetric_eigenvalues().min();
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

fn blocks_axpy(alpha: f64, d: &Blocks, x: &Blocks) -> Blocks {
    x.iter().zip(d).map(|(x, d)| x + d * alpha).collect()
}

struct Solver<'a> {
    data: &'a Data,
    nu: f64,
}

impl<'a> Solver<'a> {
    fn mu(&self, it: &Iterate) -> f64 {
        (inner(&it.x, &it.s) + it.tau * it.kappa) / (self.nu + 1.0)
    }

    fn scaling(&self, it: &Iterate) -> Option<Scaling> {
        let d = self.data;
        let m = d.m();
        let nf = d.nf;
        let mut s_inv = Vec::with_capacity(d.sizes.len());
        for s in &it.s {
            if s.nrows() == 0 {
                s_inv.push(s.clone());
                continue;
            }
            let inv = s.clone().cholesky()?.inverse();
            s_inv.push(sym(&inv));
        }
        // Schur complement M_ij = sum_b tr(A_i X A_j S^-1)
        let mut schur = DMatrix::<f64>::zeros(m, m);
        for (bi, &size) in d.sizes.iter().enumerate() {
            if size == 0 {
                continue;
            }
            let x = &it.x[bi];
            let si = &s_inv[bi];
            let touching: Vec<usize> = (0..m).filter(|i| !d.rows[*i][bi].is_empty()).collect();
            for &j in &touching {
                let mut xa = DMatrix::<f64>::zeros(size, size);
                for (r, c, v) in &d.rows[j][bi] {
                    for k in 0..size {
                        xa[(k, *c)] += v * x[(k, *r)];
                    }
                    if r != c {
                        for k in 0..size {
                            xa[(k, *r)] += v * x[(k, *c)];
                        }
                    }
                }
                let t = xa * si;
                for &i in &touching {
                    let mut acc = 0.0;
                    for (r, c, v) in &d.rows[i][bi] {
                        acc += v * t[(*c, *r)];
                        if r != c {
                            acc += v * t[(*r, *c)];
                        }
                    }
                    schur[(i, j)] += acc;
                }
            }
        }
        let schur = sym(&schur);
        let mut kkt = DMatrix::<f64>::zeros(m + nf, m + nf);
        kkt.view_mut((0, 0), (m, m)).copy_from(&schur);
        kkt.view_mut((0, m), (m, nf)).copy_from(&d.free);
        kkt.view_mut((m, 0), (nf, m)).copy_from(&d.free.transpose());
        let mut lu = kkt.clone().lu();
        let diag_scale = (0..m).map(|i| schur[(i, i)]).fold(1.0f64, f64::max);
        let mut kkt_mat = kkt.clone();
        // the determinant overflows long before the matrix is singular, so
        // probe with a solve instead
        let probe = DVector::from_element(m + nf, 1.0);
        let usable = lu.is_invertible() && lu.solve(&probe).is_some_and(|x| x.iter().all(|v| v.is_finite()));
        if !usable {
            let delta = 1e-10 * diag_scale;
            for i in 0..m {
                kkt_mat[(i, i)] += delta;
            }
            for k in 0..nf {
                kkt_mat[(m + k, m + k)] -= delta;
            }
            lu = kkt_mat.clone().lu();
            if !lu.is_invertible() {
                return None;
            }
        }
        let wc = w_apply(&it.x, &s_inv, &d.c_blocks);
        let awc = d.apply_a(&wc, &DVector::zeros(nf));
        let c_wc = inner(&d.c_blocks, &wc);
        let mut v = DVector::zeros(m + nf);
        v.rows_mut(0, m).copy_from(&(&d.b + &awc));
        v.rows_mut(m, nf).copy_from(&d.c_free);
        let mut sc = Scaling { s_inv, kkt: lu, kkt_mat, awc, c_wc, q: DVector::zeros(0) };
        sc.q = self.kkt_solve(&sc, &v)?;
        Some(sc)
    }

    fn kkt_solve(&self, sc: &Scaling, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let mut x = sc.kkt.solve(rhs)?;
        // one step of iterative refinement
        let r = rhs - &sc.kkt_mat * &x;
        if let Some(dx) = sc.kkt.solve(&r) {
            x += dx;
        }
        if x.iter().all(|v| v.is_finite()) {
            Some(x)
        } else {
            None
        }
    }

    fn direction(
        &self,
        it: &Iterate,
        sc: &Scaling,
        res: &LinearResiduals,
        eta: f64,
        sigma_mu: f64,
        corr: Option<&Direction>,
    ) -> Option<Direction> {
        // Rx = sym(sigma mu S^-1 - X - dXa dSa S^-1)
        let rx: Blocks = it
            .x
            .iter()
            .enumerate()
            .map(|(bi, x)| {
                let si = &sc.s_inv[bi];
                let mut r = si * sigma_mu - x;
                if let Some(a) = corr {
                    r -= &a.dx[bi] * &a.ds[bi] * si;
                }
                sym(&r)
            })
            .collect();
        let rhs = NewtonRhs {
            rp: &res.rp * eta,
            rd: res.rd.iter().map(|r| r * eta).collect(),
            rdf: &res.rdf * eta,
            rg: -eta * res.rg,
            rx,
            rkappa: sigma_mu - it.tau * it.kappa - corr.map(|a| a.dtau * a.dkappa).unwrap_or(0.0),
        };
        let mut dir = self.newton(it, sc, &rhs)?;
        // refine against the unreduced equations; the Schur system loses
        // accuracy as the iterates approach the boundary
        let scale = 1.0 + rhs.rp.amax() + rhs.rdf.amax() + rhs.rg.abs();
        for _ in 0..2 {
            let e = self.newton_residual(it, &dir, &rhs);
            let err = e.rp.amax().max(e.rdf.amax()).max(e.rg.abs());
            if err <= 1e-14 * scale {
                break;
            }
            let fix = self.newton(it, sc, &e)?;
            dir.add(&fix);
        }
        Some(dir)
    }

    /// Solves the linearized embedding for a general right-hand side:
    /// `A dx + F dxf - b dtau = rp`, `A^T dz + ds - c dtau = rd`,
    /// `F^T dz - c_f dtau = rdf`, `b.dz - <c,dx> - c_f.dxf - dkappa = rg`,
    /// `dx + W ds = rx`, `kappa dtau + tau dkappa = rkappa`.
    fn newton(&self, it: &Iterate, sc: &Scaling, rhs: &NewtonRhs) -> Option<Direction> {
        let d = self.data;
        let m = d.m();
        let nf = d.nf;
        let w_rd = w_apply(&it.x, &sc.s_inv, &rhs.rd);
        let base: Blocks = rhs.rx.iter().zip(&w_rd).map(|(r, w)| r - w).collect();
        let a_base = d.apply_a(&base, &DVector::zeros(nf));
        let mut u = DVector::zeros(m + nf);
        u.rows_mut(0, m).copy_from(&(&rhs.rp - &a_base));
        u.rows_mut(m, nf).copy_from(&rhs.rdf);
        let p = self.kkt_solve(sc, &u)?;
        let (pz, pf) = (p.rows(0, m).into_owned(), p.rows(m, nf).into_owned());
        let (qz, qf) = (sc.q.rows(0, m).into_owned(), sc.q.rows(m, nf).into_owned());

        let denom = d.b.dot(&qz) + sc.c_wc - sc.awc.dot(&qz) - d.c_free.dot(&qf) + it.kappa / it.tau;
        let numer = rhs.rg - d.b.dot(&pz) + inner(&d.c_blocks, &base) + sc.awc.dot(&pz)
            + d.c_free.dot(&pf)
            + rhs.rkappa / it.tau;
        let dtau = numer / denom;
        if !dtau.is_finite() {
            return None;
        }
        let dz = &pz + &qz * dtau;
        let dxf = &pf + &qf * dtau;
        let (at_dz, _) = d.apply_at(&dz);
        let ds: Blocks = d
            .c_blocks
            .iter()
            .zip(&at_dz)
            .zip(&rhs.rd)
            .map(|((c, a), r)| c * dtau - a + r)
            .collect();
        let w_ds = w_apply(&it.x, &sc.s_inv, &ds);
        let dx: Blocks = rhs.rx.iter().zip(&w_ds).map(|(r, w)| r - w).collect();
        let dkappa = (rhs.rkappa - it.kappa * dtau) / it.tau;
        Some(Direction { dx, dxf, dz, ds, dtau, dkappa })
    }

    /// What `dir` leaves unsatisfied in the equations that [`Self::newton`]
    /// does not enforce by construction.
    fn newton_residual(&self, it: &Iterate, dir: &Direction, rhs: &NewtonRhs) -> NewtonRhs {
        let d = self.data;
        let ax = d.apply_a(&dir.dx, &dir.dxf);
        let (_, ftz) = d.apply_at(&dir.dz);
        let gap = d.b.dot(&dir.dz) - inner(&d.c_blocks, &dir.dx) - d.c_free.dot(&dir.dxf) - dir.dkappa;
        NewtonRhs {
            rp: &rhs.rp - (ax - &d.b * dir.dtau),
            rd: it.x.iter().map(|x| DMatrix::zeros(x.nrows(), x.ncols())).collect(),
            rdf: &rhs.rdf - (ftz - &d.c_free * dir.dtau),
            rg: rhs.rg - gap,
            rx: it.x.iter().map(|x| DMatrix::zeros(x.nrows(), x.ncols())).collect(),
            rkappa: 0.0,
        }
    }

    fn step_length(&self, it: &Iterate, dir: &Direction) -> f64 {
        let mut alpha = f64::INFINITY;
        for (x, dx) in it.x.iter().zip(&dir.dx) {
            alpha = alpha.min(max_step(x, dx));
        }
        for (s, ds) in it.s.iter().zip(&dir.ds) {
            alpha = alpha.min(max_step(s, ds));
        }
        if dir.dtau < 0.0 {
            alpha = alpha.min(-it.tau / dir.dtau);
        }
        if dir.dkappa < 0.0 {
            alpha = alpha.min(-it.kappa / dir.dkappa);
        }
        alpha
    }

    fn residuals(&self, it: &Iterate) -> LinearResiduals {
        let d = self.data;
        let ax = d.apply_a(&it.x, &it.xf);
        let (atz, ftz) = d.apply_at(&it.z);
        let rp = &d.b * it.tau - &ax;
        let rd: Blocks = d
            .c_blocks
            .iter()
            .zip(&atz)
            .zip(&it.s)
            .map(|((c, a), s)| c * it.tau - a - s)
            .collect();
        let rdf = &d.c_free * it.tau - &ftz;
        let cx = inner(&d.c_blocks, &it.x) + d.c_free.dot(&it.xf);
        let bz = d.b.dot(&it.z);
        let rg = bz - cx - it.kappa;
        LinearResiduals { rp, rd, rdf, rg, ax, atz, ftz, cx, bz }
    }
}

struct LinearResiduals {
    rp: DVector<f64>,
    rd: Blocks,
    rdf: DVector<f64>,
    rg: f64,
    ax: DVector<f64>,
    atz: Blocks,
    ftz: DVector<f64>,
    cx: f64,
    bz: f64,
}

enum Verdict {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    Continue,
}

fn assess(d: &Data, it: &Iterate, r: &LinearResiduals, opts: &SdpOptions) -> (Verdict, Residuals) {
    let tau = it.tau;
    // residuals in the original row scaling
    let pres = r
        .ax
        .iter()
        .zip(d.b.iter())
        .zip(&d.scale)
        .map(|((ax, b), s)| ((ax / tau - b) * s).powi(2))
        .sum::<f64>()
        .sqrt();
    let dres_sq: f64 = d
        .c_blocks
        .iter()
        .zip(&r.atz)
        .zip(&it.s)
        .map(|((c, a), s)| (c - (a + s) / tau).norm_squared())
        .sum::<f64>()
        + (&d.c_free - &r.ftz / tau).norm_squared();
    let pobj = r.cx / tau;
    let dobj = r.bz / tau;
    let res = Residuals {
        primal: pres / (1.0 + d.b_norm),
        dual: dres_sq.sqrt() / (1.0 + d.c_norm),
        gap: (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs()),
    };
    if res.primal <= opts.feas_tol && res.dual <= opts.feas_tol && res.gap <= opts.gap_tol {
        return (Verdict::Optimal, res);
    }
    if r.bz > 0.0 {
        let ray_sq: f64 = r
            .atz
            .iter()
            .zip(&it.s)
            .map(|(a, s)| (a + s).norm_squared())
            .sum::<f64>()
            + r.ftz.norm_squared();
        // A tiny b^T z makes the relative test meaningless; insist that the
        // normalized ray would also pass certification.
        if ray_sq.sqrt() <= opts.infeas_tol * r.bz && ray_is_valid(&r.atz, &r.ftz, r.bz) {
            return (Verdict::PrimalInfeasible, res);
        }
    }
    if r.cx < 0.0 {
        let ax_norm = r.ax.iter().zip(&d.scale).map(|(a, s)| (a * s).powi(2)).sum::<f64>().sqrt();
        if ax_norm <= opts.infeas_tol * (-r.cx) {
            return (Verdict::DualInfeasible, res);
        }
    }
    (Verdict::Continue, res)
}

fn ray_is_valid(atz: &Blocks, ftz: &DVector<f64>, bz: f64) -> bool {
    let free_ok = ftz.iter().all(|v| (v / bz).abs() <= RAY_TOL);
    free_ok
        && atz
            .iter()
            .filter(|a| a.nrows() > 0)
            .all(|a| sym(&(a / -bz)).symmetric_eigenvalues().min() >= -RAY_TOL)
}

/// Solves `p` with the embedded interior-point method.
pub fn solve(p: &SdpProblem, opts: &SdpOptions) -> Result<SdpSolution, SdpError> {
    p.validate()?;
    let data = Data::build(p)?;
    let nu: f64 = data.sizes.iter().sum::<usize>() as f64;
    let solver = Solver { data: &data, nu };
    let m = data.m();
    let mut it = Iterate {
        x: data.sizes.iter().map(|s| DMatrix::identity(*s, *s)).collect(),
        xf: DVector::zeros(data.nf),
        z: DVector::zeros(m),
        s: data.sizes.iter().map(|s| DMatrix::identity(*s, *s)).collect(),
        tau: 1.0,
        kappa: 1.0,
    };
    let mut status = SdpStatus::IterLimit;
    let mut iterations = 0;
    let mut stalls = 0;
    let mut last = assess(&data, &it, &solver.residuals(&it), opts).1;
    for iter in 0..=opts.max_iters {
        iterations = iter;
        let res = solver.residuals(&it);
        let (verdict, r) = assess(&data, &it, &res, opts);
        last = r;
        match verdict {
            Verdict::Optimal => {
                status = SdpStatus::Optimal;
                break;
            }
            Verdict::PrimalInfeasible => {
                status = SdpStatus::PrimalInfeasible;
                break;
            }
            Verdict::DualInfeasible => {
                status = SdpStatus::DualInfeasible;
                break;
            }
            Verdict::Continue => {}
        }
        if iter == opts.max_iters {
            break;
        }
        let mu = solver.mu(&it);
        log::trace!("iter {iter}: mu {mu:.3e} tau {:.3e} kappa {:.3e} bz {:.3e} cx {:.3e} res {:?}", it.tau, it.kappa, res.bz, res.cx, r);
        let Some(sc) = solver.scaling(&it) else {
            status = SdpStatus::NumericalFailure;
            break;
        };
        let Some(aff) = solver.direction(&it, &sc, &res, 1.0, 0.0, None) else {
            status = SdpStatus::NumericalFailure;
            break;
        };
        let alpha_aff = solver.step_length(&it, &aff).min(1.0);
        let mu_aff = {
            let x = blocks_axpy(alpha_aff, &aff.dx, &it.x);
            let s = blocks_axpy(alpha_aff, &aff.ds, &it.s);
            (inner(&x, &s) + (it.tau + alpha_aff * aff.dtau) * (it.kappa + alpha_aff * aff.dkappa))
                / (nu + 1.0)
        };
        let sigma = (mu_aff.max(0.0) / mu).powi(3).clamp(0.0, 1.0);
        let Some(dir) = solver.direction(&it, &sc, &res, 1.0 - sigma, sigma * mu, Some(&aff)) else {
            status = SdpStatus::NumericalFailure;
            break;
        };
        let alpha = (opts.step_fraction * solver.step_length(&it, &dir)).min(1.0);
        if !(alpha > 1e-10) {
            stalls += 1;
            if stalls > 3 {
                status = SdpStatus::NumericalFailure;
                break;
            }
            continue;
        }
        stalls = 0;
        it.x = blocks_axpy(alpha, &dir.dx, &it.x);
        it.s = blocks_axpy(alpha, &dir.ds, &it.s);
        it.xf += &dir.dxf * alpha;
        it.z += &dir.dz * alpha;
        it.tau += alpha * dir.dtau;
        it.kappa += alpha * dir.dkappa;
        for x in it.x.iter_mut().chain(it.s.iter_mut()) {
            *x = sym(x);
        }
        if !(it.tau.is_finite() && it.kappa.is_finite()) {
            status = SdpStatus::NumericalFailure;
            break;
        }
    }
    Ok(extract(p, &data, &it, status, last, iterations))
}

fn extract(
    p: &SdpProblem,
    data: &Data,
    it: &Iterate,
    status: SdpStatus,
    residuals: Residuals,
    iterations: usize,
) -> SdpSolution {
    // Certificates of infeasibility are rays; report them unnormalized by tau.
    let div = match status {
        SdpStatus::PrimalInfeasible | SdpStatus::DualInfeasible => 1.0,
        _ => it.tau,
    };
    let blocks: Blocks = it.x.iter().map(|x| x / div).collect();
    let free: Vec<f64> = it.xf.iter().map(|v| v / div).collect();
    let dual_slack: Blocks = it.s.iter().map(|s| s / div).collect();
    let mut dual = vec![0.0; data.n_orig];
    for (k, &orig) in data.kept.iter().enumerate() {
        dual[orig] = it.z[k] / data.scale[k] / div;
    }
    let objective = p.objective.eval(&blocks, &free);
    SdpSolution { status, blocks, free, dual, dual_slack, objective, residuals, iterations }
}

/// Uniform entry point so that another conic solver with the same problem
/// encoding can be substituted.
pub trait SdpBackend: Sync {
    fn solve(&self, p: &SdpProblem) -> Result<SdpSolution, SdpError>;
}

#[derive(Debug, Clone, Default)]
pub struct InteriorPoint {
    pub options: SdpOptions,
}

impl SdpBackend for InteriorPoint {
    fn solve(&self, p: &SdpProblem) -> Result<SdpSolution, SdpError> {
        solve(p, &self.options)
    }
}

/// Outcome of validating a Farkas ray `z` with `b^T z > 0` and
/// `-A^T z` PSD (and `F^T z = 0` on the free columns).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayCheck {
    pub valid: bool,
    /// `b^T z` before normalization.
    pub b_dot_z: f64,
    /// Smallest eigenvalue of `-A^T z / b^T z` over all blocks.
    pub min_slack_eig: f64,
    /// `||F^T z||_inf / b^T z`.
    pub free_residual: f64,
}

pub const RAY_TOL: f64 = 1e-6;

pub fn certify_infeasibility(p: &SdpProblem, sol: &SdpSolution) -> Result<RayCheck, SdpError> {
    if sol.status != SdpStatus::PrimalInfeasible {
        return Err(SdpError::NotInfeasible);
    }
    let bz: f64 = p.rhs.iter().zip(&sol.dual).map(|(b, z)| b * z).sum();
    if !(bz > 0.0) {
        return Ok(RayCheck { valid: false, b_dot_z: bz, min_slack_eig: f64::NAN, free_residual: f64::NAN });
    }
    let mut slack: Blocks = p.block_sizes.iter().map(|s| DMatrix::zeros(*s, *s)).collect();
    let mut ftz = vec![0.0; p.n_free];
    for (form, z) in p.constraints.iter().zip(&sol.dual) {
        let zn = z / bz;
        for e in &form.psd {
            slack[e.block][(e.row, e.col)] -= zn * e.value;
            if e.row != e.col {
                slack[e.block][(e.col, e.row)] -= zn * e.value;
            }
        }
        for (k, v) in &form.free {
            ftz[*k] += zn * v;
        }
    }
    let min_eig = slack
        .iter()
        .filter(|s| s.nrows() > 0)
        .map(|s| s.clone().symmetric_eigenvalues().min())
        .fold(f64::INFINITY, f64::min);
    let free_res = ftz.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(RayCheck {
        valid: min_eig >= -RAY_TOL && free_res <= RAY_TOL,
        b_dot_z: bz,
        min_slack_eig: min_eig,
        free_residual: free_res,
    })
}

/// Symmetric vectorization with `sqrt(2)` on off-diagonal entries, packing
/// the upper triangle column by column, so that `svec(A).svec(B) = <A, B>`.
pub fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for c in 0..n {
        for r in 0..=c {
            out.push(if r == c { m[(r, c)] } else { std::f64::consts::SQRT_2 * m[(r, c)] });
        }
    }
    out
}

pub fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for c in 0..n {
        for r in 0..=c {
            let val = if r == c { v[k] } else { v[k] / std::f64::consts::SQRT_2 };
            m[(r, c)] = val;
            m[(c, r)] = val;
            k += 1;
        }
    }
    m
}
