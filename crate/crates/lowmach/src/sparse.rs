//! Sparse matrices in LDU (assembly) and CSR (solve) layouts plus the
//! iterative solvers used by the transport and pressure equations.
//!
//! LDU mirrors the mesh: one diagonal entry per cell, one upper/lower pair per
//! internal face. CSR is the row-wise layout the solver kernels consume.
//! Solvers are deterministic: fixed sweep orders, no reductions whose result
//! depends on scheduling, so identical inputs give bitwise-identical output.

use crate::mesh::Mesh;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("vector length {found} does not match matrix dimension {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("zero diagonal entry in row {row}")]
    ZeroDiagonal { row: usize },
    #[error("matrix row {row} is identically zero")]
    ZeroRow { row: usize },
    #[error("solver breakdown: {0}")]
    Breakdown(String),
    #[error("invalid solver controls: {0}")]
    BadControls(String),
}

/// Face-addressed sparse matrix. `upper[f]` is the coefficient of the
/// neighbor in the owner's row; `lower[f]` the owner's in the neighbor's row.
#[derive(Debug, Clone)]
pub struct LduMatrix {
    pub mesh: Arc<Mesh>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

impl LduMatrix {
    pub fn zeros(mesh: &Arc<Mesh>) -> LduMatrix {
        LduMatrix {
            mesh: Arc::clone(mesh),
            diag: vec![0.0; mesh.n_cells()],
            upper: vec![0.0; mesh.n_internal_faces()],
            lower: vec![0.0; mesh.n_internal_faces()],
        }
    }

    /// Bitwise symmetry test; assembly writes identical upper/lower for
    /// symmetric operators, so no tolerance is needed.
    pub fn is_symmetric(&self) -> bool {
        self.upper == self.lower
    }

    /// Dense reconstruction. Duplicate face pairs (periodic two-cell axes)
    /// accumulate, matching the CSR conversion. Test oracle use only.
    pub fn densify(&self) -> Vec<Vec<f64>> {
        let n = self.diag.len();
        let mut dense = vec![vec![0.0; n]; n];
        for (c, &d) in self.diag.iter().enumerate() {
            dense[c][c] += d;
        }
        let faces = &self.mesh.faces;
        for f in 0..faces.n_internal_faces {
            dense[faces.owner[f]][faces.neighbor[f]] += self.upper[f];
            dense[faces.neighbor[f]][faces.owner[f]] += self.lower[f];
        }
        dense
    }
}

/// Compressed sparse row matrix with exactly one diagonal entry per row and
/// strictly ascending column indices within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
    /// Position of the diagonal entry of each row in `vals`.
    pub diag_ptr: Vec<usize>,
}

impl CsrMatrix {
    pub fn identity(n: usize) -> CsrMatrix {
        CsrMatrix {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            vals: vec![1.0; n],
            diag_ptr: (0..n).collect(),
        }
    }

    /// Build from a dense row-major matrix, keeping nonzeros plus the full
    /// diagonal. Test utility.
    pub fn from_dense(dense: &[Vec<f64>]) -> CsrMatrix {
        let n = dense.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        let mut diag_ptr = Vec::with_capacity(n);
        row_ptr.push(0);
        for (i, row) in dense.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 || i == j {
                    if i == j {
                        diag_ptr.push(vals.len());
                    }
                    col_idx.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(vals.len());
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            vals,
            diag_ptr,
        }
    }

    pub fn densify(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n]; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                dense[i][self.col_idx[k]] = self.vals[k];
            }
        }
        dense
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.diag_ptr.iter().map(|&k| self.vals[k]).collect()
    }
}

/// Convert LDU to CSR. Duplicate (row, col) pairs, which periodic axes of
/// extent two produce, are merged by summation; every row keeps exactly one
/// diagonal entry even when its value is zero.
pub fn ldu_to_csr(ldu: &LduMatrix) -> CsrMatrix {
    let n = ldu.diag.len();
    let faces = &ldu.mesh.faces;
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(7); n];
    for (c, &d) in ldu.diag.iter().enumerate() {
        rows[c].push((c, d));
    }
    for f in 0..faces.n_internal_faces {
        rows[faces.owner[f]].push((faces.neighbor[f], ldu.upper[f]));
        rows[faces.neighbor[f]].push((faces.owner[f], ldu.lower[f]));
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut vals = Vec::new();
    let mut diag_ptr = Vec::with_capacity(n);
    row_ptr.push(0);
    for (i, row) in rows.iter_mut().enumerate() {
        row.sort_by_key(|&(c, _)| c);
        let mut k = 0;
        while k < row.len() {
            let col = row[k].0;
            let mut v = row[k].1;
            while k + 1 < row.len() && row[k + 1].0 == col {
                k += 1;
                v += row[k].1;
            }
            if col == i {
                diag_ptr.push(vals.len());
            }
            col_idx.push(col);
            vals.push(v);
            k += 1;
        }
        row_ptr.push(vals.len());
    }
    CsrMatrix {
        n,
        row_ptr,
        col_idx,
        vals,
        diag_ptr,
    }
}

/// y = A x.
pub fn spmv(a: &CsrMatrix, x: &[f64]) -> Result<Vec<f64>, SparseError> {
    if x.len() != a.n {
        return Err(SparseError::SizeMismatch {
            expected: a.n,
            found: x.len(),
        });
    }
    let mut y = vec![0.0; a.n];
    spmv_into(a, x, &mut y);
    Ok(y)
}

#[inline]
pub fn spmv_into(a: &CsrMatrix, x: &[f64], y: &mut [f64]) {
    for i in 0..a.n {
        let mut acc = 0.0;
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            acc += a.vals[k] * x[a.col_idx[k]];
        }
        y[i] = acc;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scale-invariant residual used for solver reporting and stopping in the
/// outer iterations. With `xbar = mean(x)` and `w = A (xbar * ones)`:
///
/// ```text
/// normFactor = sum_i |(A x)_i - w_i| + sum_i |b_i - w_i|   (floored at tiny)
/// residual   = sum_i |b_i - (A x)_i| / normFactor
/// ```
///
/// An exact solution gives 0; x = 0 against a nonzero b gives exactly 1; and
/// scaling A and b together leaves the value unchanged.
pub fn residual_norm(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = spmv(a, x).expect("residual_norm: size mismatch");
    let xbar = x.iter().sum::<f64>() / x.len() as f64;
    // A (xbar * ones) = xbar * rowsum.
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..a.n {
        let rowsum: f64 = (a.row_ptr[i]..a.row_ptr[i + 1]).map(|k| a.vals[k]).sum();
        let w = xbar * rowsum;
        num += (b[i] - ax[i]).abs();
        den += (ax[i] - w).abs() + (b[i] - w).abs();
    }
    num / den.max(f64::MIN_POSITIVE)
}

/// Norm factor of [`residual_norm`] for converting a normalized tolerance
/// into the absolute l2-ish budget the Krylov solvers stop on.
pub fn norm_factor(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = spmv(a, x).expect("norm_factor: size mismatch");
    let xbar = x.iter().sum::<f64>() / x.len() as f64;
    let mut den = 0.0;
    for i in 0..a.n {
        let rowsum: f64 = (a.row_ptr[i]..a.row_ptr[i + 1]).map(|k| a.vals[k]).sum();
        let w = xbar * rowsum;
        den += (ax[i] - w).abs() + (b[i] - w).abs();
    }
    den.max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Pcg,
    BiCgStab,
    AmgPcg,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverControls {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub kind: SolverKind,
}

impl SolverControls {
    pub fn new(kind: SolverKind) -> SolverControls {
        SolverControls {
            abs_tol: 1e-12,
            rel_tol: 0.0,
            max_iter: 1000,
            kind,
        }
    }

    fn validate(&self) -> Result<(), SparseError> {
        if !(self.abs_tol >= 0.0) {
            return Err(SparseError::BadControls(format!(
                "absTol {} must be >= 0",
                self.abs_tol
            )));
        }
        if !(0.0..1.0).contains(&self.rel_tol) {
            return Err(SparseError::BadControls(format!(
                "relTol {} must lie in [0,1)",
                self.rel_tol
            )));
        }
        if self.max_iter < 1 {
            return Err(SparseError::BadControls("maxIter must be >= 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one linear solve. Residuals are unpreconditioned l2 norms.
#[derive(Debug, Clone)]
pub struct SolveStats {
    pub iterations: usize,
    pub converged: bool,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub note: Option<String>,
}

fn jacobi_diag(a: &CsrMatrix) -> Result<Vec<f64>, SparseError> {
    let d = a.diagonal();
    for (row, &v) in d.iter().enumerate() {
        if v == 0.0 {
            return Err(SparseError::ZeroDiagonal { row });
        }
    }
    Ok(d)
}

/// Conjugate gradients with a caller-supplied preconditioner application
/// z = M^-1 r. Stops when ||b - Ax||2 <= max(absTol, relTol * ||b - Ax0||2).
fn pcg_with_precond(
    a: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    controls: &SolverControls,
    precond: &mut dyn FnMut(&[f64], &mut [f64]),
) -> Result<(Vec<f64>, SolveStats), SparseError> {
    controls.validate()?;
    if b.len() != a.n || x0.len() != a.n {
        return Err(SparseError::SizeMismatch {
            expected: a.n,
            found: b.len().max(x0.len()),
        });
    }
    let mut x = x0.to_vec();
    let mut r = vec![0.0; a.n];
    spmv_into(a, &x, &mut r);
    for i in 0..a.n {
        r[i] = b[i] - r[i];
    }
    let res0 = norm2(&r);
    let mut stats = SolveStats {
        iterations: 0,
        converged: true,
        initial_residual: res0,
        final_residual: res0,
        note: None,
    };
    if res0 <= controls.abs_tol {
        return Ok((x, stats));
    }
    let target = controls.abs_tol.max(controls.rel_tol * res0);
    let mut z = vec![0.0; a.n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; a.n];
    for it in 1..=controls.max_iter {
        spmv_into(a, &p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(SparseError::Breakdown(format!(
                "p^T A p = {pap:e} <= 0 at iteration {it}, matrix is not SPD"
            )));
        }
        let alpha = rz / pap;
        for i in 0..a.n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = norm2(&r);
        stats.iterations = it;
        stats.final_residual = res;
        if res <= target {
            return Ok((x, stats));
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..a.n {
            p[i] = z[i] + beta * p[i];
        }
    }
    stats.converged = false;
    Ok((x, stats))
}

/// Jacobi-preconditioned conjugate gradients for symmetric positive
/// (semi)definite systems.
pub fn pcg_solve(
    a: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    controls: &SolverControls,
) -> Result<(Vec<f64>, SolveStats), SparseError> {
    let d = jacobi_diag(a)?;
    pcg_with_precond(a, b, x0, controls, &mut |r, z| {
        for i in 0..r.len() {
            z[i] = r[i] / d[i];
        }
    })
}

/// Jacobi-preconditioned BiCGStab for the asymmetric systems convection
/// produces. Same stopping rule as [`pcg_solve`]; rho or omega breakdown is
/// reported as non-convergence with a note rather than an error.
pub fn bicgstab_solve(
    a: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    controls: &SolverControls,
) -> Result<(Vec<f64>, SolveStats), SparseError> {
    controls.validate()?;
    if b.len() != a.n || x0.len() != a.n {
        return Err(SparseError::SizeMismatch {
            expected: a.n,
            found: b.len().max(x0.len()),
        });
    }
    let d = jacobi_diag(a)?;
    let mut x = x0.to_vec();
    let mut r = vec![0.0; a.n];
    spmv_into(a, &x, &mut r);
    for i in 0..a.n {
        r[i] = b[i] - r[i];
    }
    let res0 = norm2(&r);
    let mut stats = SolveStats {
        iterations: 0,
        converged: true,
        initial_residual: res0,
        final_residual: res0,
        note: None,
    };
    if res0 <= controls.abs_tol {
        return Ok((x, stats));
    }
    let target = controls.abs_tol.max(controls.rel_tol * res0);
    let rhat = r.clone();
    let mut rho_prev = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; a.n];
    let mut p = vec![0.0; a.n];
    let mut phat = vec![0.0; a.n];
    let mut shat = vec![0.0; a.n];
    let mut t = vec![0.0; a.n];
    for it in 1..=controls.max_iter {
        let rho = dot(&rhat, &r);
        if rho == 0.0 {
            stats.converged = false;
            stats.iterations = it;
            stats.note = Some(format!("rho breakdown at iteration {it}"));
            return Ok((x, stats));
        }
        let beta = (rho / rho_prev) * (alpha / omega);
        for i in 0..a.n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        for i in 0..a.n {
            phat[i] = p[i] / d[i];
        }
        spmv_into(a, &phat, &mut v);
        let rhat_v = dot(&rhat, &v);
        if rhat_v == 0.0 {
            stats.converged = false;
            stats.iterations = it;
            stats.note = Some(format!("rhat.v breakdown at iteration {it}"));
            return Ok((x, stats));
        }
        alpha = rho / rhat_v;
        // s reuses r's storage conceptually; keep it explicit for clarity.
        for i in 0..a.n {
            r[i] -= alpha * v[i];
        }
        let res_half = norm2(&r);
        if res_half <= target {
            for i in 0..a.n {
                x[i] += alpha * phat[i];
            }
            stats.iterations = it;
            stats.final_residual = res_half;
            return Ok((x, stats));
        }
        for i in 0..a.n {
            shat[i] = r[i] / d[i];
        }
        spmv_into(a, &shat, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            stats.converged = false;
            stats.iterations = it;
            stats.note = Some(format!("t.t breakdown at iteration {it}"));
            return Ok((x, stats));
        }
        omega = dot(&t, &r) / tt;
        for i in 0..a.n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] -= omega * t[i];
        }
        let res = norm2(&r);
        stats.iterations = it;
        stats.final_residual = res;
        if res <= target {
            return Ok((x, stats));
        }
        if omega == 0.0 {
            stats.converged = false;
            stats.note = Some(format!("omega breakdown at iteration {it}"));
            return Ok((x, stats));
        }
        rho_prev = rho;
    }
    stats.converged = false;
    Ok((x, stats))
}

#[derive(Clone, Copy)]
pub enum Sweep {
    Forward,
    Backward,
}

/// One Gauss-Seidel sweep in a fixed lexicographic order (sequential, so the
/// result is schedule-independent).
pub fn gauss_seidel_sweep(a: &CsrMatrix, x: &mut [f64], b: &[f64], sweep: Sweep) {
    let update = |x: &mut [f64], i: usize| {
        let mut acc = b[i];
        let mut diag = 0.0;
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            let j = a.col_idx[k];
            if j == i {
                diag = a.vals[k];
            } else {
                acc -= a.vals[k] * x[j];
            }
        }
        x[i] = acc / diag;
    };
    match sweep {
        Sweep::Forward => (0..a.n).for_each(|i| update(x, i)),
        Sweep::Backward => (0..a.n).rev().for_each(|i| update(x, i)),
    }
}

/// Dense LU with partial pivoting for the coarsest multigrid level. Pivots
/// smaller than a scaled floor are clamped so the singular coarse operators a
/// fully periodic pressure equation produces stay solvable.
#[derive(Debug, Clone)]
pub struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl DenseLu {
    pub fn factor(mut a: Vec<f64>, n: usize) -> DenseLu {
        let scale = a.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let floor = (scale * 1e-13).max(f64::MIN_POSITIVE);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut piv = k;
            for i in k + 1..n {
                if a[i * n + k].abs() > a[piv * n + k].abs() {
                    piv = i;
                }
            }
            if piv != k {
                for j in 0..n {
                    a.swap(k * n + j, piv * n + j);
                }
                perm.swap(k, piv);
            }
            if a[k * n + k].abs() < floor {
                a[k * n + k] = if a[k * n + k] < 0.0 { -floor } else { floor };
            }
            let inv = 1.0 / a[k * n + k];
            for i in k + 1..n {
                let l = a[i * n + k] * inv;
                a[i * n + k] = l;
                for j in k + 1..n {
                    a[i * n + j] -= l * a[k * n + j];
                }
            }
        }
        DenseLu { n, lu: a, perm }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            for j in 0..i {
                y[i] -= self.lu[i * n + j] * y[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                y[i] -= self.lu[i * n + j] * y[j];
            }
            y[i] /= self.lu[i * n + i];
        }
        y
    }
}

/// One grid level. `aggregate[i]` maps fine cell i to its coarse index on the
/// next level; empty on the coarsest level.
#[derive(Debug, Clone)]
pub struct AmgLevel {
    pub a: CsrMatrix,
    pub aggregate: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AmgHierarchy {
    pub levels: Vec<AmgLevel>,
    coarse_lu: DenseLu,
}

/// Per-level work vectors so repeated V-cycles do not allocate.
pub struct AmgScratch {
    x: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
}

const AMG_COARSEST: usize = 16;

/// Pairwise greedy aggregation: unaggregated cells pair with their strongest
/// unaggregated neighbor by |a_ij|, ties to the smallest column index.
fn aggregate(a: &CsrMatrix) -> (Vec<usize>, usize) {
    const UNSET: usize = usize::MAX;
    let mut agg = vec![UNSET; a.n];
    let mut next = 0;
    for i in 0..a.n {
        if agg[i] != UNSET {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            let j = a.col_idx[k];
            if j == i || agg[j] != UNSET {
                continue;
            }
            let s = a.vals[k].abs();
            if best.map_or(true, |(_, bs)| s > bs) {
                best = Some((j, s));
            }
        }
        agg[i] = next;
        if let Some((j, _)) = best {
            agg[j] = next;
        }
        next += 1;
    }
    (agg, next)
}

/// Galerkin coarse operator A_c = P^T A P for piecewise-constant P.
fn galerkin(a: &CsrMatrix, agg: &[usize], n_coarse: usize) -> CsrMatrix {
    use std::collections::BTreeMap;
    let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..a.n {
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            *acc.entry((agg[i], agg[a.col_idx[k]])).or_insert(0.0) += a.vals[k];
        }
    }
    let mut row_ptr = vec![0usize; n_coarse + 1];
    let mut col_idx = Vec::with_capacity(acc.len());
    let mut vals = Vec::with_capacity(acc.len());
    let mut diag_ptr = vec![usize::MAX; n_coarse];
    // BTreeMap iterates in (row, col) order, so rows fill sequentially.
    for (&(r, c), &v) in &acc {
        if r == c {
            diag_ptr[r] = vals.len();
        }
        col_idx.push(c);
        vals.push(v);
        row_ptr[r + 1] = vals.len();
    }
    // Keep row_ptr monotone across empty rows (cannot happen while every
    // aggregate inherits a diagonal, but cheap to guarantee).
    for r in 1..=n_coarse {
        if row_ptr[r] < row_ptr[r - 1] {
            row_ptr[r] = row_ptr[r - 1];
        }
    }
    CsrMatrix {
        n: n_coarse,
        row_ptr,
        col_idx,
        vals,
        diag_ptr,
    }
}

/// Build the multigrid hierarchy: coarsen until at most [`AMG_COARSEST`]
/// unknowns remain (or coarsening stalls), then factor the coarsest level.
pub fn amg_setup(a: &CsrMatrix) -> Result<AmgHierarchy, SparseError> {
    for i in 0..a.n {
        let zero = (a.row_ptr[i]..a.row_ptr[i + 1]).all(|k| a.vals[k] == 0.0);
        if zero {
            return Err(SparseError::ZeroRow { row: i });
        }
    }
    let mut levels = Vec::new();
    let mut cur = a.clone();
    while cur.n > AMG_COARSEST && levels.len() < 40 {
        let (agg, n_coarse) = aggregate(&cur);
        if n_coarse >= cur.n {
            break;
        }
        let coarse = galerkin(&cur, &agg, n_coarse);
        levels.push(AmgLevel {
            a: cur,
            aggregate: agg,
        });
        cur = coarse;
    }
    let n = cur.n;
    let mut dense = vec![0.0; n * n];
    for i in 0..n {
        for k in cur.row_ptr[i]..cur.row_ptr[i + 1] {
            dense[i * n + cur.col_idx[k]] = cur.vals[k];
        }
    }
    let coarse_lu = DenseLu::factor(dense, n);
    levels.push(AmgLevel {
        a: cur,
        aggregate: Vec::new(),
    });
    Ok(AmgHierarchy { levels, coarse_lu })
}

impl AmgHierarchy {
    pub fn scratch(&self) -> AmgScratch {
        let sizes: Vec<usize> = self.levels.iter().map(|l| l.a.n).collect();
        AmgScratch {
            x: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            b: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            r: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.a.n).collect()
    }
}

/// One V-cycle for A x = b starting from x = 0: forward Gauss-Seidel down,
/// direct solve on the coarsest level, backward Gauss-Seidel up. The
/// forward/backward pairing keeps the cycle a symmetric operator, so it is a
/// valid PCG preconditioner.
pub fn amg_vcycle(h: &AmgHierarchy, b: &[f64], x: &mut [f64], ws: &mut AmgScratch) {
    let depth = h.levels.len();
    ws.b[0].copy_from_slice(b);
    for x_level in ws.x.iter_mut() {
        x_level.iter_mut().for_each(|v| *v = 0.0);
    }
    for k in 0..depth - 1 {
        let level = &h.levels[k];
        // Split borrows: b and r of this level, b of the next.
        let (b_head, b_tail) = ws.b.split_at_mut(k + 1);
        let bk = &b_head[k];
        let bc = &mut b_tail[0];
        gauss_seidel_sweep(&level.a, &mut ws.x[k], bk, Sweep::Forward);
        spmv_into(&level.a, &ws.x[k], &mut ws.r[k]);
        for i in 0..level.a.n {
            ws.r[k][i] = bk[i] - ws.r[k][i];
        }
        bc.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..level.a.n {
            bc[level.aggregate[i]] += ws.r[k][i];
        }
    }
    let coarse_x = h.coarse_lu.solve(&ws.b[depth - 1]);
    ws.x[depth - 1].copy_from_slice(&coarse_x);
    for k in (0..depth - 1).rev() {
        let level = &h.levels[k];
        let (x_head, x_tail) = ws.x.split_at_mut(k + 1);
        let xk = &mut x_head[k];
        let xc = &x_tail[0];
        for i in 0..level.a.n {
            xk[i] += xc[level.aggregate[i]];
        }
        gauss_seidel_sweep(&level.a, xk, &ws.b[k], Sweep::Backward);
    }
    x.copy_from_slice(&ws.x[0]);
}

/// PCG preconditioned with one AMG V-cycle per application.
pub fn amg_pcg_solve(
    a: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    controls: &SolverControls,
) -> Result<(Vec<f64>, SolveStats), SparseError> {
    let h = amg_setup(a)?;
    let mut ws = h.scratch();
    pcg_with_precond(a, b, x0, controls, &mut |r, z| amg_vcycle(&h, r, z, &mut ws))
}

/// Dispatch on the configured solver kind.
pub fn solve(
    a: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    controls: &SolverControls,
) -> Result<(Vec<f64>, SolveStats), SparseError> {
    match controls.kind {
        SolverKind::Pcg => pcg_solve(a, b, x0, controls),
        SolverKind::BiCgStab => bicgstab_solve(a, b, x0, controls),
        SolverKind::AmgPcg => amg_pcg_solve(a, b, x0, controls),
    }
}
