//! Dense storage and the numerical kernels shared by every solver.
//!
//! [`DenseMatrix`] is stored **row-major**: entry `(i, j)` lives at
//! `data[i * cols + j]`. All `p × n` matrices in this crate (the covariance
//! factor `A`, dual iterates `Y`, products `ΩA`) keep one variable per row, so
//! the kernels that dominate the solvers (row dot products and row axpys over
//! the `n` columns) touch contiguous memory.

use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Seed of the start vector used by every power iteration.
const POWER_SEED: u64 = 0x5eed_0f_d7ace;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Wraps row-major `data`, rejecting wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::RaggedRows {
                    row: r,
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(1.0, self.view(), other.view(), 0.0, &mut out);
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &DenseMatrix) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let mut out = Self::zeros(self.rows, other.rows);
        gemm(1.0, self.view(), other.view().t(), 0.0, &mut out);
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &DenseMatrix) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let mut out = Self::zeros(self.cols, other.cols);
        gemm(1.0, self.view().t(), other.view(), 0.0, &mut out);
        out
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    /// View of rows `start..end`.
    pub fn row_block(&self, start: usize, end: usize) -> MatRef<'_> {
        MatRef {
            data: &self.data[start * self.cols..end * self.cols],
            rows: end - start,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// Frobenius inner product `⟨self, other⟩`.
    pub fn frobenius_dot(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        dot(&self.data, &other.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &DenseMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    /// Replaces the matrix by `½(M + Mᵀ)`.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        for i in 0..self.rows {
            for j in 0..i {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Strided read-only view used to feed `gemm` without copies.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `c ← alpha · a · b + beta · c` with `c` row-major.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut DenseMatrix) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        c.scale(beta);
        return;
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let rsc = c.cols as isize;
    // SAFETY: every view was built from a slice holding at least
    // (rows-1)*rs + (cols-1)*cs + 1 elements, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            rsc,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators keep the loop vectorizable; the order is fixed, so
    // results stay reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A linear operator on flat vectors of length `dim()`.
pub trait LinearMap {
    fn dim(&self) -> usize;

    /// Writes `M·x` into `out` (overwriting it).
    fn apply(&self, x: &[f64], out: &mut [f64]);

    fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.apply(x, &mut out);
        out
    }
}

/// Adapts a closure into a [`LinearMap`].
pub struct FnMap<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64])> FnMap<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64])> LinearMap for FnMap<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

impl LinearMap for DenseMatrix {
    fn dim(&self) -> usize {
        assert!(self.is_square(), "only square matrices act as linear maps");
        self.rows
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }
}

/// Lower-triangular `L` with `LLᵀ = M`.
pub fn cholesky(m: &DenseMatrix) -> Result<DenseMatrix> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    let scale = m.diag().iter().fold(1.0f64, |s, d| s.max(d.abs()));
    let tiny = 1e-14 * scale;
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let ljj2 = m[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if !(ljj2 > tiny) {
            return Err(Error::NotPositiveDefinite {
                index: j,
                pivot: ljj2,
            });
        }
        let ljj = ljj2.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let s = m[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in 0..n {
        let s = x[i] - dot(&l.row(i)[..i], &x[..i]);
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let xi = x[i] / l[(i, i)];
        x[i] = xi;
        // column i of Lᵀ above the diagonal is row i of L left of the diagonal
        for k in 0..i {
            x[k] -= l[(i, k)] * xi;
        }
    }
    x
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iters: usize,
    pub residual_norm: f64,
    /// `false` when `max_iter` was hit first; `solution` is then the best iterate.
    pub converged: bool,
    /// Best residual norm seen after each iteration (index 0 is the start).
    pub history: Vec<f64>,
}

/// Conjugate gradient from a zero start. See [`conjugate_gradient_from`].
pub fn conjugate_gradient(
    op: &dyn LinearMap,
    rhs: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    conjugate_gradient_from(op, rhs, None, tol, max_iter)
}

/// Hestenes–Stiefel CG for a self-adjoint PSD `op`, stopping once
/// `‖op(v) − rhs‖ ≤ tol` (absolute).
pub fn conjugate_gradient_from(
    op: &dyn LinearMap,
    rhs: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    let n = op.dim();
    if rhs.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "cg rhs length {} for operator of dim {n}",
            rhs.len()
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("cg tolerance {tol}")));
    }
    let mut x = match x0 {
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };
    let mut r = rhs.to_vec();
    let mut q = vec![0.0; n];
    if x0.is_some() {
        op.apply(&x, &mut q);
        axpy(-1.0, &q, &mut r);
    }
    let mut rr = dot(&r, &r);
    let mut best_norm = rr.sqrt();
    let mut best_x: Option<Vec<f64>> = None;
    let mut history = vec![best_norm];
    if best_norm <= tol {
        return Ok(CgOutcome {
            solution: x,
            iters: 0,
            residual_norm: best_norm,
            converged: true,
            history,
        });
    }
    let mut d = r.clone();
    let mut iters = 0;
    while iters < max_iter {
        op.apply(&d, &mut q);
        let dq = dot(&d, &q);
        let dd = dot(&d, &d);
        let curvature = dq / dd;
        if !curvature.is_finite() || curvature < -1e-12 {
            return Err(Error::BreakdownDetected {
                iter: iters,
                curvature,
            });
        }
        if curvature <= f64::MIN_POSITIVE {
            break;
        }
        let alpha = rr / dq;
        axpy(alpha, &d, &mut x);
        axpy(-alpha, &q, &mut r);
        iters += 1;
        let rr_new = dot(&r, &r);
        let rnorm = rr_new.sqrt();
        if rnorm < best_norm {
            best_norm = rnorm;
            best_x = None;
        } else if best_x.is_none() {
            // the residual went up: remember where it was lowest
            let mut prev = x.clone();
            axpy(-alpha, &d, &mut prev);
            best_x = Some(prev);
        }
        history.push(best_norm);
        if rnorm <= tol {
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for (di, ri) in d.iter_mut().zip(&r) {
            *di = ri + beta * *di;
        }
    }
    let converged = best_norm <= tol;
    Ok(CgOutcome {
        solution: best_x.unwrap_or(x),
        iters,
        residual_norm: best_norm,
        converged,
        history,
    })
}

fn start_vector(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    v
}

/// Largest eigenvalue of a symmetric PSD operator by power iteration.
fn power_iteration(op: &dyn LinearMap, tol: f64, max_iter: usize) -> f64 {
    let n = op.dim();
    if n == 0 {
        return 0.0;
    }
    let mut v = start_vector(n);
    let mut w = vec![0.0; n];
    let mut estimate = 0.0;
    for _ in 0..max_iter {
        op.apply(&v, &mut w);
        let rayleigh = dot(&v, &w);
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
        let done = (rayleigh - estimate).abs() <= tol * rayleigh.abs();
        estimate = rayleigh;
        if done {
            break;
        }
    }
    estimate
}

const POWER_MAX_ITER: usize = 100_000;

/// Largest singular value of `m` via power iteration on `MᵀM`.
pub fn spectral_norm(m: &DenseMatrix, tol: f64) -> f64 {
    if m.max_abs() == 0.0 {
        return 0.0;
    }
    let gram = FnMap::new(m.cols(), |x: &[f64], out: &mut [f64]| {
        let mx: Vec<f64> = (0..m.rows()).map(|i| dot(m.row(i), x)).collect();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &s) in mx.iter().enumerate() {
            axpy(s, m.row(i), out);
        }
    });
    power_iteration(&gram, tol * tol, POWER_MAX_ITER).max(0.0).sqrt()
}

/// Spectral norm (largest |eigenvalue|) of a symmetric operator.
pub fn symmetric_spectral_norm(op: &dyn LinearMap, tol: f64) -> f64 {
    let n = op.dim();
    let squared = FnMap::new(n, |x: &[f64], out: &mut [f64]| {
        let mut tmp = vec![0.0; n];
        op.apply(x, &mut tmp);
        op.apply(&tmp, out);
    });
    power_iteration(&squared, tol * tol, POWER_MAX_ITER).max(0.0).sqrt()
}

/// Smallest eigenvalue of a symmetric operator by power iteration on the
/// shifted operator `sI − M`, where `s` bounds the spectrum.
pub fn smallest_eigenvalue(op: &dyn LinearMap, tol: f64) -> f64 {
    let n = op.dim();
    if n == 0 {
        return 0.0;
    }
    let shift = symmetric_spectral_norm(op, 1e-6) * 1.01 + 1e-12;
    let shifted = FnMap::new(n, |x: &[f64], out: &mut [f64]| {
        op.apply(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = shift * xi - *o;
        }
    });
    shift - power_iteration(&shifted, tol, POWER_MAX_ITER)
}

/// Central differences `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h`.
pub fn finite_diff_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let xi = probe[i];
            probe[i] = xi + h;
            let fp = f(&probe);
            probe[i] = xi - h;
            let fm = f(&probe);
            probe[i] = xi;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Eigendecomposition of a symmetric matrix: eigenvalues ascending and the
/// matching unit eigenvectors as columns.
pub fn symmetric_eigen(m: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    assert!(m.is_square());
    let n = m.rows();
    let mat = nalgebra::DMatrix::from_fn(n, n, |i, j| m[(i, j)]);
    let eig = nalgebra::SymmetricEigen::new(mat);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}
