//! The penalized D-trace problem
//!
//! ```text
//! minimize  ½‖ΩA‖²_F − ⟨Ω, I⟩ + λ‖Ω‖₁,off   over symmetric Ω,
//! ```
//!
//! where `AAᵀ = Σ̂`, together with the optimality machinery shared by all
//! solvers: the gradient map `h(Ω) = ½(ΩΣ̂ + Σ̂Ω) − I`, the proximal residual
//! `R_λ(Ω) = Ω − Prox_{λθ}(Ω − h(Ω))` and the relative KKT residual
//! `η = ‖R_λ(Ω)‖_F / (1 + ‖h(Ω)‖_F + ‖Ω‖_F)`.
//!
//! The penalty `θ` only acts on off-diagonal entries, so `Prox_{λθ}` is the
//! identity on the diagonal and the box `B_λ` pins the diagonal to zero.

use log::debug;

use crate::error::{Error, Result};
use crate::linalg::{gemm, DenseMatrix};
use crate::reduction::SparsityPattern;

/// Variances at or below this are treated as constant variables.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Default number of rows per block when streaming `h(Ω)`.
pub const DEFAULT_BLOCK_ROWS: usize = 256;

/// The `p × n` factor `A` of the sample covariance, `AAᵀ = Σ̂`.
#[derive(Clone, Debug)]
pub struct CovarianceFactor {
    a: DenseMatrix,
    sigma_diag: Vec<f64>,
}

impl CovarianceFactor {
    pub fn new(a: DenseMatrix) -> Self {
        if a.cols() > a.rows() {
            debug!(
                "covariance factor has n = {} > p = {}; the solvers assume the high-dimensional regime",
                a.cols(),
                a.rows()
            );
        }
        let sigma_diag = (0..a.rows())
            .map(|i| crate::linalg::dot(a.row(i), a.row(i)))
            .collect();
        Self { a, sigma_diag }
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.a.rows()
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.a.cols()
    }

    #[inline]
    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    /// Diagonal of `Σ̂`.
    pub fn sigma_diag(&self) -> &[f64] {
        &self.sigma_diag
    }

    pub fn sigma_entry(&self, i: usize, j: usize) -> f64 {
        crate::linalg::dot(self.a.row(i), self.a.row(j))
    }

    /// Materializes `Σ̂ = AAᵀ`. Only meant for small `p`.
    pub fn covariance(&self) -> DenseMatrix {
        self.a.matmul_t(&self.a)
    }

    /// First variable whose variance is degenerate, if any.
    pub fn check_variances(&self) -> Result<()> {
        match self
            .sigma_diag
            .iter()
            .position(|&v| !(v > DEGENERATE_VARIANCE))
        {
            Some(index) => Err(Error::DegenerateVariable {
                index,
                variance: self.sigma_diag[index],
            }),
            None => Ok(()),
        }
    }
}

/// A symmetric `p × p` matrix stored as its values on a [`SparsityPattern`]
/// (upper triangle, diagonal included, row-major order). Entries off the
/// pattern are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSymMatrix {
    pattern: SparsityPattern,
    omega: Vec<f64>,
}

impl SparseSymMatrix {
    pub fn new(pattern: SparsityPattern, omega: Vec<f64>) -> Result<Self> {
        if omega.len() != pattern.t() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a pattern with t = {}",
                omega.len(),
                pattern.t()
            )));
        }
        if omega.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite matrix value".into()));
        }
        Ok(Self { pattern, omega })
    }

    pub fn zeros(pattern: SparsityPattern) -> Self {
        let t = pattern.t();
        Self {
            pattern,
            omega: vec![0.0; t],
        }
    }

    /// Keeps the entries of `m` that are nonzero (|v| > `threshold`) plus the diagonal.
    pub fn from_dense(m: &DenseMatrix, threshold: f64) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch("from_dense needs a square matrix".into()));
        }
        let p = m.rows();
        let mut kept = Vec::new();
        for i in 0..p {
            for j in i..p {
                if i == j || m[(i, j)].abs() > threshold {
                    kept.push((i, j));
                }
            }
        }
        let pattern = SparsityPattern::new(p, kept)?;
        let omega = pattern.positions().iter().map(|&(i, j)| m[(i, j)]).collect();
        Self::new(pattern, omega)
    }

    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.omega
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.omega
    }

    pub fn into_parts(self) -> (SparsityPattern, Vec<f64>) {
        (self.pattern, self.omega)
    }

    pub fn p(&self) -> usize {
        self.pattern.p()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.index_of(i, j).map_or(0.0, |k| self.omega[k])
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let p = self.p();
        let mut m = DenseMatrix::zeros(p, p);
        for (k, &(i, j)) in self.pattern.positions().iter().enumerate() {
            m[(i, j)] = self.omega[k];
            m[(j, i)] = self.omega[k];
        }
        m
    }

    /// Number of nonzero off-diagonal entries (both triangles) with |v| > `threshold`.
    pub fn off_diagonal_count(&self, threshold: f64) -> usize {
        self.pattern
            .positions()
            .iter()
            .zip(&self.omega)
            .filter(|(&(i, j), v)| i != j && v.abs() > threshold)
            .count()
            * 2
    }

    /// Same matrix carried on a pattern that contains this one.
    pub fn embed(&self, target: &SparsityPattern) -> Result<Self> {
        let mut out = vec![0.0; target.t()];
        for (k, &(i, j)) in self.pattern.positions().iter().enumerate() {
            let dst = target.index_of(i, j).ok_or_else(|| {
                Error::DimensionMismatch(format!("position ({i},{j}) missing from target pattern"))
            })?;
            out[dst] = self.omega[k];
        }
        Self::new(target.clone(), out)
    }

    /// Drops exact zeros off the diagonal from the pattern.
    pub fn compact(&self) -> Self {
        let mut kept = Vec::new();
        let mut vals = Vec::new();
        for (k, &(i, j)) in self.pattern.positions().iter().enumerate() {
            if i == j || self.omega[k] != 0.0 {
                kept.push((i, j));
                vals.push(self.omega[k]);
            }
        }
        let pattern = SparsityPattern::new(self.p(), kept).expect("subset of a valid pattern");
        Self {
            pattern,
            omega: vals,
        }
    }
}

/// Common view of dense and sparse symmetric matrices for the routines that
/// accept either.
pub trait SymOperand {
    fn dim(&self) -> usize;

    /// `Ω · B` for `B` with `dim()` rows.
    fn times(&self, b: &DenseMatrix) -> DenseMatrix;

    fn frobenius_norm(&self) -> f64;

    fn trace(&self) -> f64;

    /// `Σ_{i≠j} |Ω_ij|`.
    fn off_diagonal_l1(&self) -> f64;

    /// Writes `Ω[rows, col_start..p]` into `out` (row-major, width `p − col_start`).
    fn fill_block(&self, rows: std::ops::Range<usize>, col_start: usize, out: &mut [f64]);
}

impl SymOperand for SparseSymMatrix {
    fn dim(&self) -> usize {
        self.p()
    }

    fn times(&self, b: &DenseMatrix) -> DenseMatrix {
        crate::reduction::sym_times(&self.pattern, &self.omega, b)
    }

    fn frobenius_norm(&self) -> f64 {
        let mut s = 0.0;
        for (k, &(i, j)) in self.pattern.positions().iter().enumerate() {
            let v = self.omega[k] * self.omega[k];
            s += if i == j { v } else { 2.0 * v };
        }
        s.sqrt()
    }

    fn trace(&self) -> f64 {
        self.pattern
            .diagonal_indices()
            .iter()
            .map(|&k| self.omega[k])
            .sum()
    }

    fn off_diagonal_l1(&self) -> f64 {
        2.0 * self
            .pattern
            .positions()
            .iter()
            .zip(&self.omega)
            .filter(|(&(i, j), _)| i != j)
            .map(|(_, v)| v.abs())
            .sum::<f64>()
    }

    fn fill_block(&self, rows: std::ops::Range<usize>, col_start: usize, out: &mut [f64]) {
        let width = self.p() - col_start;
        out.iter_mut().for_each(|v| *v = 0.0);
        for r in rows.clone() {
            let base = (r - rows.start) * width;
            for &(c, k) in self.pattern.row_entries(r) {
                if c >= col_start {
                    out[base + c - col_start] = self.omega[k];
                }
            }
        }
    }
}

impl SymOperand for DenseMatrix {
    fn dim(&self) -> usize {
        self.rows()
    }

    fn times(&self, b: &DenseMatrix) -> DenseMatrix {
        self.matmul(b)
    }

    fn frobenius_norm(&self) -> f64 {
        DenseMatrix::frobenius_norm(self)
    }

    fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    fn off_diagonal_l1(&self) -> f64 {
        let p = self.rows();
        let mut s = 0.0;
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    s += self[(i, j)].abs();
                }
            }
        }
        s
    }

    fn fill_block(&self, rows: std::ops::Range<usize>, col_start: usize, out: &mut [f64]) {
        let width = self.cols() - col_start;
        for r in rows.clone() {
            let base = (r - rows.start) * width;
            out[base..base + width].copy_from_slice(&self.row(r)[col_start..]);
        }
    }
}

/// `λ > 0` together with the factor it penalizes.
#[derive(Clone, Debug)]
pub struct PenalizedProblem {
    pub factor: CovarianceFactor,
    pub lambda: f64,
}

impl PenalizedProblem {
    pub fn new(factor: CovarianceFactor, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(Self { factor, lambda })
    }
}

fn check_dims(omega: &dyn SymOperand, factor: &CovarianceFactor) -> Result<()> {
    if omega.dim() != factor.p() {
        return Err(Error::DimensionMismatch(format!(
            "matrix of order {} against factor with p = {}",
            omega.dim(),
            factor.p()
        )));
    }
    Ok(())
}

/// Dense `h(Ω) = ½(ΩΣ̂ + Σ̂Ω) − I`, computed through `M = ΩA`.
pub fn h_map(omega: &dyn SymOperand, factor: &CovarianceFactor) -> Result<DenseMatrix> {
    check_dims(omega, factor)?;
    let p = factor.p();
    let m = omega.times(factor.a());
    let mut h = DenseMatrix::zeros(p, p);
    gemm(0.5, m.view(), factor.a().view().t(), 0.0, &mut h);
    gemm(0.5, factor.a().view(), m.view().t(), 1.0, &mut h);
    for i in 0..p {
        h[(i, i)] -= 1.0;
    }
    // exact symmetry regardless of summation order in the two products
    h.symmetrize();
    Ok(h)
}

/// Streams the upper triangle (`i ≤ j`) of `h(Ω)` in row blocks, calling
/// `visit(i, j, h_ij, Ω_ij)` for every entry. Memory is `O(block · p)`.
pub fn scan_upper(
    omega: &dyn SymOperand,
    factor: &CovarianceFactor,
    block_rows: usize,
    mut visit: impl FnMut(usize, usize, f64, f64),
) -> Result<()> {
    check_dims(omega, factor)?;
    let p = factor.p();
    let block_rows = block_rows.max(1);
    let a = factor.a();
    let m = omega.times(a);
    let mut start = 0;
    while start < p {
        let end = (start + block_rows).min(p);
        let width = p - start;
        let mut hb = DenseMatrix::zeros(end - start, width);
        gemm(
            0.5,
            m.row_block(start, end),
            a.row_block(start, p).t(),
            0.0,
            &mut hb,
        );
        gemm(
            0.5,
            a.row_block(start, end),
            m.row_block(start, p).t(),
            1.0,
            &mut hb,
        );
        let mut ob = vec![0.0; (end - start) * width];
        omega.fill_block(start..end, start, &mut ob);
        for i in start..end {
            let r = i - start;
            let hrow = &hb.row(r)[r..];
            let orow = &ob[r * width + r..(r + 1) * width];
            visit(i, i, hrow[0] - 1.0, orow[0]);
            for c in 1..hrow.len() {
                visit(i, i + c, hrow[c], orow[c]);
            }
        }
        start = end;
    }
    Ok(())
}

/// Soft-thresholds off-diagonal entries at `λ`; the diagonal is unchanged.
pub fn prox_theta(m: &DenseMatrix, lambda: f64) -> DenseMatrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if i != j {
                out[(i, j)] = soft_threshold(m[(i, j)], lambda);
            }
        }
    }
    out
}

/// Projection onto `B_λ`: zero diagonal, off-diagonals clipped to `[−λ, λ]`.
pub fn proj_b_lambda(m: &DenseMatrix, lambda: f64) -> DenseMatrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out[(i, j)] = if i == j {
                0.0
            } else {
                m[(i, j)].clamp(-lambda, lambda)
            };
        }
    }
    out
}

#[inline]
pub fn soft_threshold(v: f64, lambda: f64) -> f64 {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        0.0
    }
}

/// Residual entry `Ω_ij − Prox(Ω_ij − h_ij)`.
#[inline]
pub(crate) fn residual_entry(diagonal: bool, h: f64, omega: f64, lambda: f64) -> f64 {
    if diagonal {
        h
    } else {
        omega - soft_threshold(omega - h, lambda)
    }
}

/// Norms that make up the relative KKT residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualReport {
    /// `‖R_λ(Ω)‖_F`
    pub r_norm: f64,
    /// `‖h(Ω)‖_F`
    pub h_norm: f64,
    /// `‖Ω‖_F`
    pub omega_norm: f64,
    /// `‖R‖ / (1 + ‖h‖ + ‖Ω‖)`
    pub eta: f64,
}

impl ResidualReport {
    pub(crate) fn from_squares(r2: f64, h2: f64, omega_norm: f64) -> Self {
        let r_norm = r2.sqrt();
        let h_norm = h2.sqrt();
        Self {
            r_norm,
            h_norm,
            omega_norm,
            eta: r_norm / (1.0 + h_norm + omega_norm),
        }
    }
}

/// `‖R_λ(Ω)‖_F` and `η`, streamed in blocks of [`DEFAULT_BLOCK_ROWS`] rows.
pub fn residual_map(
    omega: &dyn SymOperand,
    factor: &CovarianceFactor,
    lambda: f64,
) -> Result<ResidualReport> {
    residual_map_blocked(omega, factor, lambda, DEFAULT_BLOCK_ROWS)
}

pub fn residual_map_blocked(
    omega: &dyn SymOperand,
    factor: &CovarianceFactor,
    lambda: f64,
    block_rows: usize,
) -> Result<ResidualReport> {
    let (mut r2, mut h2) = (0.0, 0.0);
    scan_upper(omega, factor, block_rows, |i, j, h, o| {
        let r = residual_entry(i == j, h, o, lambda);
        let w = if i == j { 1.0 } else { 2.0 };
        r2 += w * r * r;
        h2 += w * h * h;
    })?;
    Ok(ResidualReport::from_squares(r2, h2, omega.frobenius_norm()))
}

/// Dense `R_λ(Ω) = Ω − Prox_{λθ}(Ω − h(Ω))`.
pub fn residual_matrix(
    omega: &DenseMatrix,
    factor: &CovarianceFactor,
    lambda: f64,
) -> Result<DenseMatrix> {
    let h = h_map(omega, factor)?;
    Ok(omega.sub(&prox_theta(&omega.sub(&h), lambda)))
}

/// Dense `R_λ(Ω) = h(Ω) + Proj_{B_λ}(Ω − h(Ω))`; equal to [`residual_matrix`]
/// by the Moreau decomposition.
pub fn residual_matrix_projection(
    omega: &DenseMatrix,
    factor: &CovarianceFactor,
    lambda: f64,
) -> Result<DenseMatrix> {
    let h = h_map(omega, factor)?;
    Ok(h.add(&proj_b_lambda(&omega.sub(&h), lambda)))
}

/// Largest `λ` at which the optimum can still carry off-diagonal entries,
/// with the pair attaining it (`None` when `p < 2`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaMax {
    pub value: f64,
    pub pair: Option<(usize, usize)>,
}

/// `λ_max = max_{i<j} ½|Σ̂_ij/Σ̂_ii + Σ̂_ij/Σ̂_jj|`, streamed over row blocks of `Σ̂`.
pub fn lambda_max(factor: &CovarianceFactor) -> Result<f64> {
    lambda_max_with_pair(factor).map(|l| l.value)
}

pub fn lambda_max_with_pair(factor: &CovarianceFactor) -> Result<LambdaMax> {
    factor.check_variances()?;
    let p = factor.p();
    let a = factor.a();
    let d = factor.sigma_diag();
    let inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
    let mut best = LambdaMax {
        value: 0.0,
        pair: None,
    };
    let mut start = 0;
    while start < p {
        let end = (start + DEFAULT_BLOCK_ROWS).min(p);
        let width = p - start;
        let mut sb = DenseMatrix::zeros(end - start, width);
        gemm(1.0, a.row_block(start, end), a.row_block(start, p).t(), 0.0, &mut sb);
        for i in start..end {
            let r = i - start;
            let row = sb.row(r);
            for c in r + 1..width {
                let j = start + c;
                let v = 0.5 * (row[c] * (inv[i] + inv[j])).abs();
                if v > best.value || best.pair.is_none() {
                    best = LambdaMax {
                        value: v,
                        pair: Some((i, j)),
                    };
                }
            }
        }
        start = end;
    }
    Ok(best)
}

/// `Ω = diag(1/Σ̂_ii)`, optimal for every `λ ≥ λ_max`.
pub fn diagonal_solution(factor: &CovarianceFactor) -> Result<SparseSymMatrix> {
    factor.check_variances()?;
    let pattern = SparsityPattern::diagonal(factor.p());
    let omega = factor.sigma_diag().iter().map(|v| 1.0 / v).collect();
    SparseSymMatrix::new(pattern, omega)
}

/// `½‖ΩA‖²_F − tr Ω + λ‖Ω‖₁,off`.
pub fn objective(omega: &dyn SymOperand, factor: &CovarianceFactor, lambda: f64) -> Result<f64> {
    check_dims(omega, factor)?;
    let m = omega.times(factor.a());
    let fm = m.frobenius_norm();
    Ok(0.5 * fm * fm - omega.trace() + lambda * omega.off_diagonal_l1())
}
