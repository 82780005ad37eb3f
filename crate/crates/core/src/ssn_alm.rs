//! Inexact augmented Lagrangian method on the reduced dual
//!
//! ```text
//! minimize ½‖Y‖² + δ_{b_λ}(z)   s.t.  S(Y) + z − e1 = 0,
//! ```
//!
//! with multiplier `x` (so that `Ω = L†(x ∘ e3)`). Each outer step minimizes
//! `ψ(Y) = ½‖Y‖² − ‖x‖²/(2σ) + σ/2·dist²(f(Y), b_λ)`, `f(Y) = x/σ − S(Y) + e1`,
//! by a semismooth Newton method with CG inner solves and Armijo backtracking.

use std::io::Write;
use std::time::Instant;

use log::debug;

use crate::dtrace::{residual_entry, soft_threshold, CovarianceFactor, PenalizedProblem, ResidualReport, SparseSymMatrix};
use crate::error::{Error, Result};
use crate::linalg::{conjugate_gradient, dot, norm, DenseMatrix, LinearMap};
use crate::reduction::{s_apply_raw, s_star_raw, sym_times, x_to_omega, SparsityPattern};

/// Largest backtracking exponent tried before the line search gives up.
pub const MAX_LINE_SEARCH_STEPS: usize = 60;

#[derive(Clone, Debug, PartialEq)]
pub struct SsnConfig {
    pub mu: f64,
    pub eta_bar: f64,
    pub tau: f64,
    pub delta: f64,
    pub max_newton: usize,
    pub max_cg: usize,
}

impl Default for SsnConfig {
    fn default() -> Self {
        Self {
            mu: 1e-4,
            eta_bar: 0.5,
            tau: 0.2,
            delta: 0.5,
            max_newton: 50,
            max_cg: 200,
        }
    }
}

impl SsnConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mu > 0.0
            && self.mu < 0.5
            && self.eta_bar > 0.0
            && self.eta_bar < 1.0
            && self.tau > 0.0
            && self.tau <= 1.0
            && self.delta > 0.0
            && self.delta < 1.0
            && self.max_newton > 0
            && self.max_cg > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid SSN configuration {self:?}")))
        }
    }
}

/// Outer stopping rules and the penalty schedule.
///
/// Inner solves at outer step `k` stop once
/// `‖∇ψ‖ ≤ max(floor, min(√(τ_c/σ_k)·ε_k, θ'_k·‖S(Y) + z − e1‖))`
/// with `ε_k = eps_scale·rate^k` and `θ'_k = rate^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct StoppingPolicy {
    pub eps_scale: f64,
    pub rate: f64,
    pub tau_c: f64,
    pub inner_floor: f64,
    pub outer_eta_tol: f64,
    pub max_outer: usize,
    pub sigma0: f64,
    pub sigma_growth: f64,
    pub sigma_max: f64,
}

impl Default for StoppingPolicy {
    fn default() -> Self {
        Self {
            eps_scale: 0.5,
            rate: 0.7,
            tau_c: 1.0,
            inner_floor: 1e-12,
            outer_eta_tol: 1e-6,
            max_outer: 100,
            sigma0: 1.0,
            sigma_growth: 3.0,
            sigma_max: 1e6,
        }
    }
}

impl StoppingPolicy {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            outer_eta_tol: tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.eps_scale > 0.0
            && self.rate > 0.0
            && self.rate < 1.0
            && self.tau_c > 0.0
            && self.inner_floor > 0.0
            && self.outer_eta_tol > 0.0
            && self.max_outer > 0
            && self.sigma0 > 0.0
            && self.sigma_growth >= 1.0
            && self.sigma_max >= self.sigma0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid stopping policy {self:?}")))
        }
    }

    fn inner_tol(&self, k: usize, sigma: f64, primal_res: f64) -> f64 {
        let decay = self.rate.powi(k as i32);
        let a = (self.tau_c / sigma).sqrt() * self.eps_scale * decay;
        let b = decay * primal_res;
        a.min(b).max(self.inner_floor)
    }
}

/// Iterates of the reduced ALM.
#[derive(Clone, Debug)]
pub struct AlmState {
    pub y: DenseMatrix,
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub sigma: f64,
    pub k: usize,
}

/// Evaluations shared by ψ, its gradient and the Newton mask.
struct Inner<'a> {
    factor: &'a CovarianceFactor,
    pattern: &'a SparsityPattern,
    diag: Vec<bool>,
    x: &'a [f64],
    sigma: f64,
    lambda: f64,
}

impl<'a> Inner<'a> {
    fn new(
        x: &'a [f64],
        sigma: f64,
        lambda: f64,
        factor: &'a CovarianceFactor,
        pattern: &'a SparsityPattern,
    ) -> Self {
        Self {
            factor,
            pattern,
            diag: pattern.positions().iter().map(|&(i, j)| i == j).collect(),
            x,
            sigma,
            lambda,
        }
    }

    fn dims(&self) -> usize {
        self.factor.p() * self.factor.n()
    }

    /// `f(Y)` from a precomputed `S(Y)`.
    fn f_from_s(&self, s: &[f64], f: &mut [f64]) {
        for k in 0..s.len() {
            f[k] = self.x[k] / self.sigma - s[k] + if self.diag[k] { 1.0 } else { 0.0 };
        }
    }

    /// `Prox_φ(f)`: identity on the diagonal, soft threshold off it.
    fn prox(&self, f: &[f64], g: &mut [f64]) {
        for k in 0..f.len() {
            g[k] = if self.diag[k] {
                f[k]
            } else {
                soft_threshold(f[k], self.lambda)
            };
        }
    }

    #[inline]
    fn dist2(&self, k: usize, v: f64) -> f64 {
        dist2(self.diag[k], v, self.lambda)
    }

    #[inline]
    fn dist2_change(&self, k: usize, v: f64, delta: f64) -> f64 {
        dist2_change(self.diag[k], v, delta, self.lambda)
    }

    fn psi(&self, y: &[f64], f: &[f64]) -> f64 {
        let d2: f64 = (0..f.len()).map(|k| self.dist2(k, f[k])).sum();
        0.5 * dot(y, y) - dot(self.x, self.x) / (2.0 * self.sigma) + 0.5 * self.sigma * d2
    }

    fn gradient(&self, y: &[f64], g: &[f64], out: &mut [f64]) {
        s_star_raw(g, self.factor, self.pattern, out);
        for (o, &yv) in out.iter_mut().zip(y) {
            *o = yv - self.sigma * *o;
        }
    }

    fn mask(&self, f: &[f64]) -> Vec<f64> {
        (0..f.len())
            .map(|k| {
                if self.diag[k] || f[k].abs() >= self.lambda {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Squared distance from one component to the box (`{0}` on the diagonal,
/// `[−λ, λ]` off it).
#[inline]
pub(crate) fn dist2(diag: bool, v: f64, lambda: f64) -> f64 {
    if diag {
        v * v
    } else {
        let e = v.abs() - lambda;
        if e > 0.0 {
            e * e
        } else {
            0.0
        }
    }
}

/// `dist²(v − δ) − dist²(v)`, factored to avoid cancellation for small `δ`.
#[inline]
pub(crate) fn dist2_change(diag: bool, v: f64, delta: f64, lambda: f64) -> f64 {
    let a = v - delta;
    if diag {
        return delta * (delta - 2.0 * v);
    }
    let ea = a.abs() - lambda;
    let ev = v.abs() - lambda;
    match (ea > 0.0, ev > 0.0) {
        (false, false) => 0.0,
        (true, true) if (a > 0.0) == (v > 0.0) => {
            let step = if v > 0.0 { -delta } else { delta };
            step * (ea + ev)
        }
        (true, true) => ea * ea - ev * ev,
        (true, false) => ea * ea,
        (false, true) => -ev * ev,
    }
}

/// `ψ(Y)` for multiplier `x` and penalty `σ`.
pub fn psi_value(
    y: &DenseMatrix,
    x: &[f64],
    sigma: f64,
    lambda: f64,
    factor: &CovarianceFactor,
    pattern: &SparsityPattern,
) -> f64 {
    let inner = Inner::new(x, sigma, lambda, factor, pattern);
    let t = pattern.t();
    let mut s = vec![0.0; t];
    let mut f = vec![0.0; t];
    s_apply_raw(y.data(), factor, pattern, &mut s);
    inner.f_from_s(&s, &mut f);
    inner.psi(y.data(), &f)
}

/// `∇ψ(Y) = Y − σ S*(Prox_φ(f(Y)))`.
pub fn psi_gradient(
    y: &DenseMatrix,
    x: &[f64],
    sigma: f64,
    lambda: f64,
    factor: &CovarianceFactor,
    pattern: &SparsityPattern,
) -> DenseMatrix {
    let inner = Inner::new(x, sigma, lambda, factor, pattern);
    let t = pattern.t();
    let mut s = vec![0.0; t];
    let mut f = vec![0.0; t];
    let mut g = vec![0.0; t];
    s_apply_raw(y.data(), factor, pattern, &mut s);
    inner.f_from_s(&s, &mut f);
    inner.prox(&f, &mut g);
    let mut out = DenseMatrix::zeros(factor.p(), factor.n());
    inner.gradient(y.data(), &g, out.data_mut());
    out
}

/// Jacobian mask at `Y`: 1 on the diagonal and where `|f(Y)_k| ≥ λ`, else 0.
pub fn jacobian_mask(
    y: &DenseMatrix,
    x: &[f64],
    sigma: f64,
    lambda: f64,
    factor: &CovarianceFactor,
    pattern: &SparsityPattern,
) -> Vec<f64> {
    let inner = Inner::new(x, sigma, lambda, factor, pattern);
    let t = pattern.t();
    let mut s = vec![0.0; t];
    let mut f = vec![0.0; t];
    s_apply_raw(y.data(), factor, pattern, &mut s);
    inner.f_from_s(&s, &mut f);
    inner.mask(&f)
}

/// `D ↦ D + σ S*(u ∘ S(D))` on row-major `p × n` buffers.
pub struct NewtonOperator<'a> {
    factor: &'a CovarianceFactor,
    pattern: &'a SparsityPattern,
    mask: Vec<f64>,
    sigma: f64,
}

pub fn newton_operator<'a>(
    u_mask: Vec<f64>,
    sigma: f64,
    factor: &'a CovarianceFactor,
    pattern: &'a SparsityPattern,
) -> NewtonOperator<'a> {
    assert_eq!(u_mask.len(), pattern.t());
    NewtonOperator {
        factor,
        pattern,
        mask: u_mask,
        sigma,
    }
}

impl LinearMap for NewtonOperator<'_> {
    fn dim(&self) -> usize {
        self.factor.p() * self.factor.n()
    }

    fn apply(&self, d: &[f64], out: &mut [f64]) {
        let mut s = vec![0.0; self.pattern.t()];
        s_apply_raw(d, self.factor, self.pattern, &mut s);
        for (v, &u) in s.iter_mut().zip(&self.mask) {
            *v *= u * self.sigma;
        }
        s_star_raw(&s, self.factor, self.pattern, out);
        for (o, &dv) in out.iter_mut().zip(d) {
            *o += dv;
        }
    }
}

#[derive(Clone, Debug)]
pub struct SsnOutcome {
    pub y: DenseMatrix,
    /// `Proj_{b_λ}(f(Y))`
    pub z: Vec<f64>,
    /// `Prox_φ(f(Y)) = f(Y) − z`; the next multiplier is `σ·g`.
    pub g: Vec<f64>,
    pub grad_norm: f64,
    pub newton_iters: usize,
    pub cg_iters: usize,
    /// `‖∇ψ‖` at every iterate, starting point included.
    pub grad_history: Vec<f64>,
    /// Backtracking exponent `m` of every accepted step.
    pub step_exponents: Vec<usize>,
    /// False when `max_newton` was hit before the tolerance.
    pub converged: bool,
}

/// Semismooth Newton on `ψ` to `‖∇ψ(Y)‖ ≤ inner_tol`.
#[allow(clippy::too_many_arguments)]
pub fn ssn_solve(
    x: &[f64],
    sigma: f64,
    lambda: f64,
    factor: &CovarianceFactor,
    pattern: &SparsityPattern,
    cfg: &SsnConfig,
    inner_tol: f64,
    y0: DenseMatrix,
) -> Result<SsnOutcome> {
    if !(inner_tol > 0.0) {
        return Err(Error::InvalidParameter("inner tolerance must be > 0".into()));
    }
    ssn_run(x, sigma, lambda, factor, pattern, cfg, y0, |gn, _| gn <= inner_tol)
}

#[allow(clippy::too_many_arguments)]
fn ssn_run(
    x: &[f64],
    sigma: f64,
    lambda: f64,
    factor: &CovarianceFactor,
    pattern: &SparsityPattern,
    cfg: &SsnConfig,
    y0: DenseMatrix,
    done: impl Fn(f64, f64) -> bool,
) -> Result<SsnOutcome> {
    cfg.validate()?;
    if x.len() != pattern.t() || y0.rows() != factor.p() || y0.cols() != factor.n() {
        return Err(Error::DimensionMismatch("ssn_solve inputs".into()));
    }
    let inner = Inner::new(x, sigma, lambda, factor, pattern);
    let t = pattern.t();
    let dim = inner.dims();
    let mut y = y0;
    let mut s = vec![0.0; t];
    let mut f = vec![0.0; t];
    let mut g = vec![0.0; t];
    let mut grad = vec![0.0; dim];
    let mut sd = vec![0.0; t];
    let mut history = Vec::new();
    let mut exps = Vec::new();
    let mut cg_total = 0;
    let mut iters = 0;
    let mut converged = false;

    loop {
        s_apply_raw(y.data(), factor, pattern, &mut s);
        inner.f_from_s(&s, &mut f);
        inner.prox(&f, &mut g);
        inner.gradient(y.data(), &g, &mut grad);
        let gn = norm(&grad);
        history.push(gn);
        // primal residual ‖S(Y) + z − e1‖ = ‖x/σ − g‖
        let pres = x
            .iter()
            .zip(&g)
            .map(|(&xv, &gv)| (xv / sigma - gv).powi(2))
            .sum::<f64>()
            .sqrt();
        if done(gn, pres) {
            converged = true;
            break;
        }
        if iters == cfg.max_newton {
            break;
        }
        iters += 1;

        let op = newton_operator(inner.mask(&f), sigma, factor, pattern);
        let rhs: Vec<f64> = grad.iter().map(|v| -v).collect();
        let cg_tol = cfg.eta_bar.min(gn.powf(1.0 + cfg.tau));
        let cg = conjugate_gradient(&op, &rhs, cg_tol, cfg.max_cg)?;
        cg_total += cg.iters;
        let mut d = cg.solution;
        let mut slope = dot(&grad, &d);
        if !(slope < 0.0) {
            // CG made no progress; fall back to steepest descent
            d = rhs;
            slope = -gn * gn;
        }

        // ψ(Y + αD) − ψ(Y) assembled termwise so the comparison survives tiny steps
        s_apply_raw(&d, factor, pattern, &mut sd);
        let yd = dot(y.data(), &d);
        let dd = dot(&d, &d);
        let mut m = 0;
        let mut alpha = 1.0;
        loop {
            let mut dist_change = 0.0;
            for k in 0..t {
                dist_change += inner.dist2_change(k, f[k], alpha * sd[k]);
            }
            let change = alpha * yd + 0.5 * alpha * alpha * dd + 0.5 * sigma * dist_change;
            if change <= cfg.mu * alpha * slope {
                break;
            }
            m += 1;
            if m > MAX_LINE_SEARCH_STEPS {
                return Err(Error::LineSearchStalled {
                    steps: m,
                    grad_norm: gn,
                });
            }
            alpha *= cfg.delta;
        }
        exps.push(m);
        crate::linalg::axpy(alpha, &d, y.data_mut());
    }

    let z: Vec<f64> = f.iter().zip(&g).map(|(&fv, &gv)| fv - gv).collect();
    Ok(SsnOutcome {
        y,
        z,
        g,
        grad_norm: *history.last().expect("at least one evaluation"),
        newton_iters: iters,
        cg_iters: cg_total,
        grad_history: history,
        step_exponents: exps,
        converged,
    })
}

/// One outer iteration of the ALM, as recorded for benchmark traces.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub outer_iter: usize,
    pub sigma: f64,
    pub inner_iters: usize,
    pub cg_iters: usize,
    pub grad_norm: f64,
    pub eta: f64,
    pub wall_ms: f64,
}

pub fn write_trace_csv(
    mut w: impl Write,
    rows: &[TraceRow],
    solver: Option<&str>,
) -> std::io::Result<()> {
    let prefix = |s: &str| solver.map_or(String::new(), |_| s.to_string());
    writeln!(
        w,
        "{}outer_iter,sigma,inner_iters,cg_iters,grad_norm,eta,wall_ms",
        prefix("solver,")
    )?;
    for r in rows {
        writeln!(
            w,
            "{}{},{:?},{},{},{:e},{:e},{:.3}",
            solver.map_or(String::new(), |s| format!("{s},")),
            r.outer_iter,
            r.sigma,
            r.inner_iters,
            r.cg_iters,
            r.grad_norm,
            r.eta,
            r.wall_ms
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AlmOutcome {
    pub state: AlmState,
    pub omega: SparseSymMatrix,
    /// η of the reduced problem (KKT residual restricted to the pattern).
    pub eta: f64,
    pub outer_iters: usize,
    pub newton_iters: usize,
    pub cg_iters: usize,
    pub trace: Vec<TraceRow>,
    /// Backtracking exponents of every accepted Newton step.
    pub step_exponents: Vec<usize>,
    pub converged: bool,
}

/// KKT residual of the reduced problem at `Ω = L†(x ∘ e3)`, with
/// off-diagonal positions counted twice so that on the full pattern it equals
/// the full-space η.
pub fn reduced_residual(
    x: &[f64],
    factor: &CovarianceFactor,
    pattern: &SparsityPattern,
    lambda: f64,
) -> Result<ResidualReport> {
    let omega = x_to_omega(x, pattern)?;
    let m = sym_times(pattern, omega.values(), factor.a());
    let mut h = vec![0.0; pattern.t()];
    s_apply_raw(m.data(), factor, pattern, &mut h);
    let (mut r2, mut h2, mut o2) = (0.0, 0.0, 0.0);
    for (k, &(i, j)) in pattern.positions().iter().enumerate() {
        let diag = i == j;
        let hk = h[k] - if diag { 1.0 } else { 0.0 };
        let ok = omega.values()[k];
        let r = residual_entry(diag, hk, ok, lambda);
        let w = if diag { 1.0 } else { 2.0 };
        r2 += w * r * r;
        h2 += w * hk * hk;
        o2 += w * ok * ok;
    }
    Ok(ResidualReport::from_squares(r2, h2, o2.sqrt()))
}

/// Iterates whose norm exceeds this multiple of the diagonal solution's are
/// checked for a recession direction.
const DIVERGENCE_FACTOR: f64 = 1e6;

/// When the objective is unbounded below (possible for `n < p` and small λ),
/// `Ω/‖Ω‖` approaches a direction `D` with `DA = 0` and `tr D > λ‖D‖₁,off`.
/// A candidate `Ω` is first screened by `‖ΩA‖/‖Ω‖`, then projected exactly
/// onto `{D = PΩP}` with `P` the projector onto `null(Aᵀ)`. Only a projected
/// direction with a clearly positive gap is reported as `Error::Unbounded`.
pub fn recession_check(omega: &SparseSymMatrix, factor: &CovarianceFactor, lambda: f64) -> Option<Error> {
    use crate::dtrace::SymOperand;
    let nrm = omega.frobenius_norm();
    if !(nrm > 0.0) {
        return None;
    }
    let a = factor.a();
    let da = omega.times(a).frobenius_norm() / nrm;
    let scale = a.frobenius_norm().max(1.0);
    if da > 1e-4 * scale || omega.trace() - lambda * omega.off_diagonal_l1() <= 0.0 {
        return None;
    }
    let d = null_projection(&omega.to_dense(), a);
    let dn = d.frobenius_norm();
    if !(dn > 0.5 * nrm) {
        return None;
    }
    let p = d.rows();
    let (mut tr, mut off) = (0.0, 0.0);
    for i in 0..p {
        for j in 0..p {
            if i == j {
                tr += d[(i, i)];
            } else {
                off += d[(i, j)].abs();
            }
        }
    }
    let gap = (tr - lambda * off) / dn;
    let null_residual = d.matmul(a).frobenius_norm() / dn;
    (gap > 1e-6 && null_residual <= 1e-10 * scale).then_some(Error::Unbounded {
        lambda,
        gap,
        null_residual,
    })
}

/// `PMP` where `P = I - UUᵀ` projects onto `null(Aᵀ)`; `U` spans `range(A)`
/// and comes from the eigendecomposition of the `n×n` Gram matrix `AᵀA`.
fn null_projection(m: &DenseMatrix, a: &DenseMatrix) -> DenseMatrix {
    let (vals, vecs) = crate::linalg::symmetric_eigen(&a.t_matmul(a));
    let top = vals.last().copied().unwrap_or(0.0).max(0.0);
    let keep: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] > 1e-12 * top && vals[k] > 0.0).collect();
    let av = a.matmul(&vecs);
    let u = DenseMatrix::from_fn(a.rows(), keep.len(), |i, c| av[(i, keep[c])] / vals[keep[c]].sqrt());
    // M - UUᵀM, then the same from the right
    let left = m.sub(&u.matmul(&u.t_matmul(m)));
    let right = left.matmul(&u).matmul_t(&u);
    let mut d = left.sub(&right);
    // symmetrize against rounding
    let p = d.rows();
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (d[(i, j)] + d[(j, i)]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Inexact ALM on the reduced problem over `pattern`, started from
/// multiplier `x0` and (optionally) a previous `Y`.
pub fn alm_solve(
    problem: &PenalizedProblem,
    pattern: &SparsityPattern,
    x0: &[f64],
    y0: Option<&DenseMatrix>,
    policy: &StoppingPolicy,
    cfg: &SsnConfig,
) -> Result<AlmOutcome> {
    policy.validate()?;
    cfg.validate()?;
    let factor = &problem.factor;
    let lambda = problem.lambda;
    if x0.len() != pattern.t() || pattern.p() != factor.p() {
        return Err(Error::DimensionMismatch("alm_solve: x0 or pattern".into()));
    }
    let mut y = match y0 {
        Some(y) if y.rows() == factor.p() && y.cols() == factor.n() => y.clone(),
        Some(_) => return Err(Error::DimensionMismatch("alm_solve: Y0".into())),
        None => DenseMatrix::zeros(factor.p(), factor.n()),
    };
    let mut x = x0.to_vec();
    let mut z = vec![0.0; pattern.t()];
    let mut sigma = policy.sigma0;
    let mut trace = Vec::new();
    let mut exps = Vec::new();
    let (mut newton, mut cg) = (0, 0);
    let start = Instant::now();

    let diag_norm = factor.sigma_diag().iter().map(|v| 1.0 / (v * v)).sum::<f64>().sqrt();
    let diverged_at = DIVERGENCE_FACTOR * (1.0 + diag_norm);
    let mut report = reduced_residual(&x, factor, pattern, lambda)?;
    let mut converged = report.eta <= policy.outer_eta_tol;
    let mut k = 0;
    while !converged && k < policy.max_outer {
        let sig = sigma;
        let out = match ssn_run(&x, sig, lambda, factor, pattern, cfg, y, |gn, pres| {
            gn <= policy.inner_tol(k, sig, pres)
        }) {
            Ok(out) => out,
            Err(e @ Error::LineSearchStalled { .. }) => {
                return Err(recession_check(&x_to_omega(&x, pattern)?, factor, lambda).unwrap_or(e))
            }
            Err(e) => return Err(e),
        };
        newton += out.newton_iters;
        cg += out.cg_iters;
        exps.extend_from_slice(&out.step_exponents);
        y = out.y;
        z = out.z;
        // x − σ(S(Y) + z − e1) simplifies to σ·Prox_φ(f(Y))
        x = out.g.iter().map(|v| sig * v).collect();
        report = reduced_residual(&x, factor, pattern, lambda)?;
        k += 1;
        trace.push(TraceRow {
            outer_iter: k,
            sigma: sig,
            inner_iters: out.newton_iters,
            cg_iters: out.cg_iters,
            grad_norm: out.grad_norm,
            eta: report.eta,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        debug!(
            "alm k={k} sigma={sig:.3e} newton={} cg={} |grad|={:.3e} eta={:.3e}",
            out.newton_iters, out.cg_iters, out.grad_norm, report.eta
        );
        converged = report.eta <= policy.outer_eta_tol;
        if !converged && report.omega_norm > diverged_at {
            if let Some(e) = recession_check(&x_to_omega(&x, pattern)?, factor, lambda) {
                return Err(e);
            }
        }
        sigma = (sigma * policy.sigma_growth).min(policy.sigma_max);
    }

    let omega = x_to_omega(&x, pattern)?;
    Ok(AlmOutcome {
        state: AlmState { y, z, x, sigma, k },
        omega,
        eta: report.eta,
        outer_iters: k,
        newton_iters: newton,
        cg_iters: cg,
        trace,
        step_exponents: exps,
        converged,
    })
}
