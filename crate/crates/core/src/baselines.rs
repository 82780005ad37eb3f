//! Full-space reference solvers working with dense `p × p` iterates:
//! a semismooth Newton ALM (SSNAL), an ADMM with CG subproblem solves
//! (iADMM), and an ADMM with closed-form subproblem solves (eADMM).
//!
//! All three treat the dual
//!
//! ```text
//! minimize ½‖Y‖² + δ_{B_λ}(Z)   s.t.  𝒮(Y) + Z − I = 0,   𝒮(Y) = ½(YAᵀ + AYᵀ),
//! ```
//!
//! (eADMM uses `V ∈ 𝕊ᵖ` with `T(V) = ½(VΣ̂ + Σ̂V)` in place of `𝒮(Y)`), and
//! return the multiplier `Ω` as the estimate.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::debug;

use crate::dtrace::{prox_theta, residual_map, CovarianceFactor, PenalizedProblem, SparseSymMatrix};
use crate::error::{Error, Result};
use crate::linalg::{conjugate_gradient, conjugate_gradient_from, dot, gemm, symmetric_eigen, DenseMatrix, FnMap};
use crate::ssn_alm::{dist2, dist2_change, SsnConfig, StoppingPolicy, TraceRow, MAX_LINE_SEARCH_STEPS};

/// Default largest `p` the dense solvers accept.
pub const DEFAULT_MEMORY_CAP: usize = 8000;

/// Solver registry used by the CLI and the benchmark harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Solver {
    Mars,
    Ssnal,
    Iadmm,
    Eadmm,
}

impl Solver {
    pub const ALL: [Solver; 4] = [Solver::Mars, Solver::Ssnal, Solver::Iadmm, Solver::Eadmm];

    pub fn name(self) -> &'static str {
        match self {
            Solver::Mars => "mars",
            Solver::Ssnal => "ssnal",
            Solver::Iadmm => "iadmm",
            Solver::Eadmm => "eadmm",
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Solver::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownSolver(s.to_string()))
    }
}

/// Settings shared by the baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub ssn: SsnConfig,
    /// SSNAL stopping rules and σ schedule; `outer_eta_tol` is the target η.
    pub policy: StoppingPolicy,
    /// Fixed ADMM penalty.
    pub sigma: f64,
    /// ADMM dual step length.
    pub pi_step: f64,
    pub max_admm_iter: usize,
    pub memory_cap: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            ssn: SsnConfig::default(),
            policy: StoppingPolicy::default(),
            sigma: 1.0,
            pi_step: 1.618,
            max_admm_iter: 20_000,
            memory_cap: DEFAULT_MEMORY_CAP,
        }
    }
}

impl BaselineConfig {
    pub fn with_tol(tol: f64) -> Self {
        let mut c = Self::default();
        c.policy.outer_eta_tol = tol;
        c
    }

    fn validate_admm(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.pi_step > 0.0 && self.pi_step < (1.0 + 5f64.sqrt()) / 2.0) {
            return Err(Error::InvalidParameter(format!(
                "ADMM needs sigma > 0 and pi in (0, 1.618...), got sigma = {}, pi = {}",
                self.sigma, self.pi_step
            )));
        }
        if self.max_admm_iter == 0 {
            return Err(Error::InvalidParameter("max_admm_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Dual iterates of a full-space solver; reusable as a warm start.
#[derive(Clone, Debug)]
pub struct FullDualState {
    /// `p × n` (SSNAL, iADMM) or `p × p` (eADMM).
    pub y: DenseMatrix,
    pub z: DenseMatrix,
    pub omega: DenseMatrix,
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub omega: DenseMatrix,
    pub eta: f64,
    pub iters: usize,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub state: FullDualState,
    /// Largest `‖V/σ + T(V) − C‖_F / (1 + ‖C‖_F)` seen in eADMM spot checks.
    pub v_identity_residual: f64,
}

impl BaselineOutcome {
    pub fn estimate(&self) -> Result<SparseSymMatrix> {
        SparseSymMatrix::from_dense(&self.omega, 0.0)
    }
}

fn check_cap(p: usize, cap: usize) -> Result<()> {
    if p > cap {
        Err(Error::MemoryCapExceeded { p, cap })
    } else {
        Ok(())
    }
}

/// `𝒮(Y) = ½(YAᵀ + AYᵀ)`.
pub fn big_s_apply(y: &DenseMatrix, factor: &CovarianceFactor) -> DenseMatrix {
    let p = factor.p();
    let mut g = DenseMatrix::zeros(p, p);
    gemm(1.0, y.view(), factor.a().view().t(), 0.0, &mut g);
    sym_part(&mut g);
    g
}

/// `𝒮*(M) = MA` for symmetric `M`.
pub fn big_s_star(m: &DenseMatrix, factor: &CovarianceFactor) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.rows(), factor.n());
    gemm(1.0, m.view(), factor.a().view(), 0.0, &mut out);
    out
}

/// Replaces `g` by `½(g + gᵀ)`.
fn sym_part(g: &mut DenseMatrix) {
    let p = g.rows();
    for i in 0..p {
        for j in i + 1..p {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
}

fn initial_state(problem: &PenalizedProblem, dual_cols: usize, warm: Option<&FullDualState>, sigma: f64) -> Result<FullDualState> {
    let p = problem.factor.p();
    match warm {
        Some(w) => {
            if w.omega.rows() != p || w.y.rows() != p || w.y.cols() != dual_cols {
                return Err(Error::DimensionMismatch("warm start shape".into()));
            }
            Ok(FullDualState {
                sigma,
                ..w.clone()
            })
        }
        None => Ok(FullDualState {
            y: DenseMatrix::zeros(p, dual_cols),
            z: DenseMatrix::zeros(p, p),
            omega: crate::dtrace::diagonal_solution(&problem.factor)?.to_dense(),
            sigma,
        }),
    }
}

fn is_diag(i: usize, j: usize) -> bool {
    i == j
}

/// SSNAL on the full dual.
pub fn ssnal_solve(
    problem: &PenalizedProblem,
    cfg: &BaselineConfig,
    warm: Option<&FullDualState>,
) -> Result<BaselineOutcome> {
    let factor = &problem.factor;
    let (p, n, lambda) = (factor.p(), factor.n(), problem.lambda);
    check_cap(p, cfg.memory_cap)?;
    cfg.ssn.validate()?;
    cfg.policy.validate()?;
    let policy = &cfg.policy;
    let mut st = initial_state(problem, n, warm, policy.sigma0)?;
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut eta = residual_map(&st.omega, factor, lambda)?.eta;
    let mut k = 0;
    while eta > policy.outer_eta_tol && k < policy.max_outer {
        let sigma = st.sigma;
        let inner = ssnal_inner(&st, sigma, lambda, factor, &cfg.ssn, |gn, pres| {
            gn <= inner_tol(policy, k, sigma, pres)
        })?;
        st.y = inner.y;
        st.z = inner.z;
        st.omega = inner.prox;
        st.omega.scale(sigma);
        eta = residual_map(&st.omega, factor, lambda)?.eta;
        k += 1;
        trace.push(TraceRow {
            outer_iter: k,
            sigma,
            inner_iters: inner.newton,
            cg_iters: inner.cg,
            grad_norm: inner.grad_norm,
            eta,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        debug!("ssnal k={k} sigma={sigma:.2e} newton={} eta={eta:.3e}", inner.newton);
        st.sigma = (sigma * policy.sigma_growth).min(policy.sigma_max);
    }
    Ok(BaselineOutcome {
        omega: st.omega.clone(),
        eta,
        iters: k,
        trace,
        converged: eta <= policy.outer_eta_tol,
        state: st,
        v_identity_residual: 0.0,
    })
}

fn inner_tol(policy: &StoppingPolicy, k: usize, sigma: f64, primal_res: f64) -> f64 {
    let decay = policy.rate.powi(k as i32);
    ((policy.tau_c / sigma).sqrt() * policy.eps_scale * decay)
        .min(decay * primal_res)
        .max(policy.inner_floor)
}

struct SsnalInner {
    y: DenseMatrix,
    z: DenseMatrix,
    prox: DenseMatrix,
    grad_norm: f64,
    newton: usize,
    cg: usize,
}

fn ssnal_inner(
    st: &FullDualState,
    sigma: f64,
    lambda: f64,
    factor: &CovarianceFactor,
    cfg: &SsnConfig,
    done: impl Fn(f64, f64) -> bool,
) -> Result<SsnalInner> {
    let (p, n) = (factor.p(), factor.n());
    let mut y = st.y.clone();
    let mut newton = 0;
    let mut cg_total = 0;
    loop {
        // W = Ω/σ − 𝒮(Y) + I
        let mut w = big_s_apply(&y, factor);
        w.scale(-1.0);
        w.axpy(1.0 / sigma, &st.omega);
        for i in 0..p {
            w[(i, i)] += 1.0;
        }
        let pw = prox_theta(&w, lambda);
        let mut grad = big_s_star(&pw, factor);
        grad.scale(-sigma);
        grad.axpy(1.0, &y);
        let gn = grad.frobenius_norm();
        // ‖𝒮(Y) + Z − I‖ = ‖Ω/σ − Prox(W)‖
        let mut pres_m = st.omega.clone();
        pres_m.scale(1.0 / sigma);
        let pres = pres_m.sub(&pw).frobenius_norm();
        if done(gn, pres) || newton == cfg.max_newton {
            let z = w.sub(&pw);
            return Ok(SsnalInner {
                y,
                z,
                prox: pw,
                grad_norm: gn,
                newton,
                cg: cg_total,
            });
        }
        newton += 1;
        let mask: Vec<f64> = (0..p * p)
            .map(|q| {
                let (i, j) = (q / p, q % p);
                if is_diag(i, j) || w.data()[q].abs() >= lambda {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let op = FnMap::new(p * n, |d: &[f64], out: &mut [f64]| {
            let dm = DenseMatrix::new(p, n, d.to_vec()).expect("finite direction");
            let mut s = big_s_apply(&dm, factor);
            for (v, &u) in s.data_mut().iter_mut().zip(&mask) {
                *v *= u * sigma;
            }
            let r = big_s_star(&s, factor);
            for ((o, &rv), &dv) in out.iter_mut().zip(r.data()).zip(d) {
                *o = dv + rv;
            }
        });
        let rhs: Vec<f64> = grad.data().iter().map(|v| -v).collect();
        let cg = conjugate_gradient(&op, &rhs, cfg.eta_bar.min(gn.powf(1.0 + cfg.tau)), cfg.max_cg)?;
        cg_total += cg.iters;
        let mut d = cg.solution;
        let mut slope = dot(grad.data(), &d);
        if !(slope < 0.0) {
            d = rhs;
            slope = -gn * gn;
        }
        let dm = DenseMatrix::new(p, n, d).expect("finite direction");
        let sd = big_s_apply(&dm, factor);
        let yd = dot(y.data(), dm.data());
        let dd = dot(dm.data(), dm.data());
        let mut alpha = 1.0;
        let mut m = 0;
        loop {
            let mut change = alpha * yd + 0.5 * alpha * alpha * dd;
            let mut dist = 0.0;
            for i in 0..p {
                for j in 0..p {
                    dist += dist2_change(i == j, w[(i, j)], alpha * sd[(i, j)], lambda);
                }
            }
            change += 0.5 * sigma * dist;
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
        y.axpy(alpha, &dm);
    }
}

/// `ψ` of SSNAL, for tests.
pub fn ssnal_psi(y: &DenseMatrix, omega: &DenseMatrix, sigma: f64, lambda: f64, factor: &CovarianceFactor) -> f64 {
    let p = factor.p();
    let mut w = big_s_apply(y, factor);
    w.scale(-1.0);
    w.axpy(1.0 / sigma, omega);
    let mut d = 0.0;
    for i in 0..p {
        w[(i, i)] += 1.0;
        for j in 0..p {
            d += dist2(i == j, w[(i, j)], lambda);
        }
    }
    0.5 * y.frobenius_norm().powi(2) + 0.5 * sigma * d - omega.frobenius_norm().powi(2) / (2.0 * sigma)
}

/// Projection onto `B_λ` in place.
fn project_box(m: &mut DenseMatrix, lambda: f64) {
    let p = m.rows();
    for i in 0..p {
        for j in 0..p {
            m[(i, j)] = if i == j { 0.0 } else { m[(i, j)].clamp(-lambda, lambda) };
        }
    }
}

/// One ADMM multiplier/box update given `K = 𝒮(Y)` or `T(V)`; returns `‖K + Z − I‖`.
fn admm_tail(st: &mut FullDualState, k_mat: &DenseMatrix, lambda: f64, pi_step: f64) -> f64 {
    let p = k_mat.rows();
    let sigma = st.sigma;
    // Z = Proj(Ω/σ − K + I)
    let mut z = st.omega.clone();
    z.scale(1.0 / sigma);
    z.axpy(-1.0, k_mat);
    for i in 0..p {
        z[(i, i)] += 1.0;
    }
    project_box(&mut z, lambda);
    let mut r = k_mat.add(&z);
    for i in 0..p {
        r[(i, i)] -= 1.0;
    }
    st.omega.axpy(-pi_step * sigma, &r);
    st.z = z;
    r.frobenius_norm()
}

/// `C = Ω/σ + I − Z`.
fn admm_c(st: &FullDualState) -> DenseMatrix {
    let mut c = st.omega.clone();
    c.scale(1.0 / st.sigma);
    c.axpy(-1.0, &st.z);
    for i in 0..c.rows() {
        c[(i, i)] += 1.0;
    }
    c
}

/// ADMM with the `Y`-subproblem `(I + σ𝒮*𝒮)Y = σCA` solved by warm-started CG
/// to `min(1e-2, 0.1·‖𝒮(Y) + Z − I‖)`.
pub fn iadmm_solve(
    problem: &PenalizedProblem,
    cfg: &BaselineConfig,
    warm: Option<&FullDualState>,
) -> Result<BaselineOutcome> {
    let factor = &problem.factor;
    let (p, n, lambda) = (factor.p(), factor.n(), problem.lambda);
    check_cap(p, cfg.memory_cap)?;
    cfg.validate_admm()?;
    let tol = cfg.policy.outer_eta_tol;
    let mut st = initial_state(problem, n, warm, cfg.sigma)?;
    let sigma = st.sigma;
    let op = FnMap::new(p * n, |d: &[f64], out: &mut [f64]| {
        let dm = DenseMatrix::new(p, n, d.to_vec()).expect("finite direction");
        let r = big_s_star(&big_s_apply(&dm, factor), factor);
        for ((o, &rv), &dv) in out.iter_mut().zip(r.data()).zip(d) {
            *o = dv + sigma * rv;
        }
    });
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut eta = residual_map(&st.omega, factor, lambda)?.eta;
    let mut pres = f64::INFINITY;
    let mut k = 0;
    while eta > tol && k < cfg.max_admm_iter {
        let mut rhs = big_s_star(&admm_c(&st), factor);
        rhs.scale(sigma);
        let cg_tol = (1e-2f64).min(0.1 * pres).max(1e-14);
        let cg = conjugate_gradient_from(&op, rhs.data(), Some(st.y.data()), cg_tol, 500)?;
        st.y = DenseMatrix::new(p, n, cg.solution).expect("finite CG iterate");
        let sy = big_s_apply(&st.y, factor);
        pres = admm_tail(&mut st, &sy, lambda, cfg.pi_step);
        eta = residual_map(&st.omega, factor, lambda)?.eta;
        k += 1;
        trace.push(TraceRow {
            outer_iter: k,
            sigma,
            inner_iters: 1,
            cg_iters: cg.iters,
            grad_norm: cg.residual_norm,
            eta,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(BaselineOutcome {
        omega: st.omega.clone(),
        eta,
        iters: k,
        trace,
        converged: eta <= tol,
        state: st,
        v_identity_residual: 0.0,
    })
}

/// Spectral data for the closed-form eADMM `V`-update.
#[derive(Clone, Debug)]
pub struct EadmmSpectral {
    /// `p × m`, orthonormal columns spanning the range of `Σ̂`.
    pub v_basis: DenseMatrix,
    /// The `m` positive eigenvalues of `Σ̂`.
    pub tau: Vec<f64>,
    pub lambda1: Vec<f64>,
    /// `m × m`
    pub lambda2: DenseMatrix,
    pub sigma: f64,
}

/// Eigenvalues at or below this are treated as zero.
const EIG_FLOOR: f64 = 1e-12;

pub fn eadmm_precompute(factor: &CovarianceFactor, sigma: f64) -> Result<EadmmSpectral> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter("sigma must be > 0".into()));
    }
    let a = factor.a();
    let gram = a.t_matmul(a);
    let (vals, vecs) = symmetric_eigen(&gram);
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > EIG_FLOOR).collect();
    let m = keep.len();
    let n = a.cols();
    // W restricted to kept columns, scaled by τ^{-1/2}
    let w = DenseMatrix::from_fn(n, m, |r, c| vecs[(r, keep[c])] / vals[keep[c]].sqrt());
    let v_basis = a.matmul(&w);
    let tau: Vec<f64> = keep.iter().map(|&i| vals[i]).collect();
    Ok(spectral_from(v_basis, tau, sigma))
}

fn spectral_from(v_basis: DenseMatrix, tau: Vec<f64>, sigma: f64) -> EadmmSpectral {
    let s = 2.0 / sigma;
    let lambda1 = tau.iter().map(|&t| t / (t + s)).collect();
    let m = tau.len();
    let lambda2 = DenseMatrix::from_fn(m, m, |i, j| {
        let (ti, tj) = (tau[i], tau[j]);
        ti * tj * (ti + tj + 2.0 * s) / ((ti + s) * (tj + s) * (ti + tj + s))
    });
    EadmmSpectral {
        v_basis,
        tau,
        lambda1,
        lambda2,
        sigma,
    }
}

impl EadmmSpectral {
    /// `V = σ(C − C𝒱Λ₁𝒱ᵀ − 𝒱Λ₁𝒱ᵀC + 𝒱(Λ₂ ∘ 𝒱ᵀC𝒱)𝒱ᵀ)`, the solution of
    /// `V/σ + T(V) = C` for symmetric `C`.
    pub fn v_update(&self, c: &DenseMatrix) -> DenseMatrix {
        let vb = &self.v_basis;
        let (p, m) = (vb.rows(), vb.cols());
        let cv = c.matmul(vb);
        let mut q = vb.t_matmul(&cv);
        for (qv, l2) in q.data_mut().iter_mut().zip(self.lambda2.data()) {
            *qv *= l2;
        }
        let mut b = cv;
        for r in 0..p {
            for (x, l1) in b.row_mut(r).iter_mut().zip(&self.lambda1) {
                *x *= l1;
            }
        }
        // (𝒱(Λ₂∘Q) − B)𝒱ᵀ − 𝒱Bᵀ
        let mut e = vb.matmul(&q);
        e.axpy(-1.0, &b);
        let mut v = c.clone();
        if m > 0 {
            gemm(1.0, e.view(), vb.view().t(), 1.0, &mut v);
            gemm(-1.0, vb.view(), b.view().t(), 1.0, &mut v);
        }
        v.scale(self.sigma);
        sym_part(&mut v);
        v
    }

    /// `T(V) = ½(VΣ̂ + Σ̂V)` with `Σ̂ = 𝒱 diag(τ) 𝒱ᵀ`.
    pub fn t_apply(&self, v: &DenseMatrix) -> DenseMatrix {
        let vb = &self.v_basis;
        let mut scaled = vb.clone();
        for r in 0..vb.rows() {
            for (x, t) in scaled.row_mut(r).iter_mut().zip(&self.tau) {
                *x *= t;
            }
        }
        // VΣ̂ = (V𝒱) diag(τ) 𝒱ᵀ
        let v_vb = v.matmul(vb);
        let mut out = DenseMatrix::zeros(v.rows(), v.rows());
        gemm(1.0, v_vb.view(), scaled.view().t(), 0.0, &mut out);
        sym_part(&mut out);
        out
    }
}

/// ADMM on the `V`-form of the dual with exact `V`-updates.
pub fn eadmm_solve(
    problem: &PenalizedProblem,
    cfg: &BaselineConfig,
    warm: Option<&FullDualState>,
) -> Result<BaselineOutcome> {
    let factor = &problem.factor;
    let (p, lambda) = (factor.p(), problem.lambda);
    check_cap(p, cfg.memory_cap)?;
    cfg.validate_admm()?;
    let tol = cfg.policy.outer_eta_tol;
    let spec = eadmm_precompute(factor, cfg.sigma)?;
    let mut st = initial_state(problem, p, warm, cfg.sigma)?;
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut eta = residual_map(&st.omega, factor, lambda)?.eta;
    let mut identity_res: f64 = 0.0;
    let mut k = 0;
    while eta > tol && k < cfg.max_admm_iter {
        let c = admm_c(&st);
        st.y = spec.v_update(&c);
        let tv = spec.t_apply(&st.y);
        if k % 10 == 0 {
            let mut r = st.y.clone();
            r.scale(1.0 / st.sigma);
            r.axpy(1.0, &tv);
            r.axpy(-1.0, &c);
            identity_res = identity_res.max(r.frobenius_norm() / (1.0 + c.frobenius_norm()));
        }
        let pres = admm_tail(&mut st, &tv, lambda, cfg.pi_step);
        eta = residual_map(&st.omega, factor, lambda)?.eta;
        k += 1;
        trace.push(TraceRow {
            outer_iter: k,
            sigma: st.sigma,
            inner_iters: 0,
            cg_iters: 0,
            grad_norm: pres,
            eta,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(BaselineOutcome {
        omega: st.omega.clone(),
        eta,
        iters: k,
        trace,
        converged: eta <= tol,
        state: st,
        v_identity_residual: identity_res,
    })
}

/// Dispatches to one of the dense solvers.
pub fn baseline_solve(
    solver: Solver,
    problem: &PenalizedProblem,
    cfg: &BaselineConfig,
    warm: Option<&FullDualState>,
) -> Result<BaselineOutcome> {
    match solver {
        Solver::Ssnal => ssnal_solve(problem, cfg, warm),
        Solver::Iadmm => iadmm_solve(problem, cfg, warm),
        Solver::Eadmm => eadmm_solve(problem, cfg, warm),
        Solver::Mars => Err(Error::InvalidParameter("mars is not a dense baseline".into())),
    }
}
