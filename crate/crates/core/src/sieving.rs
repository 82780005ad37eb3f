//! Adaptive sieving along a decreasing λ path.
//!
//! For each λ the estimate lives on a small pattern. A full scan of `h(Ω)`
//! gives the relative KKT residual; while it exceeds `eps`, off-pattern
//! positions whose `|h_ij|` violates the optimality band are added and the
//! reduced problem is re-solved by the ALM.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::{debug, info};

use crate::dtrace::{
    diagonal_solution, lambda_max, objective, residual_entry, scan_upper, CovarianceFactor,
    PenalizedProblem, ResidualReport, SparseSymMatrix, SymOperand, DEFAULT_BLOCK_ROWS,
};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::reduction::{inject, omega_to_x, write_coordinate};
use crate::ssn_alm::{alm_solve, reduced_residual, SsnConfig, StoppingPolicy};

/// Entries with magnitude above this count towards `s̄_off`.
pub const SBAR_THRESHOLD: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct PathSpec {
    pub lambdas: Vec<f64>,
    /// Relative KKT tolerance `η ≤ eps`.
    pub eps: f64,
    pub max_sieve_rounds: usize,
    /// Maximum number of positions admitted per round.
    pub sieve_cap: Option<usize>,
    /// Start every λ from the diagonal solution instead of the previous estimate.
    pub cold: bool,
    /// Replace the estimate by `Prox(Ω − h(Ω))` on its pattern when that keeps `η ≤ eps`.
    pub polish: bool,
    pub block_rows: usize,
}

impl PathSpec {
    pub fn new(lambdas: Vec<f64>, eps: f64) -> Result<Self> {
        let spec = Self {
            lambdas,
            eps,
            max_sieve_rounds: 50,
            sieve_cap: None,
            cold: false,
            polish: true,
            block_rows: DEFAULT_BLOCK_ROWS,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::InvalidParameter("empty lambda path".into()));
        }
        if self.lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidParameter("lambdas must be positive".into()));
        }
        if self.lambdas.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidParameter("lambdas must be strictly decreasing".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidParameter("eps must be > 0".into()));
        }
        if self.max_sieve_rounds == 0 || self.sieve_cap == Some(0) || self.block_rows == 0 {
            return Err(Error::InvalidParameter("round counts and caps must be positive".into()));
        }
        Ok(())
    }
}

/// Settings of the reduced solver used inside the path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MarsConfig {
    pub ssn: SsnConfig,
    /// `outer_eta_tol` is overwritten by the path tolerance.
    pub policy: StoppingPolicy,
}

#[derive(Clone, Debug)]
pub struct PathEntry {
    pub lambda: f64,
    pub estimate: SparseSymMatrix,
    pub eta: f64,
    pub objective: f64,
    pub s_off: usize,
    pub s_bar_off: usize,
    pub sieve_rounds: usize,
    /// ALM outer iterations of every reduced solve at this λ.
    pub alm_outer: Vec<usize>,
    /// Backtracking exponents of every Newton step at this λ.
    pub step_exponents: Vec<usize>,
    pub wall_ms: f64,
    /// λ was at or above λ_max and the diagonal solution was returned.
    pub clamped: bool,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct PathResult {
    pub lambda_max: f64,
    pub entries: Vec<PathEntry>,
    /// Y of the last reduced solve, for warm-starting a continuation.
    pub last_y: Option<DenseMatrix>,
}

/// Result of one full scan of `h(Ω)`.
#[derive(Clone, Debug)]
pub struct SieveScan {
    pub report: ResidualReport,
    /// Off-pattern positions with `|h_ij| > λ`, as `((i, j), |h_ij|)`, largest first.
    pub over: Vec<((usize, usize), f64)>,
    /// Off-pattern diagonal positions with nonzero `h_ii`.
    pub diag_over: Vec<((usize, usize), f64)>,
    /// `|Ī|`: off-pattern entries, both triangles.
    pub complement: usize,
}

impl SieveScan {
    /// Positions violating the band `ε_abs / √(2|Ī|)`, largest violation first.
    pub fn violations(&self, lambda: f64, eps_abs: f64) -> Vec<(usize, usize)> {
        if self.complement == 0 {
            return Vec::new();
        }
        let band = eps_abs / (2.0 * self.complement as f64).sqrt();
        let mut out: Vec<((usize, usize), f64)> = self
            .diag_over
            .iter()
            .filter(|e| e.1 > band)
            .chain(self.over.iter().filter(|e| e.1 > lambda + band))
            .copied()
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out.into_iter().map(|e| e.0).collect()
    }
}

/// Full residual of `Ω` plus the off-pattern entries that may violate
/// optimality at `λ`. One streamed pass over `h(Ω)`.
pub fn sieve_scan(
    omega: &SparseSymMatrix,
    factor: &CovarianceFactor,
    lambda: f64,
    block_rows: usize,
) -> Result<SieveScan> {
    let pattern = omega.pattern();
    let (mut r2, mut h2) = (0.0, 0.0);
    let mut over = Vec::new();
    let mut diag_over = Vec::new();
    scan_upper(omega, factor, block_rows, |i, j, h, o| {
        let diag = i == j;
        let r = residual_entry(diag, h, o, lambda);
        let w = if diag { 1.0 } else { 2.0 };
        r2 += w * r * r;
        h2 += w * h * h;
        if (diag || h.abs() > lambda) && !pattern.contains(i, j) {
            if diag {
                if h != 0.0 {
                    diag_over.push(((i, j), h.abs()));
                }
            } else {
                over.push(((i, j), h.abs()));
            }
        }
    })?;
    over.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let p = pattern.p();
    Ok(SieveScan {
        report: ResidualReport::from_squares(r2, h2, omega.frobenius_norm()),
        over,
        diag_over,
        complement: p * p - pattern.entry_count(),
    })
}

/// Positions `J` to add at `λ` given the absolute tolerance `eps_abs`,
/// sorted by violation size.
pub fn sieve_expand(
    omega: &SparseSymMatrix,
    factor: &CovarianceFactor,
    lambda: f64,
    eps_abs: f64,
) -> Result<Vec<(usize, usize)>> {
    Ok(sieve_scan(omega, factor, lambda, DEFAULT_BLOCK_ROWS)?.violations(lambda, eps_abs))
}

/// Polishing step `Ω ← Prox(Ω − h(Ω))` restricted to the pattern.
fn polish(omega: &SparseSymMatrix, factor: &CovarianceFactor, lambda: f64) -> Result<SparseSymMatrix> {
    let pattern = omega.pattern();
    let h = crate::reduction::s_apply(&omega.times(factor.a()), factor, pattern);
    let mut vals = omega.values().to_vec();
    for (k, &(i, j)) in pattern.positions().iter().enumerate() {
        let diag = i == j;
        let hk = h[k] - if diag { 1.0 } else { 0.0 };
        vals[k] -= residual_entry(diag, hk, vals[k], lambda);
    }
    SparseSymMatrix::new(pattern.clone(), vals)
}

struct Solved {
    omega: SparseSymMatrix,
    eta: f64,
    rounds: usize,
    alm_outer: Vec<usize>,
    steps: Vec<usize>,
    y: Option<DenseMatrix>,
    converged: bool,
}

fn solve_one(
    factor: &CovarianceFactor,
    lambda: f64,
    start: SparseSymMatrix,
    y0: Option<DenseMatrix>,
    spec: &PathSpec,
    cfg: &MarsConfig,
) -> Result<Solved> {
    let problem = PenalizedProblem::new(factor.clone(), lambda)?;
    let mut policy = cfg.policy.clone();
    policy.outer_eta_tol = spec.eps / std::f64::consts::SQRT_2;
    let mut omega = start;
    let mut y = y0;
    let mut rounds = 0;
    let mut alm_outer = Vec::new();
    let mut steps = Vec::new();
    let mut solved_here = false;
    let mut reduced_ok = true;
    loop {
        let scan = sieve_scan(&omega, factor, lambda, spec.block_rows)?;
        let rep = scan.report;
        debug!(
            "lambda={lambda:.4e} round={rounds} t={} eta={:.3e}",
            omega.pattern().t(),
            rep.eta
        );
        if rep.eta <= spec.eps {
            return Ok(Solved {
                omega,
                eta: rep.eta,
                rounds,
                alm_outer,
                steps,
                y,
                converged: true,
            });
        }
        let eps_abs = spec.eps * (1.0 + rep.h_norm + rep.omega_norm);
        let mut add = scan.violations(lambda, eps_abs);
        if let Some(cap) = spec.sieve_cap {
            add.truncate(cap);
        }
        if add.is_empty() && solved_here {
            // an inexact last reduced solve is reported, not treated as a stall
            if !reduced_ok {
                return Ok(Solved {
                    omega,
                    eta: rep.eta,
                    rounds,
                    alm_outer,
                    steps,
                    y,
                    converged: false,
                });
            }
            return Err(Error::SieveStalled {
                lambda,
                eta: rep.eta,
            });
        }
        if rounds == spec.max_sieve_rounds {
            return Ok(Solved {
                omega,
                eta: rep.eta,
                rounds,
                alm_outer,
                steps,
                y,
                converged: false,
            });
        }
        let (pattern, x0) = if add.is_empty() {
            (omega.pattern().clone(), omega_to_x(&omega))
        } else {
            let (grown, map) = omega.pattern().extend(&add)?;
            let x = inject(&omega_to_x(&omega), &map, grown.t());
            (grown, x)
        };
        rounds += 1;
        let out = alm_solve(&problem, &pattern, &x0, y.as_ref(), &policy, &cfg.ssn)?;
        alm_outer.push(out.outer_iters);
        steps.extend_from_slice(&out.step_exponents);
        omega = out.omega;
        y = Some(out.state.y);
        solved_here = true;
        reduced_ok = out.converged;
        if !out.converged {
            debug!("lambda={lambda:.4e} reduced solve stopped before its tolerance; continuing to sieve");
        }
    }
}

/// Solution path over `spec.lambdas`.
pub fn solve_path(factor: &CovarianceFactor, spec: &PathSpec, cfg: &MarsConfig) -> Result<PathResult> {
    spec.validate()?;
    let mut solver = PathSolver::new(factor, spec.clone(), cfg.clone())?;
    let entries = spec
        .lambdas
        .iter()
        .map(|&l| solver.step(l))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathResult {
        lambda_max: solver.lambda_max(),
        entries,
        last_y: solver.y,
    })
}

/// Incremental form of [`solve_path`]: feeds one λ at a time, carrying the
/// warm start between calls. `spec.lambdas` is ignored.
pub struct PathSolver<'a> {
    factor: &'a CovarianceFactor,
    spec: PathSpec,
    cfg: MarsConfig,
    lmax: f64,
    diag: SparseSymMatrix,
    current: SparseSymMatrix,
    y: Option<DenseMatrix>,
    last_lambda: f64,
}

impl<'a> PathSolver<'a> {
    pub fn new(factor: &'a CovarianceFactor, spec: PathSpec, cfg: MarsConfig) -> Result<Self> {
        let lmax = lambda_max(factor)?;
        let diag = diagonal_solution(factor)?;
        Ok(Self {
            factor,
            spec,
            cfg,
            lmax,
            current: diag.clone(),
            diag,
            y: None,
            last_lambda: f64::INFINITY,
        })
    }

    pub fn lambda_max(&self) -> f64 {
        self.lmax
    }

    /// Solves at `lambda`, which must be below the previous call's λ.
    pub fn step(&mut self, lambda: f64) -> Result<PathEntry> {
        if !(lambda > 0.0 && lambda < self.last_lambda) {
            return Err(Error::InvalidParameter(format!(
                "path lambdas must be positive and strictly decreasing, got {lambda} after {}",
                self.last_lambda
            )));
        }
        self.last_lambda = lambda;
        let (factor, spec) = (self.factor, &self.spec);
        let t0 = Instant::now();
        let (mut est, mut eta, rounds, alm_outer, steps, clamped, converged) = if lambda >= self.lmax {
            info!("lambda {lambda:.6e} >= lambda_max {:.6e}; returning the diagonal solution", self.lmax);
            let eta = crate::dtrace::residual_map(&self.diag, factor, lambda)?.eta;
            (self.diag.clone(), eta, 0, Vec::new(), Vec::new(), true, true)
        } else {
            let (start, y0) = if spec.cold {
                (self.diag.clone(), None)
            } else {
                (self.current.clone(), self.y.take())
            };
            let s = solve_one(factor, lambda, start, y0, spec, &self.cfg)?;
            self.y = s.y;
            (s.omega, s.eta, s.rounds, s.alm_outer, s.steps, false, s.converged)
        };
        if spec.polish && !clamped {
            let polished = polish(&est, factor, lambda)?;
            let pe = crate::dtrace::residual_map_blocked(&polished, factor, lambda, spec.block_rows)?.eta;
            if pe <= spec.eps.max(eta) {
                est = polished;
                eta = pe;
            }
        }
        if !spec.cold {
            self.current = est.clone();
        }
        let obj = objective(&est, factor, lambda)?;
        Ok(PathEntry {
            lambda,
            s_off: est.off_diagonal_count(0.0),
            s_bar_off: est.off_diagonal_count(SBAR_THRESHOLD),
            estimate: est,
            eta,
            objective: obj,
            sieve_rounds: rounds,
            alm_outer,
            step_exponents: steps,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            clamped,
            converged: converged && eta <= spec.eps,
        })
    }
}

/// Single λ solved from the diagonal solution.
pub fn cold_solve(
    factor: &CovarianceFactor,
    lambda: f64,
    eps: f64,
    cfg: &MarsConfig,
) -> Result<PathEntry> {
    let mut spec = PathSpec::new(vec![lambda], eps)?;
    spec.cold = true;
    let mut res = solve_path(factor, &spec, cfg)?;
    Ok(res.entries.remove(0))
}

/// Writes one coordinate file per λ (`lambda_000.coo`, …) and `path.csv`.
pub fn write_path_dir(dir: &Path, result: &PathResult, comments: &[String]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let csv_path = dir.join("path.csv");
    let mut csv = BufWriter::new(fs::File::create(&csv_path).map_err(|e| Error::file(&csv_path, e))?);
    for c in comments {
        writeln!(csv, "# {c}")?;
    }
    writeln!(csv, "index,lambda,eta,objective,s_off,s_bar_off,rounds,wall_ms,converged")?;
    for (idx, e) in result.entries.iter().enumerate() {
        let name = dir.join(format!("lambda_{idx:03}.coo"));
        let mut w = BufWriter::new(fs::File::create(&name).map_err(|err| Error::file(&name, err))?);
        let mut lines = comments.to_vec();
        lines.push(format!("lambda = {:?}", e.lambda));
        write_coordinate(&mut w, &e.estimate, &lines)?;
        w.flush()?;
        writeln!(
            csv,
            "{idx},{:?},{:e},{:?},{},{},{},{:.3},{}",
            e.lambda, e.eta, e.objective, e.s_off, e.s_bar_off, e.sieve_rounds, e.wall_ms, e.converged
        )?;
    }
    csv.flush()?;
    Ok(())
}

/// η of the reduced problem for an estimate on its own pattern.
pub fn reduced_eta(omega: &SparseSymMatrix, factor: &CovarianceFactor, lambda: f64) -> Result<f64> {
    Ok(reduced_residual(&omega_to_x(omega), factor, omega.pattern(), lambda)?.eta)
}
