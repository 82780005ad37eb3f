//! Support-recovery metrics, K-fold cross-validation over a λ path, the
//! positive-definiteness repair and the benchmark harness.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{baseline_solve, BaselineConfig, FullDualState, Solver};
use crate::dtrace::{lambda_max, objective, residual_map, CovarianceFactor, PenalizedProblem, SparseSymMatrix};
use crate::error::{Error, Result};
use crate::linalg::{smallest_eigenvalue, spectral_norm, DenseMatrix, FnMap};
use crate::sieving::{solve_path, MarsConfig, PathEntry, PathSolver, PathSpec, SBAR_THRESHOLD};
use crate::synth::{build_theta, make_factor, sample_gaussian, standardize, Dataset, ModelSpec};

/// Estimation error and support recovery of an estimate against the truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub frobenius: f64,
    pub spectral: f64,
    /// Largest absolute row sum of the difference.
    pub infinity: f64,
    pub tp: f64,
    pub tn: f64,
    pub s_off: usize,
    pub s_bar_off: usize,
}

pub fn compute_metrics(estimate: &SparseSymMatrix, truth: &DenseMatrix) -> Result<Metrics> {
    compute_metrics_with(estimate, truth, SBAR_THRESHOLD)
}

/// [`compute_metrics`] with a custom `s̄_off` threshold. Off-diagonal counts
/// run over both triangles.
pub fn compute_metrics_with(estimate: &SparseSymMatrix, truth: &DenseMatrix, sbar_threshold: f64) -> Result<Metrics> {
    let p = estimate.p();
    if truth.rows() != p || truth.cols() != p {
        return Err(Error::DimensionMismatch(format!(
            "estimate is {p}x{p}, truth is {}x{}",
            truth.rows(),
            truth.cols()
        )));
    }
    let est = estimate.to_dense();
    let diff = est.sub(truth);
    let infinity = (0..p)
        .map(|i| diff.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let (mut pos, mut hit, mut neg, mut rej) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..p {
        for j in 0..p {
            if i == j {
                continue;
            }
            if truth[(i, j)] != 0.0 {
                pos += 1;
                hit += (est[(i, j)] != 0.0) as usize;
            } else {
                neg += 1;
                rej += (est[(i, j)] == 0.0) as usize;
            }
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(Metrics {
        frobenius: diff.frobenius_norm(),
        spectral: spectral_norm(&diff, 1e-10),
        infinity,
        tp: rate(hit, pos),
        tn: rate(rej, neg),
        s_off: estimate.off_diagonal_count(0.0),
        s_bar_off: estimate.off_diagonal_count(sbar_threshold),
    })
}

/// Smallest eigenvalue of a symmetric sparse matrix by shifted power iteration.
pub fn min_eigenvalue(m: &SparseSymMatrix) -> f64 {
    let p = m.p();
    let positions = m.pattern().positions();
    let vals = m.values();
    let op = FnMap::new(p, |x: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&(i, j), &v) in positions.iter().zip(vals) {
            out[i] += v * x[j];
            if i != j {
                out[j] += v * x[i];
            }
        }
    });
    smallest_eigenvalue(&op, 1e-14)
}

/// Adds `(|γ_min| + margin)·I` when `γ_min ≤ 0`; returns the input otherwise.
pub fn pd_repair(estimate: &SparseSymMatrix, margin: f64) -> Result<SparseSymMatrix> {
    if !(margin >= 0.0) {
        return Err(Error::InvalidParameter(format!("margin must be >= 0, got {margin}")));
    }
    let gamma = min_eigenvalue(estimate);
    if gamma > 0.0 {
        return Ok(estimate.clone());
    }
    let mut out = estimate.clone();
    let mut shift = gamma.abs() + margin;
    // power iteration can stop a little above γ_min; recheck and top up
    for _ in 0..5 {
        let diag = out.pattern().diagonal_indices().to_vec();
        let vals = out.values_mut();
        for k in diag {
            vals[k] += shift;
        }
        let g = min_eigenvalue(&out);
        if g >= margin - 1e-10 {
            break;
        }
        shift = margin - g;
    }
    Ok(out)
}

/// One point of a solver path, with η re-verified by [`residual_map`].
#[derive(Clone, Debug)]
pub struct PathPoint {
    pub lambda: f64,
    pub estimate: SparseSymMatrix,
    pub eta: f64,
    pub objective: f64,
    pub wall_ms: f64,
    pub s_off: usize,
    pub s_bar_off: usize,
    /// What the solver itself reported.
    pub reported_converged: bool,
    /// `eta ≤ tol` after re-verification, and the solver reported success.
    pub converged: bool,
}

#[derive(Clone, Debug, Default)]
pub struct SolverConfigs {
    pub mars: MarsConfig,
    pub baseline: BaselineConfig,
}

/// Solves a decreasing λ list with any registered solver, warm-started from
/// the previous λ unless `cold`.
pub fn run_solver_path(
    solver: Solver,
    factor: &CovarianceFactor,
    lambdas: &[f64],
    tol: f64,
    cold: bool,
    cfgs: &SolverConfigs,
) -> Result<Vec<PathPoint>> {
    let mut points = Vec::with_capacity(lambdas.len());
    match solver {
        Solver::Mars => {
            let mut spec = PathSpec::new(lambdas.to_vec(), tol)?;
            spec.cold = cold;
            spec.validate()?;
            let mut ps = PathSolver::new(factor, spec, cfgs.mars.clone())?;
            for &l in lambdas {
                let e = ps.step(l)?;
                points.push(verify_point(factor, e.estimate, l, e.wall_ms, tol, e.converged)?);
            }
        }
        _ => {
            PathSpec::new(lambdas.to_vec(), tol)?.validate()?;
            let mut cfg = cfgs.baseline.clone();
            cfg.policy.outer_eta_tol = tol;
            let mut warm: Option<FullDualState> = None;
            for &l in lambdas {
                let t0 = Instant::now();
                let prob = PenalizedProblem::new(factor.clone(), l)?;
                let out = baseline_solve(solver, &prob, &cfg, if cold { None } else { warm.as_ref() })?;
                let est = out.estimate()?;
                let ms = t0.elapsed().as_secs_f64() * 1e3;
                points.push(verify_point(factor, est, l, ms, tol, out.converged)?);
                warm = Some(out.state);
            }
        }
    }
    Ok(points)
}

fn verify_point(
    factor: &CovarianceFactor,
    estimate: SparseSymMatrix,
    lambda: f64,
    wall_ms: f64,
    tol: f64,
    reported: bool,
) -> Result<PathPoint> {
    let eta = residual_map(&estimate, factor, lambda)?.eta;
    Ok(PathPoint {
        lambda,
        objective: objective(&estimate, factor, lambda)?,
        s_off: estimate.off_diagonal_count(0.0),
        s_bar_off: estimate.off_diagonal_count(SBAR_THRESHOLD),
        estimate,
        eta,
        wall_ms,
        reported_converged: reported,
        converged: reported && eta <= tol,
    })
}

/// Cross-validation settings. Folds come from a seeded shuffle of the rows;
/// row at shuffled position `k` goes to fold `k mod folds`.
#[derive(Clone, Debug)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub eps: f64,
    pub mars: MarsConfig,
}

impl CvConfig {
    pub fn new(folds: usize, seed: u64, eps: f64) -> Self {
        Self {
            folds,
            seed,
            eps,
            mars: MarsConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub lambdas: Vec<f64>,
    /// `fold_loss[f][k]`: validation loss of fold `f` at `lambdas[k]`.
    pub fold_loss: Vec<Vec<f64>>,
    pub mean_loss: Vec<f64>,
    pub sd_loss: Vec<f64>,
    pub chosen_index: usize,
    pub chosen_lambda: f64,
    pub refit: PathEntry,
}

/// Fold index of every row.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (k, &row) in order.iter().enumerate() {
        fold[row] = k % folds;
    }
    fold
}

/// Validation factor: held-out rows centered with the training means.
fn validation_factor(val: &Dataset, train_mean: &[f64]) -> CovarianceFactor {
    let (n, p) = (val.n(), val.p());
    let s = 1.0 / (n as f64).sqrt();
    CovarianceFactor::new(DenseMatrix::from_fn(p, n, |i, r| (val.x[(r, i)] - train_mean[i]) * s))
}

fn column_means(x: &DenseMatrix) -> Vec<f64> {
    let mut m = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (a, v) in m.iter_mut().zip(x.row(r)) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= x.rows() as f64);
    m
}

/// Scores every λ by the unpenalized D-trace loss `½‖Ω̂A_val‖²_F − tr Ω̂`
/// on each fold and refits at the minimizer of the mean loss.
pub fn cross_validate(ds: &Dataset, lambdas: &[f64], cfg: &CvConfig) -> Result<CvReport> {
    let n = ds.n();
    if cfg.folds < 2 || n < cfg.folds {
        return Err(Error::InvalidParameter(format!(
            "need 2 <= folds <= n, got folds = {} with n = {n}",
            cfg.folds
        )));
    }
    let spec = PathSpec::new(lambdas.to_vec(), cfg.eps)?;
    spec.validate()?;
    let assign = fold_assignment(n, cfg.folds, cfg.seed);
    let fold_loss = (0..cfg.folds)
        .into_par_iter()
        .map(|f| {
            let train_idx: Vec<usize> = (0..n).filter(|&r| assign[r] != f).collect();
            let val_idx: Vec<usize> = (0..n).filter(|&r| assign[r] == f).collect();
            let train = ds.select_rows(&train_idx);
            let val = ds.select_rows(&val_idx);
            let factor = make_factor(&train)?;
            let vf = validation_factor(&val, &column_means(&train.x));
            let path = solve_path(&factor, &spec, &cfg.mars)?;
            path.entries
                .iter()
                .map(|e| objective(&e.estimate, &vf, 0.0))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let k = lambdas.len();
    let mut mean_loss = vec![0.0; k];
    let mut sd_loss = vec![0.0; k];
    for j in 0..k {
        let col: Vec<f64> = fold_loss.iter().map(|f| f[j]).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        mean_loss[j] = m;
        sd_loss[j] = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (col.len() - 1) as f64).sqrt();
    }
    let chosen_index = mean_loss
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let full = make_factor(ds)?;
    let refit_spec = PathSpec::new(lambdas[..=chosen_index].to_vec(), cfg.eps)?;
    let refit = solve_path(&full, &refit_spec, &cfg.mars)?
        .entries
        .pop()
        .expect("non-empty refit path");
    info!(
        "cross-validation picked lambda {:.6} (index {chosen_index}) by held-out D-trace loss",
        lambdas[chosen_index]
    );
    Ok(CvReport {
        lambdas: lambdas.to_vec(),
        fold_loss,
        mean_loss,
        sd_loss,
        chosen_index,
        chosen_lambda: lambdas[chosen_index],
        refit,
    })
}

pub fn write_cv_csv(path: &Path, report: &CvReport, comments: &[String]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(f);
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "# criterion: held-out D-trace loss 0.5*|Omega A_val|_F^2 - tr(Omega)")?;
    writeln!(w, "index,lambda,mean_loss,sd_loss,chosen")?;
    for (k, l) in report.lambdas.iter().enumerate() {
        writeln!(
            w,
            "{k},{l:?},{:?},{:?},{}",
            report.mean_loss[k],
            report.sd_loss[k],
            (k == report.chosen_index) as u8
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `count` equally spaced values from `hi` down to `lo`.
pub fn linear_grid(hi: f64, lo: f64, count: usize) -> Result<Vec<f64>> {
    if !(hi > lo && lo > 0.0) || count == 0 {
        return Err(Error::InvalidParameter(format!("grid needs hi > lo > 0 and count > 0, got {hi}:{lo}:{count}")));
    }
    if count == 1 {
        return Ok(vec![hi]);
    }
    Ok((0..count).map(|k| hi - (hi - lo) * k as f64 / (count - 1) as f64).collect())
}

/// Number of off-diagonal nonzeros (both triangles) of a dense matrix.
pub fn dense_off_count(m: &DenseMatrix) -> usize {
    let p = m.rows();
    (0..p)
        .map(|i| (0..p).filter(|&j| j != i && m[(i, j)] != 0.0).count())
        .sum()
}

/// Walks `λ_max − step·k`, k = 1, 2, …, until the MARS estimate carries
/// more off-diagonal nonzeros than `target_s_off`, then returns the last
/// `count` values (largest first).
pub fn pretest_grid(
    factor: &CovarianceFactor,
    target_s_off: usize,
    step: f64,
    count: usize,
    tol: f64,
    mars: &MarsConfig,
) -> Result<Vec<f64>> {
    let lmax = lambda_max(factor)?;
    let mut ps = PathSolver::new(factor, PathSpec::new(vec![lmax], tol)?, mars.clone())?;
    let mut visited = Vec::new();
    let mut k = 1;
    loop {
        let l = lmax - step * k as f64;
        if l <= step * 1e-6 {
            warn!("pretest reached lambda <= 0 before the oracle sparsity {target_s_off}");
            break;
        }
        match ps.step(l) {
            Ok(e) => {
                visited.push(l);
                if e.s_off > target_s_off {
                    break;
                }
            }
            Err(err @ Error::Unbounded { .. }) => {
                warn!("pretest stopped: {err}");
                break;
            }
            Err(e) => return Err(e),
        }
        k += 1;
    }
    if visited.len() < count {
        warn!("pretest produced only {} lambdas", visited.len());
    }
    Ok(visited[visited.len().saturating_sub(count)..].to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Warm,
    Cold,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Warm => "warm",
            Mode::Cold => "cold",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LambdaChoice {
    /// Step size and path length of the sparsity pretest.
    Pretest { step: f64, count: usize },
    /// Fractions of each dataset's `λ_max`.
    Relative(Vec<f64>),
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub models: Vec<u8>,
    pub dims: Vec<(usize, usize)>,
    pub lambdas: LambdaChoice,
    pub solvers: Vec<Solver>,
    pub modes: Vec<Mode>,
    pub reps: usize,
    pub seed: u64,
    pub tol: f64,
    pub standardize: bool,
    pub solver_cfgs: SolverConfigs,
}

impl BenchConfig {
    pub fn small() -> Self {
        Self {
            models: vec![1, 2, 3, 4, 5],
            dims: vec![(100, 50)],
            lambdas: LambdaChoice::Pretest { step: 0.01, count: 10 },
            solvers: Solver::ALL.to_vec(),
            modes: vec![Mode::Warm],
            reps: 2,
            seed: 1,
            tol: 1e-4,
            standardize: true,
            solver_cfgs: SolverConfigs::default(),
        }
    }

    /// The timing protocol at desk scale: Models 1–4 at `p = 2000` and
    /// Model 5 at `p = 2025`, `n = 100`, 10 λ's, MARS and SSNAL.
    pub fn paper_desk() -> Self {
        Self {
            models: vec![1, 2, 3, 4, 5],
            dims: vec![(2000, 100)],
            lambdas: LambdaChoice::Pretest { step: 0.01, count: 10 },
            solvers: vec![Solver::Mars, Solver::Ssnal],
            modes: vec![Mode::Warm, Mode::Cold],
            reps: 3,
            seed: 1,
            tol: 1e-4,
            standardize: true,
            solver_cfgs: SolverConfigs::default(),
        }
    }
}

/// One solver path on one replicate.
#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub model: u8,
    pub p: usize,
    pub n: usize,
    pub rep: usize,
    pub solver: Solver,
    pub mode: Mode,
    /// Factor construction plus all solves, in milliseconds.
    pub total_ms: f64,
    pub points: Vec<PathPoint>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct BenchSummary {
    pub model: u8,
    pub p: usize,
    pub n: usize,
    pub solver: Solver,
    pub mode: Mode,
    pub time_mean_s: f64,
    pub time_sd_s: f64,
    pub eta_mean: f64,
    pub eta_sd: f64,
    pub s_off_mean: f64,
    pub s_bar_off_mean: f64,
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub tol: f64,
    pub records: Vec<BenchRecord>,
    pub summary: Vec<BenchSummary>,
}

/// Model `p` adjusted to the nearest valid size (Model 3 rounds to a
/// multiple of 5, Model 5 to a perfect square).
pub fn adjust_p(model: u8, p: usize) -> usize {
    match model {
        3 => (p / 5).max(1) * 5,
        5 => {
            let r = ((p as f64).sqrt().round() as usize).max(1);
            r * r
        }
        _ => p,
    }
}

fn rep_seed(seed: u64, model: u8, rep: usize) -> u64 {
    seed.wrapping_add(10_000 * model as u64).wrapping_add(rep as u64)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

fn bench_dataset(model: u8, p: usize, n: usize, seed: u64, standardize_data: bool) -> Result<Dataset> {
    let spec = ModelSpec::new(model, p, n, seed)?;
    let theta = build_theta(&spec)?;
    let mut ds = sample_gaussian(&theta, n, seed)?;
    if standardize_data {
        standardize(&mut ds);
    }
    Ok(ds)
}

/// Runs every (model, dims, rep, solver, mode) cell. Per-cell failures are
/// recorded and the run continues.
pub fn bench_protocol(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps == 0 || cfg.solvers.is_empty() || cfg.modes.is_empty() {
        return Err(Error::InvalidParameter("bench needs reps, solvers and modes".into()));
    }
    let mut groups = Vec::new();
    for &model in &cfg.models {
        for &(p0, n) in &cfg.dims {
            let p = adjust_p(model, p0);
            ModelSpec::new(model, p, n, 0)?;
            let grid = match &cfg.lambdas {
                LambdaChoice::Fixed(l) => Some(l.clone()),
                LambdaChoice::Relative(_) => None,
                LambdaChoice::Pretest { step, count } => {
                    let ds = bench_dataset(model, p, n, rep_seed(cfg.seed, model, 0), cfg.standardize)?;
                    let target = dense_off_count(ds.truth.as_ref().expect("synthetic truth"));
                    let g = pretest_grid(&make_factor(&ds)?, target, *step, *count, cfg.tol, &cfg.solver_cfgs.mars)?;
                    info!("model {model} p={p} n={n}: pretest grid {g:?}");
                    Some(g)
                }
            };
            groups.push((model, p, n, grid));
        }
    }
    let mut cells = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for rep in 0..cfg.reps {
            for &solver in &cfg.solvers {
                for &mode in &cfg.modes {
                    cells.push((gi, g.0, g.1, g.2, rep, solver, mode));
                }
            }
        }
    }
    let records: Vec<BenchRecord> = cells
        .par_iter()
        .map(|&(gi, model, p, n, rep, solver, mode)| {
            let run = || -> Result<(f64, Vec<PathPoint>)> {
                let ds = bench_dataset(model, p, n, rep_seed(cfg.seed, model, rep), cfg.standardize)?;
                let t0 = Instant::now();
                let factor = make_factor(&ds)?;
                let factor_ms = t0.elapsed().as_secs_f64() * 1e3;
                let lambdas = match (&groups[gi].3, &cfg.lambdas) {
                    (Some(g), _) => g.clone(),
                    (None, LambdaChoice::Relative(r)) => {
                        let lm = lambda_max(&factor)?;
                        r.iter().map(|f| f * lm).collect()
                    }
                    _ => unreachable!(),
                };
                let pts = run_solver_path(solver, &factor, &lambdas, cfg.tol, mode == Mode::Cold, &cfg.solver_cfgs)?;
                let total = factor_ms + pts.iter().map(|q| q.wall_ms).sum::<f64>();
                Ok((total, pts))
            };
            let (total_ms, points, error) = match run() {
                Ok((t, pts)) => (t, pts, None),
                Err(e) => {
                    warn!("model {model} rep {rep} {solver} {}: {e}", mode.name());
                    (f64::NAN, Vec::new(), Some(e.to_string()))
                }
            };
            BenchRecord {
                model,
                p,
                n,
                rep,
                solver,
                mode,
                total_ms,
                points,
                error,
            }
        })
        .collect();
    let summary = summarize(&records);
    Ok(BenchReport {
        tol: cfg.tol,
        records,
        summary,
    })
}

fn summarize(records: &[BenchRecord]) -> Vec<BenchSummary> {
    let mut keys: Vec<(u8, usize, usize, Solver, Mode)> =
        records.iter().map(|r| (r.model, r.p, r.n, r.solver, r.mode)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(model, p, n, solver, mode)| {
            let rs: Vec<&BenchRecord> = records
                .iter()
                .filter(|r| (r.model, r.p, r.n, r.solver, r.mode) == (model, p, n, solver, mode))
                .collect();
            let ok: Vec<&&BenchRecord> = rs.iter().filter(|r| r.error.is_none()).collect();
            let times: Vec<f64> = ok.iter().map(|r| r.total_ms / 1e3).collect();
            let etas: Vec<f64> = ok.iter().flat_map(|r| r.points.iter().map(|q| q.eta)).collect();
            let soff: Vec<f64> = ok.iter().flat_map(|r| r.points.iter().map(|q| q.s_off as f64)).collect();
            let sbar: Vec<f64> = ok.iter().flat_map(|r| r.points.iter().map(|q| q.s_bar_off as f64)).collect();
            let (time_mean_s, time_sd_s) = mean_sd(&times);
            let (eta_mean, eta_sd) = mean_sd(&etas);
            BenchSummary {
                model,
                p,
                n,
                solver,
                mode,
                time_mean_s,
                time_sd_s,
                eta_mean,
                eta_sd,
                s_off_mean: mean_sd(&soff).0,
                s_bar_off_mean: mean_sd(&sbar).0,
                failures: rs.len() - ok.len(),
            }
        })
        .collect()
}

impl BenchReport {
    /// Checks: no failed cell, every point re-verified at `η ≤ tol`, and
    /// warm MARS at most half the warm SSNAL time wherever both ran.
    pub fn gates(&self) -> Vec<Gate> {
        let mut gates = Vec::new();
        let failed = self.records.iter().filter(|r| r.error.is_some()).count();
        gates.push(Gate {
            name: "no failed cells".into(),
            passed: failed == 0,
            detail: format!("{failed} of {} cells failed", self.records.len()),
        });
        let pts: Vec<&PathPoint> = self.records.iter().flat_map(|r| &r.points).collect();
        let worst = pts.iter().map(|q| q.eta).fold(0.0, f64::max);
        let bad = pts.iter().filter(|q| !q.converged).count();
        gates.push(Gate {
            name: "residual".into(),
            passed: bad == 0,
            detail: format!("{bad} of {} points above tol {:e}; worst eta {worst:.3e}", pts.len(), self.tol),
        });
        for s in self.summary.iter().filter(|s| s.solver == Solver::Mars && s.mode == Mode::Warm) {
            if let Some(other) = self
                .summary
                .iter()
                .find(|o| o.solver == Solver::Ssnal && o.mode == Mode::Warm && (o.model, o.p, o.n) == (s.model, s.p, s.n))
            {
                let ratio = s.time_mean_s / other.time_mean_s;
                gates.push(Gate {
                    name: format!("model {} p={} speedup", s.model, s.p),
                    passed: ratio <= 0.5,
                    detail: format!("mars/ssnal time ratio {ratio:.3}"),
                });
            }
        }
        gates
    }

    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(f);
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        writeln!(
            w,
            "model,p,n,rep,solver,mode,lambda_index,lambda,eta,objective,s_off,s_bar_off,converged,wall_ms,path_ms,error"
        )?;
        for r in &self.records {
            if let Some(e) = &r.error {
                writeln!(
                    w,
                    "{},{},{},{},{},{},,,,,,,0,,,\"{}\"",
                    r.model,
                    r.p,
                    r.n,
                    r.rep,
                    r.solver,
                    r.mode.name(),
                    e.replace('"', "'")
                )?;
                continue;
            }
            for (k, q) in r.points.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{k},{:?},{:e},{:?},{},{},{},{:.3},{:.3},",
                    r.model,
                    r.p,
                    r.n,
                    r.rep,
                    r.solver,
                    r.mode.name(),
                    q.lambda,
                    q.eta,
                    q.objective,
                    q.s_off,
                    q.s_bar_off,
                    q.converged as u8,
                    q.wall_ms,
                    r.total_ms
                )?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned summary table: time and η as `mean | sd`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5} {:>6} {:>5} {:>6} {:>5} {:>21} {:>21} {:>10} {:>10} {:>5}",
            "model", "p", "n", "solver", "mode", "time (s) mean | sd", "eta mean | sd", "s_off", "s_bar_off", "fail"
        );
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{:>5} {:>6} {:>5} {:>6} {:>5} {:>21} {:>21} {:>10.2} {:>10.2} {:>5}",
                r.model,
                r.p,
                r.n,
                r.solver.name(),
                r.mode.name(),
                format!("{:.3} | {:.3}", r.time_mean_s, r.time_sd_s),
                format!("{:.2e} | {:.2e}", r.eta_mean, r.eta_sd),
                r.s_off_mean,
                r.s_bar_off_mean,
                r.failures
            );
        }
        s
    }

    pub fn write_text(&self, path: &Path, comments: &[String]) -> Result<()> {
        let mut out = String::new();
        for c in comments {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str(&self.to_text());
        for g in self.gates() {
            let _ = writeln!(out, "gate {:<28} {} ({})", g.name, if g.passed { "pass" } else { "FAIL" }, g.detail);
        }
        std::fs::write(path, out).map_err(|e| Error::file(path, e))
    }
}

/// Off-diagonal Frobenius distance, used by the determinism checks.
pub fn relative_distance(a: &SparseSymMatrix, b: &SparseSymMatrix) -> f64 {
    let (da, db) = (a.to_dense(), b.to_dense());
    da.sub(&db).frobenius_norm() / (1.0 + da.frobenius_norm())
}
