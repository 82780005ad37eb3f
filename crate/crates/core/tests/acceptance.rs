//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test -p dtrace-core --test acceptance -- 3 8` runs a subset.
//! Set `ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero exit.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dtrace_core::baselines::{big_s_apply, big_s_star, Solver};
use dtrace_core::dtrace::{
    diagonal_solution, lambda_max, objective, residual_map, residual_matrix, residual_matrix_projection,
    CovarianceFactor, SparseSymMatrix,
};
use dtrace_core::evalkit::{
    compute_metrics, cross_validate, dense_off_count, linear_grid, pretest_grid, run_solver_path, CvConfig, PathPoint,
    SolverConfigs,
};
use dtrace_core::linalg::{DenseMatrix, LinearMap};
use dtrace_core::reduction::{l_apply, l_dagger, l_star, ldagger_star, omega_to_x, s_apply, s_star, SparsityPattern};
use dtrace_core::sieving::{MarsConfig, PathEntry, PathSolver, PathSpec};
use dtrace_core::ssn_alm::{jacobian_mask, newton_operator, psi_gradient, psi_value, ssn_solve, SsnConfig};
use dtrace_core::synth::{build_theta, make_factor, sample_gaussian, standardize, ModelSpec};
use dtrace_core::Error;

struct Outcome {
    pass: bool,
    detail: String,
    /// Bit patterns of every non-timing output, for the determinism check.
    digest: Vec<u64>,
}

/// A converged-claim to re-verify with `residual_map`.
struct Claim {
    estimate: SparseSymMatrix,
    factor: CovarianceFactor,
    lambda: f64,
    tol: f64,
}

#[derive(Default)]
struct Ctx {
    claims: Vec<Claim>,
    c8: Option<C8Data>,
}

struct C8Data {
    rounds: Vec<usize>,
    alm_outer: Vec<usize>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian_factor(p: usize, n: usize, seed: u64) -> CovarianceFactor {
    let mut r = rng(seed);
    let s = 1.0 / (n as f64).sqrt();
    CovarianceFactor::new(DenseMatrix::from_fn(p, n, |_, _| s * r.sample::<f64, _>(StandardNormal)))
}

fn model_factor(model: u8, p: usize, n: usize, seed: u64) -> (CovarianceFactor, DenseMatrix) {
    let spec = ModelSpec::new(model, p, n, seed).unwrap();
    let theta = build_theta(&spec).unwrap();
    let mut ds = sample_gaussian(&theta, n, seed).unwrap();
    standardize(&mut ds);
    (make_factor(&ds).unwrap(), theta)
}

fn bits(v: &[f64]) -> impl Iterator<Item = u64> + '_ {
    v.iter().map(|x| x.to_bits())
}

fn claim_entry(ctx: &mut Ctx, e: &PathEntry, factor: &CovarianceFactor, tol: f64) {
    if e.converged {
        ctx.claims.push(Claim {
            estimate: e.estimate.clone(),
            factor: factor.clone(),
            lambda: e.lambda,
            tol,
        });
    }
}

fn claim_point(ctx: &mut Ctx, q: &PathPoint, factor: &CovarianceFactor, tol: f64) {
    if q.reported_converged {
        ctx.claims.push(Claim {
            estimate: q.estimate.clone(),
            factor: factor.clone(),
            lambda: q.lambda,
            tol,
        });
    }
}

// ---------------------------------------------------------------------------
// 1. λ_max gives the diagonal solution

fn c1(ctx: &mut Ctx) -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(1001);
    let (mut worst_eta, mut worst_diag, mut off_nonzero) = (0.0f64, 0.0f64, 0usize);
    let mut digest = Vec::new();
    for k in 0..100 {
        let p = r.gen_range(2..=20);
        let n = r.gen_range(2..=10);
        let f = gaussian_factor(p, n, 5000 + k);
        let lmax = lambda_max(&f).unwrap();
        let mut ps = PathSolver::new(&f, PathSpec::new(vec![lmax], 1e-10).unwrap(), MarsConfig::default()).unwrap();
        let e = ps.step(lmax).unwrap();
        off_nonzero += e.estimate.off_diagonal_count(0.0);
        for (i, d) in f.sigma_diag().iter().enumerate() {
            worst_diag = worst_diag.max((e.estimate.get(i, i) - 1.0 / d).abs());
        }
        worst_eta = worst_eta.max(residual_map(&e.estimate, &f, lmax).unwrap().eta);
        digest.extend(bits(e.estimate.values()));
        claim_entry(ctx, &e, &f, 1e-10);
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: off_nonzero == 0 && worst_diag <= 1e-8 && worst_eta <= 1e-10 && secs < 5.0,
        detail: format!(
            "100 factors: off-diagonal nonzeros {off_nonzero}, max |diag - 1/S_ii| {worst_diag:.1e}, max eta {worst_eta:.1e}, {secs:.2} s (< 5 s)"
        ),
        digest,
    }
}

// ---------------------------------------------------------------------------
// 2. Proximal-gradient oracle

/// Dense `Σ̂ = AAᵀ` by plain loops.
fn dense_cov(a: &DenseMatrix) -> Vec<Vec<f64>> {
    let (p, n) = (a.rows(), a.cols());
    (0..p)
        .map(|i| (0..p).map(|j| (0..n).map(|k| a[(i, k)] * a[(j, k)]).sum()).collect())
        .collect()
}

type Mat = Vec<Vec<f64>>;

fn grad(om: &Mat, s: &Mat) -> Mat {
    let p = om.len();
    let mut g = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in 0..p {
            let mut v = 0.0;
            for k in 0..p {
                v += 0.5 * (om[i][k] * s[k][j] + s[i][k] * om[k][j]);
            }
            g[i][j] = v - if i == j { 1.0 } else { 0.0 };
        }
    }
    g
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

fn prox(m: &Mat, t: f64) -> Mat {
    let p = m.len();
    (0..p)
        .map(|i| (0..p).map(|j| if i == j { m[i][j] } else { soft(m[i][j], t) }).collect())
        .collect()
}

fn fro(m: &Mat) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

fn oracle_eta(om: &Mat, s: &Mat, lambda: f64) -> f64 {
    let h = grad(om, s);
    let p = om.len();
    let w: Mat = (0..p).map(|i| (0..p).map(|j| om[i][j] - h[i][j]).collect()).collect();
    let pw = prox(&w, lambda);
    let r: Mat = (0..p).map(|i| (0..p).map(|j| om[i][j] - pw[i][j]).collect()).collect();
    fro(&r) / (1.0 + fro(&h) + fro(om))
}

fn oracle_objective(om: &Mat, s: &Mat, lambda: f64) -> f64 {
    let p = om.len();
    let mut q = 0.0;
    for i in 0..p {
        for j in 0..p {
            for k in 0..p {
                q += om[i][k] * s[k][j] * om[j][i];
            }
        }
    }
    let tr: f64 = (0..p).map(|i| om[i][i]).sum();
    let off: f64 = (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| om[i][j].abs()).sum();
    0.5 * q - tr + lambda * off
}

fn largest_eigenvalue(s: &Mat) -> f64 {
    let p = s.len();
    let mut v = vec![1.0; p];
    let mut est = 0.0;
    for _ in 0..10_000 {
        let w: Vec<f64> = (0..p).map(|i| (0..p).map(|j| s[i][j] * v[j]).sum()).collect();
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ray: f64 = (0..p).map(|i| v[i] * w[i]).sum::<f64>() / v.iter().map(|x| x * x).sum::<f64>();
        v = w.iter().map(|x| x / nw).collect();
        if (ray - est).abs() <= 1e-15 * ray {
            return ray;
        }
        est = ray;
    }
    est
}

enum OracleResult {
    Solved(Mat),
    Diverged,
    NotConverged(f64),
}

/// FISTA with gradient restarts, step `1/‖Σ̂‖₂`, run to `η ≤ 1e-10`.
fn prox_gradient_oracle(s: &Mat, lambda: f64) -> OracleResult {
    let p = s.len();
    let step = 1.0 / largest_eigenvalue(s);
    let mut om: Mat = (0..p).map(|i| (0..p).map(|j| if i == j { 1.0 / s[i][i] } else { 0.0 }).collect()).collect();
    let mut z = om.clone();
    let mut t = 1.0f64;
    let cap = 1e5 * (1.0 + fro(&om));
    let mut reached: Option<usize> = None;
    for it in 0..3_000_000usize {
        let g = grad(&z, s);
        let w: Mat = (0..p).map(|i| (0..p).map(|j| z[i][j] - step * g[i][j]).collect()).collect();
        let next = prox(&w, step * lambda);
        let restart: f64 = (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| (z[i][j] - next[i][j]) * (next[i][j] - om[i][j])).sum();
        let tn = if restart > 0.0 { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
        let beta = if restart > 0.0 { 0.0 } else { (t - 1.0) / tn };
        z = (0..p).map(|i| (0..p).map(|j| next[i][j] + beta * (next[i][j] - om[i][j])).collect()).collect();
        om = next;
        t = tn;
        if it % 25 == 0 {
            // η is relative to ‖Ω‖, so it also shrinks along a ray; a tight
            // norm cap keeps a divergent run from being called solved
            if fro(&om) > cap {
                return OracleResult::Diverged;
            }
            let eta = oracle_eta(&om, s, lambda);
            if eta <= 1e-10 && reached.is_none() {
                reached = Some(it);
            }
            // past 1e-10, keep going a while to shrink the oracle's own error on
            // ill-conditioned instances
            if eta <= 1e-13 || reached.is_some_and(|r| it >= 4 * r + 200_000) {
                return OracleResult::Solved(om);
            }
        }
    }
    match reached {
        Some(_) => OracleResult::Solved(om),
        None => OracleResult::NotConverged(oracle_eta(&om, s, lambda)),
    }
}

fn c2(ctx: &mut Ctx) -> Outcome {
    let t0 = Instant::now();
    let tol = 1e-11;
    let (mut matched, mut total, mut unbounded, mut mismatched, mut other) = (0, 0, 0, 0, 0);
    let (mut worst_obj, mut worst_est) = (0.0f64, 0.0f64);
    let mut notes: Vec<String> = Vec::new();
    let mut digest = Vec::new();
    for (p, n) in [(5usize, 5usize), (5, 20), (10, 5), (10, 20)] {
        let mut cell_unbounded = 0;
        for seed in 0..20u64 {
            let f = gaussian_factor(p, n, 100 * p as u64 + 10 * n as u64 + seed * 7919);
            let s = dense_cov(f.a());
            let lmax = lambda_max(&f).unwrap();
            let mut ps = PathSolver::new(&f, PathSpec::new(vec![lmax], tol).unwrap(), MarsConfig::default()).unwrap();
            let mut dead = false;
            for frac in [0.9, 0.5, 0.2] {
                total += 1;
                let lambda = frac * lmax;
                let mars = if dead { Err(None) } else { ps.step(lambda).map_err(Some) };
                let oracle = prox_gradient_oracle(&s, lambda);
                match (mars, oracle) {
                    (Ok(e), OracleResult::Solved(om)) => {
                        claim_entry(ctx, &e, &f, tol);
                        digest.extend(bits(e.estimate.values()));
                        let fo = oracle_objective(&om, &s, lambda);
                        let fm = objective(&e.estimate, &f, lambda).unwrap();
                        let rel = (fm - fo).abs() / fo.abs().max(1e-300);
                        let est = e.estimate.to_dense();
                        let d = (0..p)
                            .flat_map(|i| (0..p).map(move |j| (i, j)))
                            .map(|(i, j)| (est[(i, j)] - om[i][j]).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        worst_obj = worst_obj.max(rel);
                        worst_est = worst_est.max(d);
                        if rel <= 1e-6 && d <= 1e-4 {
                            matched += 1;
                        } else {
                            mismatched += 1;
                            notes.push(format!(
                                "p={p} n={n} seed={seed} {frac}*lmax: mismatch rel {rel:.1e} fro {d:.1e}, |oracle| {:.1e}, mars eta {:.1e}",
                                fro(&om),
                                e.eta
                            ));
                        }
                    }
                    (Err(Some(Error::Unbounded { .. })) | Err(None), OracleResult::Diverged) => {
                        dead = true;
                        unbounded += 1;
                        cell_unbounded += 1;
                    }
                    (m, o) => {
                        other += 1;
                        let ms = match m {
                            Ok(e) => format!("mars eta {:.1e}", e.eta),
                            Err(Some(e)) => format!("mars error {e}"),
                            Err(None) => "mars stopped earlier".into(),
                        };
                        let os = match o {
                            OracleResult::Solved(_) => "oracle solved".into(),
                            OracleResult::Diverged => "oracle diverged".into(),
                            OracleResult::NotConverged(eta) => format!("oracle stuck at eta {eta:.1e}"),
                        };
                        notes.push(format!("p={p} n={n} seed={seed} {frac}*lmax: {ms}; {os}"));
                        dead = true;
                    }
                }
            }
        }
        if cell_unbounded > 0 {
            notes.push(format!("p={p} n={n}: {cell_unbounded} instances unbounded below (MARS certificate and oracle divergence)"));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let mut detail = format!(
        "{matched}/{total} matched (max rel objective gap {worst_obj:.1e} <= 1e-6, max Frobenius gap {worst_est:.1e} <= 1e-4); {unbounded} unbounded, {mismatched} mismatched, {other} other; {secs:.1} s (< 60 s)"
    );
    for nline in notes.iter().take(12) {
        detail.push_str("\n      ");
        detail.push_str(nline);
    }
    Outcome {
        pass: matched == total && secs < 60.0,
        detail,
        digest,
    }
}

// ---------------------------------------------------------------------------
// 3. Cross-solver agreement

fn c3(ctx: &mut Ctx) -> Outcome {
    let tol = 1e-6;
    let (f, theta) = model_factor(1, 100, 50, 3);
    let grid = pretest_grid(&f, dense_off_count(&theta), 0.01, 10, tol, &MarsConfig::default()).unwrap();
    let t0 = Instant::now();
    let mut paths = Vec::new();
    let mut errors = Vec::new();
    for s in Solver::ALL {
        match run_solver_path(s, &f, &grid, tol, false, &SolverConfigs::default()) {
            Ok(pts) => {
                for q in &pts {
                    claim_point(ctx, q, &f, tol);
                }
                paths.push((s, pts));
            }
            Err(e) => errors.push(format!("{s}: {e}")),
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let mut worst = 0.0f64;
    let mut digest = Vec::new();
    for (_, a) in &paths {
        for q in a {
            digest.extend(bits(q.estimate.values()));
        }
        for (_, b) in &paths {
            for (qa, qb) in a.iter().zip(b) {
                let (da, db) = (qa.estimate.to_dense(), qb.estimate.to_dense());
                worst = worst.max(da.sub(&db).frobenius_norm() / (1.0 + da.frobenius_norm()));
            }
        }
    }
    let all_conv = paths.iter().all(|(_, p)| p.iter().all(|q| q.converged));
    let etas: Vec<String> = paths
        .iter()
        .map(|(s, p)| format!("{s} {:.1e}", p.iter().map(|q| q.eta).fold(0.0, f64::max)))
        .collect();
    Outcome {
        pass: errors.is_empty() && paths.len() == 4 && worst <= 1e-3 && all_conv && secs < 120.0,
        detail: format!(
            "lambdas {:.3}..{:.3}; max pairwise relative gap {worst:.1e} (<= 1e-3); max eta [{}]; {}{secs:.1} s (< 120 s)",
            grid.first().unwrap_or(&f64::NAN),
            grid.last().unwrap_or(&f64::NAN),
            etas.join(", "),
            if errors.is_empty() { String::new() } else { format!("errors: {}; ", errors.join("; ")) }
        ),
        digest,
    }
}

// ---------------------------------------------------------------------------
// 4. Converged claims re-verified

fn c4(ctx: &mut Ctx) -> Outcome {
    let mut bad = 0;
    let mut worst_ratio = 0.0f64;
    for c in &ctx.claims {
        let eta = residual_map(&c.estimate, &c.factor, c.lambda).unwrap().eta;
        worst_ratio = worst_ratio.max(eta / c.tol);
        if eta > c.tol {
            bad += 1;
        }
    }
    Outcome {
        pass: bad == 0 && !ctx.claims.is_empty(),
        detail: format!(
            "{} converged claims from the other criteria re-checked; {bad} above tol; max eta/tol {worst_ratio:.2}",
            ctx.claims.len()
        ),
        digest: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// 5. Operator and gradient suites

fn random_pattern(r: &mut ChaCha8Rng, p: usize, density: f64) -> SparsityPattern {
    let mut kept = Vec::new();
    for i in 0..p {
        for j in i..p {
            if i == j || r.gen_bool(density) {
                kept.push((i, j));
            }
        }
    }
    SparsityPattern::new(p, kept).unwrap()
}

fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| r.gen_range(-1.0..1.0))
}

fn rand_sym(r: &mut ChaCha8Rng, p: usize) -> DenseMatrix {
    let mut m = rand_mat(r, p, p);
    m.symmetrize();
    m
}

fn vdot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn c5(_: &mut Ctx) -> Outcome {
    let mut r = rng(55);
    let (mut adj, mut fd, mut selfadj, mut psd, mut moreau) = ([0.0f64; 4], 0.0f64, 0.0f64, f64::INFINITY, 0.0f64);
    for _ in 0..100 {
        let p = r.gen_range(3..=12);
        let n = r.gen_range(2..=8);
        let pat = random_pattern(&mut r, p, 0.4);
        let t = pat.t();
        let f = CovarianceFactor::new(rand_mat(&mut r, p, n));
        let om = rand_sym(&mut r, p);
        let v: Vec<f64> = (0..t).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = rand_mat(&mut r, p, n);

        // L and L*
        let a = vdot(&l_apply(&om, &pat), &v);
        let b = om.frobenius_dot(&l_star(&v, &pat).unwrap().to_dense());
        adj[0] = adj[0].max(rel_gap(a, b));
        // L† and L†*
        let a = l_dagger(&v, &pat).unwrap().to_dense().frobenius_dot(&om);
        let b = vdot(&v, &ldagger_star(&om, &pat));
        adj[1] = adj[1].max(rel_gap(a, b));
        // S and S*
        let a = vdot(&s_apply(&y, &f, &pat), &v);
        let b = y.frobenius_dot(&s_star(&v, &f, &pat));
        adj[2] = adj[2].max(rel_gap(a, b));
        // full-space 𝒮 and 𝒮*
        let a = big_s_apply(&y, &f).frobenius_dot(&om);
        let b = y.frobenius_dot(&big_s_star(&om, &f));
        adj[3] = adj[3].max(rel_gap(a, b));

        // ∇ψ against central differences
        let sigma = r.gen_range(0.5..3.0);
        let lambda = r.gen_range(0.05..0.5);
        let x: Vec<f64> = (0..t).map(|_| r.gen_range(-1.0..1.0)).collect();
        let g = psi_gradient(&y, &x, sigma, lambda, &f, &pat);
        let h = 1e-5;
        let mut yy = y.clone();
        for k in 0..p * n {
            let orig = yy.data()[k];
            yy.data_mut()[k] = orig + h;
            let up = psi_value(&yy, &x, sigma, lambda, &f, &pat);
            yy.data_mut()[k] = orig - h;
            let dn = psi_value(&yy, &x, sigma, lambda, &f, &pat);
            yy.data_mut()[k] = orig;
            fd = fd.max(((up - dn) / (2.0 * h) - g.data()[k]).abs());
        }

        // Newton operator
        let mask = jacobian_mask(&y, &x, sigma, lambda, &f, &pat);
        let op = newton_operator(mask, sigma, &f, &pat);
        let d1 = rand_mat(&mut r, p, n);
        let d2 = rand_mat(&mut r, p, n);
        let (mut o1, mut o2) = (vec![0.0; p * n], vec![0.0; p * n]);
        op.apply(d1.data(), &mut o1);
        op.apply(d2.data(), &mut o2);
        selfadj = selfadj.max(rel_gap(vdot(&o1, d2.data()), vdot(d1.data(), &o2)));
        // ⟨D, VD⟩ − ‖D‖² ≥ 0
        psd = psd.min((vdot(d1.data(), &o1) - vdot(d1.data(), d1.data())) / vdot(d1.data(), d1.data()));

        // Moreau decomposition of the residual
        let r1 = residual_matrix(&om, &f, lambda).unwrap();
        let r2 = residual_matrix_projection(&om, &f, lambda).unwrap();
        moreau = moreau.max(r1.sub(&r2).max_abs() / (1.0 + r1.max_abs()));
    }
    let pass = adj.iter().all(|&a| a <= 1e-12) && fd <= 1e-5 && selfadj <= 1e-10 && psd >= -1e-10 && moreau <= 1e-12;
    Outcome {
        pass,
        detail: format!(
            "100 instances: adjoint gaps L {:.1e}, L-dagger {:.1e}, S {:.1e}, full S {:.1e} (<= 1e-12); grad vs central diff {fd:.1e} (<= 1e-5); Newton self-adjoint {selfadj:.1e} (<= 1e-10), min <D,VD>/|D|^2 - 1 = {psd:.1e} (>= 0); Moreau {moreau:.1e} (<= 1e-12)",
            adj[0], adj[1], adj[2], adj[3]
        ),
        digest: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// 6. SSN convergence order

fn c6(_: &mut Ctx) -> Outcome {
    let (f, _) = model_factor(1, 200, 100, 6);
    let lmax = lambda_max(&f).unwrap();
    let lambda = 0.5 * lmax;
    // the pattern a sieved solve ends on at this λ
    let mut ps = PathSolver::new(&f, PathSpec::new(vec![lambda], 1e-6).unwrap(), MarsConfig::default()).unwrap();
    let e = ps.step(lambda).unwrap();
    let pat = e.estimate.pattern().clone();
    let x = omega_to_x(&diagonal_solution(&f).unwrap().embed(&pat).unwrap());
    let out = ssn_solve(&x, 1.0, lambda, &f, &pat, &SsnConfig::default(), 1e-13, DenseMatrix::zeros(f.p(), f.n())).unwrap();
    let g = &out.grad_history;
    let tail: Vec<f64> = g.iter().rev().take(3).rev().cloned().collect();
    let mut ok = tail.len() == 3;
    for w in tail.windows(2) {
        if w[0] <= 1e-3 && w[1] > w[0].powf(1.1) {
            ok = false;
        }
    }
    let shown: Vec<String> = g.iter().map(|v| format!("{v:.1e}")).collect();
    Outcome {
        pass: ok && out.converged,
        detail: format!(
            "Model 1 p=200 n=100, lambda=0.5*lmax, t={}, sigma=1: gradient norms [{}]; last three checked against g^1.1",
            pat.t(),
            shown.join(" ")
        ),
        digest: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// 7. CV support recovery

fn c7(_: &mut Ctx) -> Outcome {
    let t0 = Instant::now();
    let (p, n) = (200, 400);
    let spec_truth = build_theta(&ModelSpec::new(1, p, n, 0).unwrap()).unwrap();
    let (mut tp, mut tn, mut gap, mut ratio) = (0.0, 0.0, 0.0, 0.0);
    let truth_off = dense_off_count(&spec_truth) as f64;
    let mut digest = Vec::new();
    let reps = 20;
    let mut chosen = Vec::new();
    for rep in 0..reps {
        let seed = 7000 + rep as u64;
        let mut ds = sample_gaussian(&spec_truth, n, seed).unwrap();
        standardize(&mut ds);
        let lmax = lambda_max(&make_factor(&ds).unwrap()).unwrap();
        let grid = linear_grid(lmax, 0.2 * lmax, 20).unwrap();
        let cv = cross_validate(&ds, &grid, &CvConfig::new(5, seed, 1e-4)).unwrap();
        let m = compute_metrics(&cv.refit.estimate, &spec_truth).unwrap();
        tp += m.tp;
        tn += m.tn;
        ratio += m.s_off as f64 / truth_off;
        gap += if m.s_off > 0 { (m.s_off - m.s_bar_off) as f64 / m.s_off as f64 } else { 0.0 };
        chosen.push(cv.chosen_index);
        digest.extend(bits(cv.refit.estimate.values()));
        digest.extend(bits(&cv.mean_loss));
    }
    let r = reps as f64;
    let (tp, tn, gap, ratio) = (tp / r, tn / r, gap / r, ratio / r);
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: tp >= 0.70 && tn >= 0.98 && gap <= 0.02 && secs < 600.0,
        detail: format!(
            "20 reps, 5-fold CV on 20 lambdas in [0.2, 1]*lmax: mean TP {tp:.4} (>= 0.70), mean TN {tn:.4} (>= 0.98), mean (s_off - s_bar_off)/s_off {gap:.4} (<= 0.02); mean s_off / true edges {ratio:.2}; chosen indices {chosen:?}; {secs:.1} s (< 600 s)"
        ),
        digest,
    }
}

// ---------------------------------------------------------------------------
// 8. Timing at p = 2000, and 9. sieving economy

fn c8(ctx: &mut Ctx) -> Outcome {
    let tol = 1e-4;
    let (f, theta) = model_factor(1, 2000, 100, 8);
    let grid = pretest_grid(&f, dense_off_count(&theta), 0.01, 10, tol, &MarsConfig::default()).unwrap();

    let t0 = Instant::now();
    let mut ps = PathSolver::new(&f, PathSpec::new(grid.clone(), tol).unwrap(), MarsConfig::default()).unwrap();
    let entries: Vec<PathEntry> = grid.iter().map(|&l| ps.step(l).unwrap()).collect();
    let mars_s = t0.elapsed().as_secs_f64();
    for e in &entries {
        claim_entry(ctx, e, &f, tol);
    }
    ctx.c8 = Some(C8Data {
        rounds: entries.iter().map(|e| e.sieve_rounds).collect(),
        alm_outer: entries.iter().flat_map(|e| e.alm_outer.iter().cloned()).collect(),
    });

    let t1 = Instant::now();
    let ssnal = run_solver_path(Solver::Ssnal, &f, &grid, tol, false, &SolverConfigs::default());
    let ssnal_s = t1.elapsed().as_secs_f64();
    let (ssnal_ok, ssnal_note) = match &ssnal {
        Ok(pts) => {
            for q in pts {
                claim_point(ctx, q, &f, tol);
            }
            (pts.iter().all(|q| q.converged), String::new())
        }
        Err(e) => (false, format!(" (ssnal error: {e})")),
    };
    let mars_ok = entries.iter().all(|e| e.converged);
    let ratio = mars_s / ssnal_s;
    Outcome {
        pass: mars_ok && ssnal_ok && mars_s < 60.0 && ratio <= 0.5,
        detail: format!(
            "lambdas {:.2}..{:.2}: MARS {mars_s:.2} s (< 60 s), SSNAL {ssnal_s:.2} s, ratio {ratio:.3} (<= 0.5); s_off {}..{}{ssnal_note}",
            grid[0],
            grid[grid.len() - 1],
            entries[0].s_off,
            entries[entries.len() - 1].s_off
        ),
        digest: Vec::new(),
    }
}

fn c9(ctx: &mut Ctx) -> Outcome {
    let Some(d) = &ctx.c8 else {
        return Outcome {
            pass: false,
            detail: "needs criterion 8".into(),
            digest: Vec::new(),
        };
    };
    let few = d.rounds.iter().filter(|&&r| r <= 3).count();
    let frac = few as f64 / d.rounds.len() as f64;
    let max_outer = d.alm_outer.iter().cloned().max().unwrap_or(0);
    Outcome {
        pass: frac >= 0.9 && max_outer <= 10,
        detail: format!(
            "sieve rounds per lambda {:?} ({:.0}% <= 3, need >= 90%); ALM outer iterations per reduced solve max {max_outer} (<= 10)",
            d.rounds,
            100.0 * frac
        ),
        digest: Vec::new(),
    }
}

// ---------------------------------------------------------------------------

fn c10(first: &[(usize, Vec<u64>)]) -> Outcome {
    let mut scratch = Ctx::default();
    let mut same = Vec::new();
    let mut differ = Vec::new();
    for (k, d) in first {
        let again = match k {
            1 => c1(&mut scratch),
            2 => c2(&mut scratch),
            3 => c3(&mut scratch),
            7 => c7(&mut scratch),
            _ => continue,
        };
        if &again.digest == d {
            same.push(*k);
        } else {
            differ.push(*k);
        }
    }
    Outcome {
        pass: differ.is_empty() && !same.is_empty(),
        detail: format!("reran criteria {same:?} bit-identical; differing {differ:?}"),
        digest: Vec::new(),
    }
}

fn main() {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |k: usize| picked.is_empty() || picked.contains(&k);
    let names = [
        "lambda_max gives the diagonal solution",
        "proximal-gradient oracle",
        "cross-solver agreement",
        "converged claims re-verified",
        "operator and gradient suites",
        "SSN convergence order",
        "CV support recovery",
        "MARS vs SSNAL timing",
        "sieving economy",
        "determinism",
    ];
    let mut ctx = Ctx::default();
    let mut digests = Vec::new();
    let mut fails = 0;
    let mut report = |k: usize, o: Outcome, secs: f64| {
        println!(
            "criterion {k:>2} {} {}: {} [{secs:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            names[k - 1],
            o.detail
        );
        if !o.pass {
            fails += 1;
        }
        o.digest
    };
    let runners: [(usize, fn(&mut Ctx) -> Outcome); 9] =
        [(1, c1), (2, c2), (3, c3), (7, c7), (8, c8), (5, c5), (6, c6), (4, c4), (9, c9)];
    for (k, run) in runners {
        if want(k) || (k == 8 && want(9)) {
            let t = Instant::now();
            let o = run(&mut ctx);
            let d = report(k, o, t.elapsed().as_secs_f64());
            if [1, 2, 3, 7].contains(&k) {
                digests.push((k, d));
            }
        }
    }
    if want(10) {
        let t = Instant::now();
        let o = c10(&digests);
        report(10, o, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {fails} criteria failed");
    if fails > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
