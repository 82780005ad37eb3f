//! Synthetic precision models, Gaussian sampling, standardization, CSV
//! ingestion and construction of the covariance factor.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dtrace::{CovarianceFactor, SparseSymMatrix};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, solve_lower_transpose, symmetric_eigen, DenseMatrix};
use crate::reduction::write_coordinate;

/// One of the five banded / block / decaying / lattice precision models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub model_id: u8,
    pub p: usize,
    pub n: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(model_id: u8, p: usize, n: usize, seed: u64) -> Result<Self> {
        let s = Self { model_id, p, n, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.model_id) {
            return Err(Error::InvalidParameter(format!("model must be 1..5, got {}", self.model_id)));
        }
        if self.p == 0 {
            return Err(Error::InvalidDimension("p must be positive".into()));
        }
        if self.model_id == 3 && self.p % 5 != 0 {
            return Err(Error::InvalidDimension(format!("model 3 needs p divisible by 5, got {}", self.p)));
        }
        if self.model_id == 5 && integer_sqrt(self.p).is_none() {
            return Err(Error::InvalidDimension(format!("model 5 needs p to be a perfect square, got {}", self.p)));
        }
        Ok(())
    }
}

fn integer_sqrt(p: usize) -> Option<usize> {
    let r = (p as f64).sqrt().round() as usize;
    (r * r == p).then_some(r)
}

/// Samples (rows) by variables (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DenseMatrix,
    pub standardized: bool,
    pub truth: Option<DenseMatrix>,
}

impl Dataset {
    pub fn new(x: DenseMatrix) -> Self {
        Self {
            x,
            standardized: false,
            truth: None,
        }
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    /// Rows picked by `idx`, truth dropped.
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        let p = self.p();
        let mut data = Vec::with_capacity(idx.len() * p);
        for &r in idx {
            data.extend_from_slice(self.x.row(r));
        }
        Dataset {
            x: DenseMatrix::new(idx.len(), p, data).expect("rows come from a finite matrix"),
            standardized: false,
            truth: None,
        }
    }
}

pub fn build_theta(spec: &ModelSpec) -> Result<DenseMatrix> {
    spec.validate()?;
    let p = spec.p;
    let mut t = DenseMatrix::identity(p);
    match spec.model_id {
        1 | 2 => {
            let band = if spec.model_id == 1 { 2 } else { 4 };
            for i in 0..p {
                for j in i + 1..(i + band + 1).min(p) {
                    t[(i, j)] = 0.2;
                    t[(j, i)] = 0.2;
                }
            }
        }
        3 => {
            for b in (0..p).step_by(5) {
                for i in b..b + 5 {
                    for j in b..b + 5 {
                        if i != j {
                            t[(i, j)] = 0.2;
                        }
                    }
                }
            }
        }
        4 => {
            for i in 0..p {
                for j in 0..p {
                    t[(i, j)] = 0.2f64.powi(i.abs_diff(j) as i32);
                }
            }
        }
        5 => {
            let r = integer_sqrt(p).expect("validated");
            for i in 0..p {
                // 1-based index i+1 not a multiple of √p: link to the next variable
                if (i + 1) % r != 0 && i + 1 < p {
                    t[(i, i + 1)] = 0.2;
                    t[(i + 1, i)] = 0.2;
                }
                if i + r < p {
                    t[(i, i + r)] = 0.2;
                    t[(i + r, i)] = 0.2;
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(t)
}

/// `n` i.i.d. rows from `𝒩(0, Θ⁻¹)`: `z ∼ 𝒩(0, I)`, `Lᵀx = z` with `Θ = LLᵀ`.
/// ChaCha8 stream seeded from `seed`, normals by the ziggurat of `rand_distr`.
pub fn sample_gaussian(theta: &DenseMatrix, n: usize, seed: u64) -> Result<Dataset> {
    let l = cholesky(theta)?;
    let p = theta.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * p);
    let mut z = vec![0.0; p];
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        data.extend(solve_lower_transpose(&l, &z));
    }
    Ok(Dataset {
        x: DenseMatrix::new(n, p, data)?,
        standardized: false,
        truth: Some(theta.clone()),
    })
}

/// Generates `Θ` for `spec` and draws `spec.n` samples from it.
pub fn generate(spec: &ModelSpec) -> Result<Dataset> {
    let theta = build_theta(spec)?;
    sample_gaussian(&theta, spec.n, spec.seed)
}

fn column_moments(x: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let (n, p) = (x.rows(), x.cols());
    let mut mean = vec![0.0; p];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; p];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    (mean, var)
}

/// Centers every column and divides by its population standard deviation.
/// Constant columns are centered and left at zero.
pub fn standardize(ds: &mut Dataset) {
    let (mean, var) = column_moments(&ds.x);
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    for r in 0..ds.x.rows() {
        for ((v, m), s) in ds.x.row_mut(r).iter_mut().zip(&mean).zip(&sd) {
            *v -= m;
            if *s > 0.0 {
                *v /= s;
            }
        }
    }
    // a second centering pass removes the rounding left by the division
    let (mean, _) = column_moments(&ds.x);
    for r in 0..ds.x.rows() {
        for (v, m) in ds.x.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    ds.standardized = true;
}

/// `A = X_cᵀ/√n` with `X_c` the column-centered data.
pub fn make_factor(ds: &Dataset) -> Result<CovarianceFactor> {
    let (n, p) = (ds.n(), ds.p());
    if n < 2 {
        return Err(Error::InvalidDimension(format!("need at least 2 samples, got {n}")));
    }
    let (mean, _) = column_moments(&ds.x);
    let s = 1.0 / (n as f64).sqrt();
    let a = DenseMatrix::from_fn(p, n, |i, r| (ds.x[(r, i)] - mean[i]) * s);
    Ok(CovarianceFactor::new(a))
}

/// Like [`make_factor`] but keeps only directions of the `n × n` Gram matrix
/// `AᵀA` with eigenvalue above `rel_tol · max eigenvalue`. Centering always
/// removes at least one direction.
pub fn make_factor_truncated(ds: &Dataset, rel_tol: f64) -> Result<CovarianceFactor> {
    let full = make_factor(ds)?;
    let a = full.a();
    let gram = a.t_matmul(a);
    let (vals, vecs) = symmetric_eigen(&gram);
    let top = vals.iter().cloned().fold(0.0f64, f64::max);
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > rel_tol * top).collect();
    let w = DenseMatrix::from_fn(vals.len(), keep.len(), |r, c| vecs[(r, keep[c])]);
    Ok(CovarianceFactor::new(a.matmul(&w)))
}

/// Reads a numeric CSV whose rows are samples.
pub fn load_csv(path: &Path, has_header: bool) -> Result<Dataset> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::file(path, e))?;
    parse_csv(s.as_bytes(), has_header)
}

pub fn parse_csv(r: impl Read, has_header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let first_row = if has_header { 2 } else { 1 };
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(first_row + k);
        if let Some(first) = rows.first() {
            if rec.len() != first.len() {
                return Err(Error::RaggedRows {
                    row,
                    expected: first.len(),
                    found: rec.len(),
                });
            }
        }
        let mut vals = Vec::with_capacity(rec.len());
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                col: c + 1,
                msg: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    col: c + 1,
                    msg: format!("non-finite value `{cell}`"),
                });
            }
            vals.push(v);
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(Error::InvalidDimension("CSV has no data rows".into()));
    }
    Ok(Dataset::new(DenseMatrix::from_rows(&rows)?))
}

/// Writes the samples as CSV with `# ` comment lines on top.
pub fn write_dataset_csv(path: &Path, ds: &Dataset, comments: &[String]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(f);
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    let mut cw = csv::Writer::from_writer(w);
    for r in 0..ds.n() {
        cw.write_record(ds.x.row(r).iter().map(|v| format!("{v:?}")))?;
    }
    cw.flush()?;
    Ok(())
}

/// Writes `Θ` in the coordinate format of [`write_coordinate`].
pub fn write_theta(path: &Path, theta: &DenseMatrix, comments: &[String]) -> Result<()> {
    let m = SparseSymMatrix::from_dense(theta, 0.0)?;
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(f);
    write_coordinate(&mut w, &m, comments)?;
    w.flush()?;
    Ok(())
}
