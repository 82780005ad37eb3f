//! Reduced-space operators.
//!
//! A [`SparsityPattern`] keeps `t` upper-triangle positions (row-major, all
//! diagonals present). Vectors in `ℝᵗ` share that order. With
//! `e1 = L(I)`, `e2 = 2L(E − I)`, `e3 = e1 + e2/4`, `e4 = e1 + e2`:
//!
//! ```text
//! L*(v)    = L†(v ∘ e3)          (L†)*(V) = L(V) ∘ e4
//! S(Y)     = ½ L(YAᵀ + AYᵀ)      S*(v)    = L*(v) A
//! Γ(x)     = ½‖S*(x)‖² − ⟨x, e1⟩ + λ/2 ‖x ∘ e2‖₁,   Ω = L†(x ∘ e3)
//! ```

use std::io::{BufRead, Write};

use crate::dtrace::{CovarianceFactor, SparseSymMatrix};
use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};

/// Kept upper-triangle positions of a symmetric `p × p` matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityPattern {
    p: usize,
    kept: Vec<(usize, usize)>,
    diag: Vec<usize>,
    // both triangles: row r lists (column, position index)
    row_ptr: Vec<usize>,
    adj: Vec<(usize, usize)>,
}

impl SparsityPattern {
    /// Sorts and deduplicates `kept`; every diagonal position must be present.
    pub fn new(p: usize, mut kept: Vec<(usize, usize)>) -> Result<Self> {
        for &(i, j) in &kept {
            if i > j || j >= p {
                return Err(Error::InvalidDimension(format!(
                    "position ({i},{j}) is not in the upper triangle of a {p}×{p} matrix"
                )));
            }
        }
        kept.sort_unstable();
        kept.dedup();
        let mut diag = vec![usize::MAX; p];
        for (k, &(i, j)) in kept.iter().enumerate() {
            if i == j {
                diag[i] = k;
            }
        }
        if let Some(i) = diag.iter().position(|&k| k == usize::MAX) {
            return Err(Error::InvalidDimension(format!(
                "pattern is missing diagonal position ({i},{i})"
            )));
        }
        let mut counts = vec![0usize; p + 1];
        for &(i, j) in &kept {
            counts[i + 1] += 1;
            if i != j {
                counts[j + 1] += 1;
            }
        }
        for r in 0..p {
            counts[r + 1] += counts[r];
        }
        let row_ptr = counts;
        let mut fill = row_ptr.clone();
        let mut adj = vec![(0, 0); row_ptr[p]];
        for (k, &(i, j)) in kept.iter().enumerate() {
            adj[fill[i]] = (j, k);
            fill[i] += 1;
            if i != j {
                adj[fill[j]] = (i, k);
                fill[j] += 1;
            }
        }
        for r in 0..p {
            adj[row_ptr[r]..row_ptr[r + 1]].sort_unstable();
        }
        Ok(Self {
            p,
            kept,
            diag,
            row_ptr,
            adj,
        })
    }

    pub fn diagonal(p: usize) -> Self {
        Self::new(p, (0..p).map(|i| (i, i)).collect()).expect("diagonal pattern")
    }

    /// The whole upper triangle.
    pub fn full(p: usize) -> Self {
        let kept = (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).collect();
        Self::new(p, kept).expect("full pattern")
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn t(&self) -> usize {
        self.kept.len()
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.kept
    }

    /// Position index of `(i, i)` for each `i`.
    pub fn diagonal_indices(&self) -> &[usize] {
        &self.diag
    }

    /// `|I|`: kept entries of the full matrix, symmetric pairs counted twice.
    pub fn entry_count(&self) -> usize {
        2 * self.t() - self.p
    }

    /// `(column, position index)` of every kept entry in row `r`, both triangles.
    #[inline]
    pub fn row_entries(&self, r: usize) -> &[(usize, usize)] {
        &self.adj[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn index_of(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        if j >= self.p {
            return None;
        }
        self.row_entries(i)
            .binary_search_by_key(&j, |&(c, _)| c)
            .ok()
            .map(|q| self.row_entries(i)[q].1)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.index_of(i, j).is_some()
    }

    /// Pattern grown by `added` plus the injection old index → new index.
    pub fn extend(&self, added: &[(usize, usize)]) -> Result<(SparsityPattern, Vec<usize>)> {
        let mut kept = self.kept.clone();
        kept.extend(added.iter().map(|&(i, j)| if i <= j { (i, j) } else { (j, i) }));
        let grown = SparsityPattern::new(self.p, kept)?;
        let map = self
            .kept
            .iter()
            .map(|&(i, j)| grown.index_of(i, j).expect("superset"))
            .collect();
        Ok((grown, map))
    }

    pub fn vectors(&self) -> ReducedVectors {
        ReducedVectors::new(self)
    }
}

/// Carries a vector through a pattern injection; new positions get 0.
pub fn inject(values: &[f64], map: &[usize], new_t: usize) -> Vec<f64> {
    let mut out = vec![0.0; new_t];
    for (k, &dst) in map.iter().enumerate() {
        out[dst] = values[k];
    }
    out
}

/// The constant vectors `e1 … e4` of a pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedVectors {
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub e3: Vec<f64>,
    pub e4: Vec<f64>,
}

impl ReducedVectors {
    pub fn new(pattern: &SparsityPattern) -> Self {
        let diag: Vec<bool> = pattern.positions().iter().map(|&(i, j)| i == j).collect();
        let pick = |d: f64, o: f64| diag.iter().map(|&b| if b { d } else { o }).collect();
        Self {
            e1: pick(1.0, 0.0),
            e2: pick(0.0, 2.0),
            e3: pick(1.0, 0.5),
            e4: pick(1.0, 2.0),
        }
    }
}

/// `(Y, z)` of the reduced dual.
#[derive(Clone, Debug)]
pub struct ReducedDual {
    pub y: DenseMatrix,
    pub z: Vec<f64>,
}

/// `L(Ω)`: kept upper-triangle entries in pattern order.
pub fn l_apply(omega: &DenseMatrix, pattern: &SparsityPattern) -> Vec<f64> {
    pattern.positions().iter().map(|&(i, j)| omega[(i, j)]).collect()
}

pub fn l_dagger(omega: &[f64], pattern: &SparsityPattern) -> Result<SparseSymMatrix> {
    SparseSymMatrix::new(pattern.clone(), omega.to_vec())
}

pub fn l_star(v: &[f64], pattern: &SparsityPattern) -> Result<SparseSymMatrix> {
    l_dagger(&scaled(v, pattern, 0.5), pattern)
}

pub fn ldagger_star(v: &DenseMatrix, pattern: &SparsityPattern) -> Vec<f64> {
    scaled(&l_apply(v, pattern), pattern, 2.0)
}

fn scaled(v: &[f64], pattern: &SparsityPattern, off: f64) -> Vec<f64> {
    v.iter()
        .zip(pattern.positions())
        .map(|(&x, &(i, j))| if i == j { x } else { off * x })
        .collect()
}

/// `Ω · B` for `Ω = L†(values)`.
pub fn sym_times(pattern: &SparsityPattern, values: &[f64], b: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(pattern.p(), b.cols());
    sym_times_raw(pattern, values, 1.0, b, out.data_mut());
    out
}

/// `out = Ω · B` (row-major, `p × B.cols()`) where off-diagonal values are
/// multiplied by `off_scale`.
pub(crate) fn sym_times_raw(
    pattern: &SparsityPattern,
    values: &[f64],
    off_scale: f64,
    b: &DenseMatrix,
    out: &mut [f64],
) {
    let n = b.cols();
    debug_assert_eq!(b.rows(), pattern.p());
    debug_assert_eq!(out.len(), pattern.p() * n);
    for r in 0..pattern.p() {
        let dst = &mut out[r * n..(r + 1) * n];
        dst.iter_mut().for_each(|v| *v = 0.0);
        for &(c, k) in pattern.row_entries(r) {
            let w = if c == r { values[k] } else { off_scale * values[k] };
            if w != 0.0 {
                crate::linalg::axpy(w, b.row(c), dst);
            }
        }
    }
}

/// `S(Y)_k = ½(Y_i·A_j + A_i·Y_j)` for each kept `k = (i, j)`.
pub fn s_apply(y: &DenseMatrix, factor: &CovarianceFactor, pattern: &SparsityPattern) -> Vec<f64> {
    let mut out = vec![0.0; pattern.t()];
    s_apply_raw(y.data(), factor, pattern, &mut out);
    out
}

/// [`s_apply`] on a row-major `p × n` buffer.
pub(crate) fn s_apply_raw(
    y: &[f64],
    factor: &CovarianceFactor,
    pattern: &SparsityPattern,
    out: &mut [f64],
) {
    let a = factor.a();
    let n = a.cols();
    let yr = |i: usize| &y[i * n..(i + 1) * n];
    for (k, &(i, j)) in pattern.positions().iter().enumerate() {
        out[k] = if i == j {
            dot(yr(i), a.row(i))
        } else {
            0.5 * (dot(yr(i), a.row(j)) + dot(a.row(i), yr(j)))
        };
    }
}

/// `S*(v) = L*(v) A`.
pub fn s_star(v: &[f64], factor: &CovarianceFactor, pattern: &SparsityPattern) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(pattern.p(), factor.n());
    s_star_raw(v, factor, pattern, out.data_mut());
    out
}

pub(crate) fn s_star_raw(
    v: &[f64],
    factor: &CovarianceFactor,
    pattern: &SparsityPattern,
    out: &mut [f64],
) {
    sym_times_raw(pattern, v, 0.5, factor.a(), out);
}

/// `Ω = L†(x ∘ e3)`.
pub fn x_to_omega(x: &[f64], pattern: &SparsityPattern) -> Result<SparseSymMatrix> {
    l_dagger(&scaled(x, pattern, 0.5), pattern)
}

/// `x = L(Ω) ∘ e4`.
pub fn omega_to_x(omega: &SparseSymMatrix) -> Vec<f64> {
    scaled(omega.values(), omega.pattern(), 2.0)
}

pub fn gamma_objective(
    x: &[f64],
    factor: &CovarianceFactor,
    pattern: &SparsityPattern,
    lambda: f64,
) -> f64 {
    let m = s_star(x, factor, pattern);
    let fm = m.frobenius_norm();
    let mut lin = 0.0;
    let mut l1 = 0.0;
    for (k, &(i, j)) in pattern.positions().iter().enumerate() {
        if i == j {
            lin += x[k];
        } else {
            l1 += (2.0 * x[k]).abs();
        }
    }
    0.5 * fm * fm - lin + 0.5 * lambda * l1
}

/// Writes `m` in coordinate format: a `p t` header, then `i j value` per
/// kept position (1-based, upper triangle). Lines in `comments` are
/// prefixed with `#` and placed first.
pub fn write_coordinate(
    mut w: impl Write,
    m: &SparseSymMatrix,
    comments: &[String],
) -> std::io::Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "{} {}", m.p(), m.pattern().t())?;
    for (&(i, j), v) in m.pattern().positions().iter().zip(m.values()) {
        writeln!(w, "{} {} {:?}", i + 1, j + 1, v)?;
    }
    Ok(())
}

pub fn read_coordinate(r: impl BufRead) -> Result<SparseSymMatrix> {
    let mut header: Option<(usize, usize)> = None;
    let mut entries: Vec<((usize, usize), f64)> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let row = lineno + 1;
        let s = line.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = s.split_whitespace().collect();
        let parse_idx = |col: usize| -> Result<usize> {
            fields[col].parse::<usize>().map_err(|e| Error::Parse {
                row,
                col: col + 1,
                msg: e.to_string(),
            })
        };
        match header {
            None => {
                if fields.len() != 2 {
                    return Err(Error::Parse {
                        row,
                        col: 1,
                        msg: "expected header `p t`".into(),
                    });
                }
                header = Some((parse_idx(0)?, parse_idx(1)?));
            }
            Some((p, _)) => {
                if fields.len() != 3 {
                    return Err(Error::Parse {
                        row,
                        col: fields.len().min(3),
                        msg: "expected `i j value`".into(),
                    });
                }
                let i = parse_idx(0)?;
                let j = parse_idx(1)?;
                if i == 0 || j == 0 || i > p || j > p || i > j {
                    return Err(Error::Parse {
                        row,
                        col: 1,
                        msg: format!("index ({i},{j}) outside the upper triangle of order {p}"),
                    });
                }
                let v: f64 = fields[2].parse().map_err(|e: std::num::ParseFloatError| {
                    Error::Parse {
                        row,
                        col: 3,
                        msg: e.to_string(),
                    }
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        col: 3,
                        msg: "non-finite value".into(),
                    });
                }
                entries.push(((i - 1, j - 1), v));
            }
        }
    }
    let (p, t) = header.ok_or_else(|| Error::Parse {
        row: 0,
        col: 0,
        msg: "empty coordinate file".into(),
    })?;
    if entries.len() != t {
        return Err(Error::DimensionMismatch(format!(
            "header announces {t} entries, found {}",
            entries.len()
        )));
    }
    let pattern = SparsityPattern::new(p, entries.iter().map(|e| e.0).collect())?;
    if pattern.t() != t {
        return Err(Error::DimensionMismatch("duplicate positions in coordinate file".into()));
    }
    let mut omega = vec![0.0; t];
    for ((i, j), v) in entries {
        omega[pattern.index_of(i, j).expect("present")] = v;
    }
    SparseSymMatrix::new(pattern, omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtrace::{objective, SymOperand};
    use crate::testutil::{random_factor, random_pattern, random_vec, rng};
    use rand::Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn pattern_basics() {
        let pat = SparsityPattern::new(3, vec![(2, 2), (0, 2), (0, 0), (1, 1), (0, 2)]).unwrap();
        assert_eq!(pat.positions(), &[(0, 0), (0, 2), (1, 1), (2, 2)]);
        assert_eq!(pat.t(), 4);
        assert_eq!(pat.entry_count(), 5);
        assert_eq!(pat.index_of(2, 0), Some(1));
        assert_eq!(pat.index_of(0, 1), None);
        assert_eq!(pat.row_entries(2), &[(0, 1), (2, 3)]);
        assert!(SparsityPattern::new(3, vec![(0, 0), (1, 1)]).is_err());
        assert!(SparsityPattern::new(2, vec![(1, 0), (0, 0), (1, 1)]).is_err());
        assert_eq!(SparsityPattern::full(4).t(), 10);
    }

    #[test]
    fn extend_injects_old_values() {
        let pat = SparsityPattern::new(3, vec![(0, 0), (1, 1), (2, 2), (1, 2)]).unwrap();
        let (grown, map) = pat.extend(&[(1, 0)]).unwrap();
        assert_eq!(grown.positions(), &[(0, 0), (0, 1), (1, 1), (1, 2), (2, 2)]);
        assert_eq!(map, vec![0, 2, 3, 4]);
        let v = inject(&[1.0, 2.0, 3.0, 4.0], &map, grown.t());
        assert_eq!(v, vec![1.0, 0.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn reduced_vectors() {
        let pat = SparsityPattern::full(3);
        let e = pat.vectors();
        assert_eq!(e.e1, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(e.e2, vec![0.0, 2.0, 2.0, 0.0, 2.0, 0.0]);
        for k in 0..pat.t() {
            assert_eq!(e.e3[k], e.e1[k] + e.e2[k] / 4.0);
            assert_eq!(e.e4[k], e.e1[k] + e.e2[k]);
            assert_eq!(e.e3[k] * e.e4[k], 1.0);
        }
    }

    #[test]
    fn l_examples() {
        let om = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(l_apply(&om, &SparsityPattern::full(2)), vec![1.0, 2.0, 3.0]);
        assert_eq!(l_apply(&om, &SparsityPattern::diagonal(2)), vec![1.0, 3.0]);
        let pat = SparsityPattern::full(3);
        let e = pat.vectors();
        assert_eq!(l_dagger(&e.e1, &pat).unwrap().to_dense(), DenseMatrix::identity(3));
        assert_eq!(x_to_omega(&e.e1, &pat).unwrap().to_dense(), DenseMatrix::identity(3));
        let ind = l_star(&e.e4, &pat).unwrap().to_dense();
        assert!(ind.data().iter().all(|&v| v == 1.0));
        let mut r = rng(3);
        let w = random_vec(&mut r, pat.t());
        assert_eq!(l_apply(&l_dagger(&w, &pat).unwrap().to_dense(), &pat), w);
        let x = random_vec(&mut r, pat.t());
        assert_eq!(omega_to_x(&x_to_omega(&x, &pat).unwrap()), x);
    }

    #[test]
    fn s_examples() {
        let p = 4;
        let f = CovarianceFactor::new(DenseMatrix::identity(p));
        let pat = SparsityPattern::full(p);
        assert_eq!(s_apply(f.a(), &f, &pat), l_apply(&DenseMatrix::identity(p), &pat));
        let f = random_factor(5, 3, 9);
        let pat = SparsityPattern::full(5);
        assert_eq!(s_apply(&DenseMatrix::zeros(5, 3), &f, &pat), vec![0.0; pat.t()]);
        assert_eq!(s_star(&vec![0.0; pat.t()], &f, &pat).max_abs(), 0.0);
        assert_eq!(&s_star(&pat.vectors().e1, &f, &pat), f.a());
    }

    #[test]
    fn adjoint_identities_and_dense_oracle() {
        let mut r = rng(11);
        for trial in 0..100 {
            let p = r.gen_range(2..9);
            let n = r.gen_range(1..6);
            let f = random_factor(p, n, 100 + trial);
            let pat = random_pattern(&mut r, p, 0.5);
            let t = pat.t();
            let sym = crate::testutil::random_symmetric(p, 200 + trial);
            let v = random_vec(&mut r, t);
            let y = DenseMatrix::from_fn(p, n, |_, _| r.gen_range(-1.0..1.0));

            // ⟨L(Ω), v⟩ = ⟨Ω, L*(v)⟩
            let lhs = dot(&l_apply(&sym, &pat), &v);
            let rhs = sym.frobenius_dot(&l_star(&v, &pat).unwrap().to_dense());
            assert!(rel(lhs, rhs) < 1e-12);
            // ⟨L†(ω), V⟩ = ⟨ω, (L†)*(V)⟩
            let lhs = l_dagger(&v, &pat).unwrap().to_dense().frobenius_dot(&sym);
            let rhs = dot(&v, &ldagger_star(&sym, &pat));
            assert!(rel(lhs, rhs) < 1e-12);
            // ⟨S(Y), v⟩ = ⟨Y, S*(v)⟩
            let sy = s_apply(&y, &f, &pat);
            let lhs = dot(&sy, &v);
            let rhs = y.frobenius_dot(&s_star(&v, &f, &pat));
            assert!(rel(lhs, rhs) < 1e-12);
            // dense ½L(YAᵀ + AYᵀ)
            let mut dense = y.matmul_t(f.a()).add(&f.a().matmul_t(&y));
            dense.scale(0.5);
            let want = l_apply(&dense, &pat);
            for k in 0..t {
                assert!((sy[k] - want[k]).abs() < 1e-12);
            }
            // Γ(x) equals the D-trace objective of L†(x ∘ e3)
            let lambda = r.gen_range(0.01..1.0);
            let om = x_to_omega(&v, &pat).unwrap();
            let g = gamma_objective(&v, &f, &pat, lambda);
            let o = objective(&om, &f, lambda).unwrap();
            assert!(rel(g, o) < 1e-12, "{g} vs {o}");
            let _ = om.frobenius_norm();
        }
    }

    #[test]
    fn gamma_examples() {
        let p = 3;
        let f = CovarianceFactor::new(DenseMatrix::identity(p));
        let pat = SparsityPattern::full(p);
        assert_eq!(gamma_objective(&vec![0.0; pat.t()], &f, &pat, 0.4), 0.0);
        assert!((gamma_objective(&pat.vectors().e1, &f, &pat, 0.4) + 1.5).abs() < 1e-15);
    }

    #[test]
    fn coordinate_round_trip() {
        let mut r = rng(5);
        let pat = random_pattern(&mut r, 7, 0.4);
        let vals: Vec<f64> = (0..pat.t()).map(|_| r.gen::<f64>() * 1e-3 - 0.1 / 3.0).collect();
        let m = SparseSymMatrix::new(pat, vals).unwrap();
        let mut buf = Vec::new();
        write_coordinate(&mut buf, &m, &["hello".into()]).unwrap();
        let back = read_coordinate(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.values().iter().zip(m.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn coordinate_errors() {
        assert!(read_coordinate("2 3\n1 1 1.0\n2 2 x\n".as_bytes()).is_err());
        assert!(read_coordinate("2 3\n1 1 1.0\n2 2 1.0\n".as_bytes()).is_err());
        assert!(read_coordinate("2 2\n1 1 1.0\n".as_bytes()).is_err());
        let ok = read_coordinate("# c\n2 3\n1 1 1.0\n1 2 0.5\n2 2 2\n".as_bytes()).unwrap();
        assert_eq!(ok.get(1, 0), 0.5);
    }
}
