//! Row-major dense linear algebra.
//!
//! This is the reference layer for the whole crate: the exact Newton backend,
//! the centralized baseline and most test oracles are built on it. Every
//! reduction runs in ascending index order so results are bit-reproducible.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Largest absolute asymmetry (relative to entry magnitude, floored at 1)
/// that is silently symmetrized away.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is singular (pivot {pivot:e} at column {index})")]
    Singular { index: usize, pivot: f64 },
    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("matrix is not symmetric: |M[{i}][{j}] - M[{j}][{i}]| = {gap:e}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

fn shape_err(expected: impl Into<String>, found: impl Into<String>) -> LinalgError {
    LinalgError::ShapeMismatch {
        expected: expected.into(),
        found: found.into(),
    }
}

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting non-finite values.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(shape_err(
                format!("{} entries for {rows}x{cols}", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(shape_err(
                    format!("{cols} columns"),
                    format!("{} columns in row {r}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Self::from_row_major(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Returns `self + shift * I`.
    pub fn shifted_diagonal(&self, shift: f64) -> Self {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m[(i, i)] += shift;
        }
        m
    }

    pub fn sub(&self, other: &Self) -> Result<Self, LinalgError> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    fn check_same_shape(&self, other: &Self) -> Result<(), LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape_err(
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.cols != other.rows {
            return Err(shape_err(
                format!("{} rows on the right operand", self.cols),
                format!("{}", other.rows),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let lhs = self.row(r);
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if x.len() != self.cols {
            return Err(shape_err(
                format!("vector of length {}", self.cols),
                format!("{}", x.len()),
            ));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `Aᵀ diag(w) A` for a tall matrix `A` (rows weighted by `w`).
    pub fn weighted_gram(&self, w: &[f64]) -> Result<Self, LinalgError> {
        if w.len() != self.rows {
            return Err(shape_err(
                format!("{} weights", self.rows),
                format!("{}", w.len()),
            ));
        }
        let n = self.cols;
        let mut g = Self::zeros(n, n);
        for (r, &wr) in w.iter().enumerate() {
            if wr == 0.0 {
                continue;
            }
            let a = self.row(r);
            for i in 0..n {
                let s = wr * a[i];
                if s == 0.0 {
                    continue;
                }
                let dst = &mut g.data[i * n..(i + 1) * n];
                for j in i..n {
                    dst[j] += s * a[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i];
            }
        }
        Ok(g)
    }

    /// `A_Sᵀ A_S` where `A_S` keeps the listed rows.
    pub fn row_subset_gram(&self, rows: &[usize]) -> Self {
        let mut w = vec![0.0; self.rows];
        for &r in rows {
            w[r] += 1.0;
        }
        self.weighted_gram(&w).expect("weights sized to row count")
    }

    /// `A M Aᵀ` for square `M` of size `cols`.
    pub fn congruence(&self, m: &Self) -> Result<Self, LinalgError> {
        if !m.is_square() || m.rows != self.cols {
            return Err(shape_err(
                format!("{0}x{0} middle factor", self.cols),
                format!("{}x{}", m.rows, m.cols),
            ));
        }
        let am = self.matmul(m)?;
        let mut out = Self::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in i..self.rows {
                let v = dot(am.row(i), self.row(j));
                out.data[i * self.rows + j] = v;
                out.data[j * self.rows + i] = v;
            }
        }
        Ok(out)
    }

    /// Returns a symmetrized copy `(M + Mᵀ)/2`, or an error when the
    /// asymmetry exceeds [`SYMMETRY_TOL`].
    pub fn symmetrized(&self) -> Result<Self, LinalgError> {
        if !self.is_square() {
            return Err(shape_err(
                "square matrix",
                format!("{}x{}", self.rows, self.cols),
            ));
        }
        let n = self.rows;
        let mut out = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let a = self.data[i * n + j];
                let b = self.data[j * n + i];
                let gap = (a - b).abs();
                if gap > SYMMETRY_TOL * 1f64.max(a.abs()).max(b.abs()) {
                    return Err(LinalgError::NotSymmetric { i, j, gap });
                }
                let avg = 0.5 * (a + b);
                out.data[i * n + j] = avg;
                out.data[j * n + i] = avg;
            }
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Dot product accumulated in ascending index order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Lower-triangular Cholesky factor `L` with `M = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    dim: usize,
    lower: Vec<f64>,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> DenseMatrix {
        DenseMatrix {
            rows: self.dim,
            cols: self.dim,
            data: self.lower.clone(),
        }
    }

    pub fn logdet(&self) -> f64 {
        let n = self.dim;
        2.0 * (0..n).map(|i| self.lower[i * n + i].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let n = self.dim;
        if b.len() != n {
            return Err(shape_err(format!("rhs of length {n}"), format!("{}", b.len())));
        }
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        Ok(y)
    }

    pub fn inverse(&self) -> DenseMatrix {
        let n = self.dim;
        let mut inv = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            let col = self.solve(&e).expect("dimension matches");
            for r in 0..n {
                inv.data[r * n + c] = col[r];
            }
        }
        // exact symmetry for downstream consumers
        inv.symmetrized().unwrap_or(inv)
    }
}

/// Cholesky factorization of a symmetric positive definite matrix.
pub fn cholesky(m: &DenseMatrix) -> Result<SpdFactor, LinalgError> {
    let m = m.symmetrized()?;
    let n = m.rows;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mjj = m.data[j * n + j];
        let mut d = mjj;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        // pivots lost to cancellation count as singular
        if !(d > 4.0 * n as f64 * f64::EPSILON * mjj.abs()) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot: d });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = m.data[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(SpdFactor { dim: n, lower: l })
}

/// Factorizes `m` and returns the factor with `log det m`.
pub fn cholesky_logdet(m: &DenseMatrix) -> Result<(SpdFactor, f64), LinalgError> {
    let f = cholesky(m)?;
    let ld = f.logdet();
    Ok((f, ld))
}

/// Solves `M x = b` for symmetric positive definite `M`.
pub fn solve_direct(m: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if b.len() != m.rows() {
        return Err(shape_err(
            format!("rhs of length {}", m.rows()),
            format!("{}", b.len()),
        ));
    }
    cholesky(m)?.solve(b)
}

/// Inverse of a symmetric positive definite matrix.
pub fn invert(m: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    Ok(cholesky(m)?.inverse())
}

pub fn hadamard(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    a.check_same_shape(b)?;
    Ok(DenseMatrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

/// Solves a general square system by LU with partial pivoting.
///
/// Used where the matrix is symmetric but possibly indefinite (Newton
/// systems in tests, saddle matrices).
pub fn solve_lu(m: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if !m.is_square() {
        return Err(shape_err("square matrix", format!("{}x{}", m.rows, m.cols)));
    }
    let n = m.rows;
    if b.len() != n {
        return Err(shape_err(format!("rhs of length {n}"), format!("{}", b.len())));
    }
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    let mut a = m.data.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let (piv, pmax) = (col..n)
            .map(|r| (r, a[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pmax <= 1e-14 * scale {
            return Err(LinalgError::Singular {
                index: col,
                pivot: pmax,
            });
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            x.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in (col + 1)..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            x[r] -= f * x[col];
        }
    }
    for r in (0..n).rev() {
        let mut s = x[r];
        for c in (r + 1)..n {
            s -= a[r * n + c] * x[c];
        }
        x[r] = s / a[r * n + r];
    }
    Ok(x)
}
