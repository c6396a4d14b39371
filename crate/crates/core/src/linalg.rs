//! Small dense complex matrices and the few decompositions the rest of the
//! crate needs.
//!
//! Fibre dimensions here are tiny (1 to 4 in every gallery symbol), so the
//! matrix type is a plain row-major buffer. Anything bigger than 2x2 is handed
//! to nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

pub type C64 = Complex64;

/// Dense complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![C64::new(0.0, 0.0); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row-major entries. Panics if the length is wrong.
    pub fn from_row_slice(rows: usize, cols: usize, entries: &[C64]) -> Self {
        assert_eq!(entries.len(), rows * cols, "entry count does not match shape");
        Self { rows, cols, data: entries.to_vec() }
    }

    pub fn from_real(rows: usize, cols: usize, entries: &[f64]) -> Self {
        assert_eq!(entries.len(), rows * cols, "entry count does not match shape");
        Self { rows, cols, data: entries.iter().map(|&v| C64::new(v, 0.0)).collect() }
    }

    /// Column vector.
    pub fn column(entries: &[C64]) -> Self {
        Self::from_row_slice(entries.len(), 1, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn scale(&self, s: C64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&z| z * s).collect() }
    }

    pub fn scale_real(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&z| z * s).collect() }
    }

    /// `self += w * other`.
    pub fn axpy(&mut self, w: f64, other: &CMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b * w;
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
    }

    pub fn hermitian_part(&self) -> Self {
        let adj = self.adjoint();
        Self::from_fn(self.rows, self.cols, |i, j| (self[(i, j)] + adj[(i, j)]) * 0.5)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &CMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn mul_vec(&self, v: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.rows];
        self.mul_vec_into(v, &mut out);
        out
    }

    pub fn mul_vec_into(&self, v: &[C64], out: &mut [C64]) {
        debug_assert_eq!(v.len(), self.cols);
        for (i, o) in out.iter_mut().enumerate().take(self.rows) {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    /// Embeds `block` at `(row, col)`.
    pub fn set_block(&mut self, row: usize, col: usize, block: &CMatrix) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(row + i, col + j)] = block[(i, j)];
            }
        }
    }

    /// Largest singular value.
    pub fn op_norm(&self) -> f64 {
        op_norm(self)
    }

    fn to_nalgebra(&self) -> DMatrix<C64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Add for &CMatrix {
    type Output = CMatrix;
    fn add(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.shape(), rhs.shape());
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect() }
    }
}

impl Sub for &CMatrix {
    type Output = CMatrix;
    fn sub(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.shape(), rhs.shape());
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect() }
    }
}

impl Neg for &CMatrix {
    type Output = CMatrix;
    fn neg(self) -> CMatrix {
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| -z).collect() }
    }
}

impl Mul for &CMatrix {
    type Output = CMatrix;
    fn mul(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        CMatrix::from_fn(self.rows, rhs.cols, |i, j| (0..self.cols).map(|k| self[(i, k)] * rhs[(k, j)]).sum())
    }
}

/// Largest singular value of `m`.
///
/// Works on the smaller Gram matrix. The 1x1 and 2x2 Gram cases use closed
/// forms; a diagonal 2x2 Gram returns `sqrt(max diag)` with no arithmetic on
/// the off-diagonal, so `op_norm(diag(a, b)) == max(|a|, |b|)` bit for bit.
pub fn op_norm(m: &CMatrix) -> f64 {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return 0.0;
    }
    let peak = m.max_abs();
    if peak == 0.0 || !peak.is_finite() {
        return peak;
    }
    // Power-of-two rescaling is exact and keeps the Gram entries in range.
    let e = peak.log2().floor() as i32;
    if !(-500..=500).contains(&e) {
        let down = (-e as f64).exp2();
        return op_norm(&m.scale_real(down)) * (e as f64).exp2();
    }
    let k = r.min(c);
    if k == 1 {
        return m.frobenius_norm();
    }
    if k == 2 {
        let (a, b, d) = if c <= r { gram_cols_2(m) } else { gram_rows_2(m) };
        let lambda = if b.re == 0.0 && b.im == 0.0 { a.max(d) } else { 0.5 * (a + d) + (0.5 * (a - d)).hypot(b.norm()) };
        return lambda.max(0.0).sqrt();
    }
    m.to_nalgebra().singular_values().max()
}

// Entries (G00, G01, G11) of M^H M for a matrix with two columns.
fn gram_cols_2(m: &CMatrix) -> (f64, C64, f64) {
    let mut a = 0.0;
    let mut d = 0.0;
    let mut b = C64::new(0.0, 0.0);
    for i in 0..m.rows() {
        let x = m[(i, 0)];
        let y = m[(i, 1)];
        a += x.norm_sqr();
        d += y.norm_sqr();
        b += x.conj() * y;
    }
    (a, b, d)
}

// Entries of M M^H for a matrix with two rows.
fn gram_rows_2(m: &CMatrix) -> (f64, C64, f64) {
    let mut a = 0.0;
    let mut d = 0.0;
    let mut b = C64::new(0.0, 0.0);
    for j in 0..m.cols() {
        let x = m[(0, j)];
        let y = m[(1, j)];
        a += x.norm_sqr();
        d += y.norm_sqr();
        b += x * y.conj();
    }
    (a, b, d)
}

/// Thin wrapper over a real SVD returning a full left basis.
///
/// `u` is `rows x rows` (the input is padded with zero columns when it is
/// wide-short), singular values are sorted descending and padded with zeros
/// up to `rows`.
pub struct RealSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn real_svd_full_left(a: &DMatrix<f64>) -> RealSvd {
    let (rows, cols) = a.shape();
    let padded = if cols < rows {
        let mut p = DMatrix::zeros(rows, rows);
        p.view_mut((0, 0), (rows, cols)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let mut u_sorted = DMatrix::zeros(rows, rows);
    let mut values = Vec::with_capacity(rows);
    for (dst, &src) in order.iter().enumerate().take(rows) {
        u_sorted.set_column(dst, &u.column(src));
        values.push(sv[src]);
    }
    let mut vt_sorted = DMatrix::zeros(order.len().min(rows), v_t.ncols());
    for (dst, &src) in order.iter().enumerate().take(rows) {
        vt_sorted.set_row(dst, &v_t.row(src));
    }
    RealSvd { u: u_sorted, singular_values: values, v_t: vt_sorted }
}

/// Minimum-norm least-squares solution of `a x = b` with a relative rank
/// cutoff. Returns the solution and the residual norm.
pub fn least_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_cutoff: f64) -> (DVector<f64>, f64) {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = if smax > 0.0 { rel_cutoff * smax } else { 0.0 };
    let x = match svd.solve(b, eps) {
        Ok(x) => x,
        Err(_) => DVector::zeros(a.ncols()),
    };
    let x = if smax == 0.0 { DVector::zeros(a.ncols()) } else { x };
    let residual = (a * &x - b).norm();
    (x, residual)
}

/// Spectral norm of a real matrix.
pub fn real_spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone().singular_values().max()
}
