//! Dense column-major vectors and matrices, a cyclic Jacobi symmetric
//! eigensolver, and the Kronecker/vec plumbing used by the curvature blocks.
//!
//! Buffers report allocation and release to [`crate::telemetry`], and the
//! arithmetic kernels report their flop counts.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::telemetry::{add_flops, record_alloc, record_free};
use crate::{Error, Result};

/// Largest number of entries `kron` will materialize.
pub const KRON_MAX_ENTRIES: usize = 1 << 20;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-12;

/// A dense real vector of positive length.
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    fn wrap(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vectors have positive length");
        record_alloc(data.len(), 1);
        Vector { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self::wrap(vec![0.0; len])
    }

    /// Builds a vector, rejecting empty or non-finite input.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("vector"));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self::wrap(data))
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> f64) -> Self {
        Self::wrap((0..len).map(&mut f).collect())
    }

    pub(crate) fn from_slice(data: &[f64]) -> Self {
        Self::wrap(data.to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Always false; kept for the `len`/`is_empty` convention.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        record_free(self.data.len());
        std::mem::take(&mut self.data)
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        add_flops(self.len());
        dot(&self.data, &other.data)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Vector) {
        debug_assert_eq!(self.len(), x.len());
        add_flops(self.len());
        for (y, &xi) in self.data.iter_mut().zip(&x.data) {
            *y += alpha * xi;
        }
    }

    /// `self = x + beta * self`
    pub fn xpby(&mut self, x: &Vector, beta: f64) {
        debug_assert_eq!(self.len(), x.len());
        add_flops(self.len());
        for (y, &xi) in self.data.iter_mut().zip(&x.data) {
            *y = xi + beta * *y;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        add_flops(self.len());
        Vector::from_fn(self.len(), |i| alpha * self.data[i])
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        add_flops(self.len());
        Vector::from_fn(self.len(), |i| self.data[i] - other.data[i])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Clone for Vector {
    fn clone(&self) -> Self {
        Self::wrap(self.data.clone())
    }
}

impl Drop for Vector {
    fn drop(&mut self) {
        if !self.data.is_empty() {
            record_free(self.data.len());
        }
    }
}

impl PartialEq for Vector {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Vector").field(&self.data).finish()
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// A dense real matrix stored column-major.
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn wrap(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions are positive");
        debug_assert_eq!(data.len(), rows * cols);
        record_alloc(rows, cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::wrap(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("matrix"));
        }
        if data.len() != rows * cols {
            return Err(Error::dims("from_col_major", rows * cols, data.len()));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self::wrap(rows, cols, data))
    }

    /// Builds a matrix from row slices, e.g. `Matrix::from_rows(&[&[1., 2.], &[3., 4.]])`.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if r == 0 || c == 0 {
            return Err(Error::Empty("matrix"));
        }
        if let Some(bad) = rows.iter().find(|row| row.len() != c) {
            return Err(Error::dims("from_rows", c, bad.len()));
        }
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            data.extend(rows.iter().map(|row| row[j]));
        }
        Self::from_col_major(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self::wrap(rows, cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dims(
                "matmul",
                format!("{} rows", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        add_flops(m * n * k);
        let mut out = Matrix::zeros(m, n);
        for j in 0..n {
            let out_col = &mut out.data[j * m..(j + 1) * m];
            for (p, &b) in other.col(j).iter().enumerate() {
                if b != 0.0 {
                    for (o, &a) in out_col.iter_mut().zip(&self.data[p * m..(p + 1) * m]) {
                        *o += a * b;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `self * otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dims(
                "matmul_t",
                format!("{} cols", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        add_flops(m * n * k);
        let mut out = Matrix::zeros(m, n);
        for p in 0..k {
            let a_col = self.col(p);
            let b_col = other.col(p);
            for (j, &b) in b_col.iter().enumerate() {
                if b != 0.0 {
                    for (o, &a) in out.data[j * m..(j + 1) * m].iter_mut().zip(a_col) {
                        *o += a * b;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ * other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dims(
                "t_matmul",
                format!("{} rows", self.rows),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let (m, k, n) = (self.cols, self.rows, other.cols);
        add_flops(m * n * k);
        Ok(Matrix::from_fn(m, n, |i, j| dot(self.col(i), other.col(j))))
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        add_flops(self.len());
        Matrix::wrap(self.rows, self.cols, self.data.iter().map(|x| alpha * x).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dims(op, format!("{:?}", self.shape()), format!("{:?}", other.shape())));
        }
        add_flops(self.len());
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix::wrap(self.rows, self.cols, data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

impl Clone for Matrix {
    fn clone(&self) -> Self {
        Self::wrap(self.rows, self.cols, self.data.clone())
    }
}

impl Drop for Matrix {
    fn drop(&mut self) {
        record_free(self.data.len());
    }
}

impl PartialEq for Matrix {
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.data == other.data
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            let row: Vec<f64> = (0..self.cols).map(|j| self[(i, j)]).collect();
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i + j * self.rows]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i + j * self.rows]
    }
}

pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols() != v.len() {
        return Err(Error::dims("matvec", m.cols(), v.len()));
    }
    add_flops(m.rows() * m.cols());
    let mut out = Vector::zeros(m.rows());
    for (j, &x) in v.as_slice().iter().enumerate() {
        for (o, &a) in out.as_mut_slice().iter_mut().zip(m.col(j)) {
            *o += a * x;
        }
    }
    Ok(out)
}

/// Kronecker product `a ⊗ g`: block `(i, j)` of the result is `a[i,j] * g`.
/// Oracle-scale only.
pub fn kron(a: &Matrix, g: &Matrix) -> Result<Matrix> {
    let (rows, cols) = (a.rows() * g.rows(), a.cols() * g.cols());
    let entries = rows.saturating_mul(cols);
    if entries > KRON_MAX_ENTRIES {
        return Err(Error::SizeGate {
            op: "kron",
            requested: entries,
            limit: KRON_MAX_ENTRIES,
        });
    }
    let (gr, gc) = g.shape();
    Ok(Matrix::from_fn(rows, cols, |r, c| {
        a[(r / gr, c / gc)] * g[(r % gr, c % gc)]
    }))
}

/// Reshapes a vector into a `rows x cols` matrix by column stacking:
/// column `j` holds `v[j*rows .. (j+1)*rows]`.
pub fn vec_to_mat(v: &Vector, rows: usize, cols: usize) -> Result<Matrix> {
    if rows.checked_mul(cols) != Some(v.len()) {
        return Err(Error::dims("vec_to_mat", format!("{rows}x{cols}"), v.len()));
    }
    Ok(Matrix::wrap(rows, cols, v.as_slice().to_vec()))
}

/// Stacks the columns of `m` into a vector.
pub fn mat_to_vec(m: &Matrix) -> Vector {
    Vector::from_slice(m.as_slice())
}

/// Symmetric eigendecomposition `m = q diag(lambda) qᵀ`, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub q: Matrix,
    pub lambda: Vector,
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> Matrix {
        let n = self.q.rows();
        Matrix::from_fn(n, n, |i, j| {
            (0..n).map(|k| self.q[(i, k)] * self.lambda[k] * self.q[(j, k)]).sum()
        })
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Sweeps over every `(p, q)` pair with a plane rotation that annihilates
/// `m[p,q]`, until the off-diagonal Frobenius norm drops to
/// `1e-12 * ||m||_F`. Gives up after 100 sweeps.
pub fn sym_eigen(m: &Matrix) -> Result<EigenDecomposition> {
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    let n = rows;
    let scale = m.max_abs().max(1.0);
    for j in 0..n {
        for i in (j + 1)..n {
            let gap = (m[(i, j)] - m[(j, i)]).abs();
            if gap > SYMMETRY_TOL * scale {
                return Err(Error::NotSymmetric { i, j, gap });
            }
        }
    }

    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let mut q = Matrix::identity(n);
    let threshold = JACOBI_TOL * a.frobenius_norm();

    let off_norm = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for j in 0..n {
            for i in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    let mut off = off_norm(&a);
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off <= threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = a[(p, r)];
                if apr == 0.0 {
                    continue;
                }
                let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apr);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut q, p, r, c, s);
            }
        }
        off = off_norm(&a);
    }
    if !converged && off > threshold {
        return Err(Error::EigenNoConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
            off,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let lambda = Vector::from_fn(n, |k| a[(order[k], order[k])]);
    let q = Matrix::from_fn(n, n, |i, k| q[(i, order[k])]);
    Ok(EigenDecomposition { q, lambda })
}

/// Applies `a <- Jᵀ a J` and `q <- q J` for the rotation in the `(p, r)` plane.
fn rotate(a: &mut Matrix, q: &mut Matrix, p: usize, r: usize, c: f64, s: f64) {
    let n = a.rows();
    add_flops(12 * n);
    for k in 0..n {
        let (akp, akr) = (a[(k, p)], a[(k, r)]);
        a[(k, p)] = c * akp - s * akr;
        a[(k, r)] = s * akp + c * akr;
    }
    for k in 0..n {
        let (apk, ark) = (a[(p, k)], a[(r, k)]);
        a[(p, k)] = c * apk - s * ark;
        a[(r, k)] = s * apk + c * ark;
    }
    for k in 0..n {
        let (qkp, qkr) = (q[(k, p)], q[(k, r)]);
        q[(k, p)] = c * qkp - s * qkr;
        q[(k, r)] = s * qkp + c * qkr;
    }
}

/// Dense solve by Gaussian elimination with partial pivoting. Oracle use.
pub fn solve_dense(m: &Matrix, b: &Vector) -> Result<Vector> {
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if b.len() != rows {
        return Err(Error::dims("solve_dense", rows, b.len()));
    }
    let n = rows;
    let mut a = m.clone();
    let mut x = b.clone();
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| a[(i, k)].abs().total_cmp(&a[(j, k)].abs()))
            .unwrap_or(k);
        if a[(piv, k)] == 0.0 {
            return Err(Error::Singular(format!("zero pivot in column {k}")));
        }
        if piv != k {
            for j in 0..n {
                let tmp = a[(k, j)];
                a[(k, j)] = a[(piv, j)];
                a[(piv, j)] = tmp;
            }
            x.as_mut_slice().swap(k, piv);
        }
        for i in (k + 1)..n {
            let f = a[(i, k)] / a[(k, k)];
            if f != 0.0 {
                for j in k..n {
                    a[(i, j)] -= f * a[(k, j)];
                }
                x[i] -= f * x[k];
            }
        }
    }
    for k in (0..n).rev() {
        let s: f64 = ((k + 1)..n).map(|j| a[(k, j)] * x[j]).sum();
        x[k] = (x[k] - s) / a[(k, k)];
    }
    Ok(x)
}
