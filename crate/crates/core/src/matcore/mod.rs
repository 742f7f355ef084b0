//! Dense row-major real matrices.
//!
//! Every numeric value in the crate lives in a [`Matrix`]. Products go
//! through a blocked GEMM with a fixed reduction order, so results are
//! reproducible bit for bit on a given machine.

mod alloc;
mod eigh;

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};

use alloc::AllocToken;
pub use alloc::{with_alloc_tracking, AllocStats};
pub use eigh::{jacobi_eigh, Eigh};

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Seed for the start vector of the spectral-norm power iteration.
const POWER_ITER_SEED: u64 = 0x5eed_2021;
const POWER_ITER_MAX: usize = 1000;
const POWER_ITER_TOL: Real = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Maximum absolute column sum.
    One,
    /// Maximum absolute row sum.
    Infinity,
    #[default]
    Frobenius,
    /// Largest singular value.
    Spectral,
}

pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
    _acct: AllocToken,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self::wrap(rows, cols, data))
    }

    fn wrap(rows: usize, cols: usize, data: Vec<Real>) -> Self {
        let bytes = data.len() * std::mem::size_of::<Real>();
        Matrix {
            rows,
            cols,
            data,
            _acct: AllocToken::charge(bytes),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::wrap(rows, cols, vec![0.0; rows * cols])
    }

    /// Output of a product whose kernel writes every entry of the
    /// `rows×cols` buffer behind the pointer it is handed.
    fn product(rows: usize, cols: usize, fill: impl FnOnce(*mut Real)) -> Self {
        let len = rows * cols;
        let mut data: Vec<Real> = Vec::with_capacity(len);
        fill(data.as_mut_ptr());
        // SAFETY: `gemm` stores all `len` entries (β = 0 never reads them).
        unsafe { data.set_len(len) };
        Self::wrap(rows, cols, data)
    }

    pub fn filled(rows: usize, cols: usize, value: Real) -> Self {
        Self::wrap(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[Real]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Real) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::wrap(rows, cols, data)
    }

    pub fn from_rows<R: AsRef<[Real]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self::wrap(rows.len(), cols, data))
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn random_normal<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        std: Real,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(rows, cols, |_, _| {
            let z: Real = StandardNormal.sample(rng);
            std * z
        })
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn to_vec(&self) -> Vec<Real> {
        self.data.clone()
    }

    pub fn row(&self, i: usize) -> &[Real] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Real] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> Real {
        self.data[i * self.cols + j]
    }

    pub fn diag(&self) -> Vec<Real> {
        (0..self.rows.min(self.cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let (r, c) = self.shape();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::wrap(c, r, out)
    }

    /// `self · b`.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(shape_err!(
                "matmul {}x{} by {}x{}",
                self.rows,
                self.cols,
                b.rows,
                b.cols
            ));
        }
        Ok(Matrix::product(self.rows, b.cols, |c| {
            gemm(
                self.rows,
                self.cols,
                b.cols,
                (&self.data, self.cols, 1),
                (&b.data, b.cols, 1),
                c,
            )
        }))
    }

    /// `self ← β·self + α·a·b` in place.
    pub fn gemm_update(&mut self, alpha: Real, a: &Matrix, b: &Matrix, beta: Real) -> Result<()> {
        if a.cols != b.rows || self.shape() != (a.rows, b.cols) {
            return Err(shape_err!(
                "update {}x{} with {}x{} by {}x{}",
                self.rows,
                self.cols,
                a.rows,
                a.cols,
                b.rows,
                b.cols
            ));
        }
        if a.cols == 0 {
            self.map_inplace(|x| beta * x);
            return Ok(());
        }
        gemm_scaled(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            (&a.data, a.cols, 1),
            (&b.data, b.cols, 1),
            beta,
            self.data.as_mut_ptr(),
        );
        Ok(())
    }

    /// `selfᵀ · b` without materialising the transpose.
    pub fn matmul_tn(&self, b: &Matrix) -> Result<Matrix> {
        if self.rows != b.rows {
            return Err(shape_err!(
                "matmul_tn ({}x{})ᵀ by {}x{}",
                self.rows,
                self.cols,
                b.rows,
                b.cols
            ));
        }
        Ok(Matrix::product(self.cols, b.cols, |c| {
            gemm(
                self.cols,
                self.rows,
                b.cols,
                (&self.data, 1, self.cols),
                (&b.data, b.cols, 1),
                c,
            )
        }))
    }

    /// `self · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(shape_err!(
                "matmul_nt {}x{} by ({}x{})ᵀ",
                self.rows,
                self.cols,
                b.rows,
                b.cols
            ));
        }
        Ok(Matrix::product(self.rows, b.rows, |c| {
            gemm(
                self.rows,
                self.cols,
                b.rows,
                (&self.data, self.cols, 1),
                (&b.data, 1, b.cols),
                c,
            )
        }))
    }

    fn check_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!(
                "{what}: {}x{} vs {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(Real, Real) -> Real) -> Result<Matrix> {
        self.check_same_shape(other, "elementwise")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::wrap(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "sub_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        Ok(())
    }

    pub fn scale(&self, s: Real) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Matrix {
        Self::wrap(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn map_inplace(&mut self, f: impl Fn(Real) -> Real) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> Real {
        // Independent partial sums so the loop vectorises.
        let mut acc = [0.0 as Real; 8];
        let chunks = self.data.chunks_exact(8);
        let tail: Real = chunks.remainder().iter().map(|x| x * x).sum();
        for c in chunks {
            for (a, x) in acc.iter_mut().zip(c) {
                *a += x * x;
            }
        }
        (acc.iter().sum::<Real>() + tail).sqrt()
    }

    pub fn norm(&self, kind: NormKind) -> Result<Real> {
        norm(self, kind)
    }

    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<Real> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `‖self − reference‖_F / ‖reference‖_F`, or the absolute error when the
    /// reference is zero.
    pub fn rel_fro_err(&self, reference: &Matrix) -> Result<Real> {
        self.check_same_shape(reference, "rel_fro_err")?;
        let num = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<Real>()
            .sqrt();
        let den = reference.frobenius_norm();
        Ok(if den > 0.0 { num / den } else { num })
    }

    /// Largest `|a_ij − a_ji|`. Non-square matrices are infinitely asymmetric.
    pub fn asymmetry(&self) -> Real {
        if !self.is_square() {
            return Real::INFINITY;
        }
        let n = self.rows;
        let mut worst: Real = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn col_block(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols {
            return Err(shape_err!(
                "columns {start}..{} out of {}",
                start + len,
                self.cols
            ));
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(Self::wrap(self.rows, len, data))
    }

    pub fn set_col_block(&mut self, start: usize, block: &Matrix) -> Result<()> {
        if block.rows != self.rows || start + block.cols > self.cols {
            return Err(shape_err!(
                "cannot place {}x{} at column {start} of {}x{}",
                block.rows,
                block.cols,
                self.rows,
                self.cols
            ));
        }
        for i in 0..self.rows {
            self.row_mut(i)[start..start + block.cols].copy_from_slice(block.row(i));
        }
        Ok(())
    }

    pub fn row_block(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.rows {
            return Err(shape_err!(
                "rows {start}..{} out of {}",
                start + len,
                self.rows
            ));
        }
        let c = self.cols;
        Ok(Self::wrap(
            len,
            c,
            self.data[start * c..(start + len) * c].to_vec(),
        ))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(shape_err!("row index {i} out of {}", self.rows));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self::wrap(idx.len(), self.cols, data))
    }

    /// Concatenate side by side.
    pub fn hcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(shape_err!("hcat of blocks with differing row counts"));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Self::wrap(rows, cols, data))
    }

    /// Concatenate top to bottom.
    pub fn vcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        if blocks.iter().any(|b| b.cols != cols) {
            return Err(shape_err!("vcat of blocks with differing column counts"));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Ok(Self::wrap(rows, cols, data))
    }
}

impl Clone for Matrix {
    fn clone(&self) -> Self {
        Self::wrap(self.rows, self.cols, self.data.clone())
    }
}

impl PartialEq for Matrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.data == other.data
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = Real;
    fn index(&self, (i, j): (usize, usize)) -> &Real {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Real {
        &mut self.data[i * self.cols + j]
    }
}

type StridedRef<'a> = (&'a [Real], usize, usize);

/// `c ← a · b` for an `m×k` by `k×n` product with explicit row/column strides.
/// `c` points at `m·n` writable, possibly uninitialised, entries.
fn gemm(m: usize, k: usize, n: usize, a: StridedRef<'_>, b: StridedRef<'_>, c: *mut Real) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // SAFETY: `c` has room for `m·n` entries.
        unsafe { std::ptr::write_bytes(c, 0, m * n) };
        return;
    }
    gemm_scaled(m, k, n, 1.0, a, b, 0.0, c);
}

/// `c ← α·a·b + β·c`; with `β = 0` the old contents of `c` are never read.
#[allow(clippy::too_many_arguments)]
fn gemm_scaled(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: StridedRef<'_>,
    b: StridedRef<'_>,
    beta: Real,
    c: *mut Real,
) {
    let (a, rsa, csa) = a;
    let (b, rsb, csb) = b;
    // SAFETY: strides describe in-bounds views of `a` (m×k), `b` (k×n) and
    // the contiguous row-major output `c` (m×n); the output does not alias.
    unsafe {
        #[cfg(not(feature = "f32"))]
        let gemm_fn = matrixmultiply::dgemm;
        #[cfg(feature = "f32")]
        let gemm_fn = matrixmultiply::sgemm;
        gemm_fn(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c,
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn norm(a: &Matrix, kind: NormKind) -> Result<Real> {
    if a.is_empty() {
        return Err(shape_err!("norm of an empty {}x{} matrix", a.rows, a.cols));
    }
    Ok(match kind {
        NormKind::One => (0..a.cols)
            .map(|j| (0..a.rows).map(|i| a.get(i, j).abs()).sum::<Real>())
            .fold(0.0, Real::max),
        NormKind::Infinity => (0..a.rows)
            .map(|i| a.row(i).iter().map(|x| x.abs()).sum::<Real>())
            .fold(0.0, Real::max),
        NormKind::Frobenius => a.frobenius_norm(),
        NormKind::Spectral => spectral_norm(a),
    })
}

/// Largest singular value by power iteration on `aᵀa`.
///
/// Stops once the eigen-residual `‖aᵀa·v − μv‖` falls below `1e-8·μ`, or
/// after 1000 steps.
fn spectral_norm(a: &Matrix) -> Real {
    let (r, c) = a.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITER_SEED);
    let mut v: Vec<Real> = (0..c)
        .map(|_| {
            let z: Real = StandardNormal.sample(&mut rng);
            z
        })
        .collect();
    let nv = l2(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut w = vec![0.0; r];
    let mut u = vec![0.0; c];
    let mut mu: Real = 0.0;
    for _ in 0..POWER_ITER_MAX {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = dot(a.row(i), &v);
        }
        u.iter_mut().for_each(|x| *x = 0.0);
        for (i, &wi) in w.iter().enumerate() {
            for (uj, &aij) in u.iter_mut().zip(a.row(i)) {
                *uj += aij * wi;
            }
        }
        mu = dot(&w, &w);
        if mu == 0.0 {
            return 0.0;
        }
        let resid = u
            .iter()
            .zip(&v)
            .map(|(ui, vi)| (ui - mu * vi) * (ui - mu * vi))
            .sum::<Real>()
            .sqrt();
        let nu = l2(&u);
        for (vi, ui) in v.iter_mut().zip(&u) {
            *vi = ui / nu;
        }
        if resid <= POWER_ITER_TOL * mu {
            break;
        }
    }
    mu.sqrt()
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[Real]) -> Real {
    dot(a, a).sqrt()
}

/// Error for inputs that must be square and symmetric within `tol`.
pub(crate) fn require_symmetric(a: &Matrix, tol: Real, what: &str) -> Result<()> {
    if !a.is_square() {
        return Err(domain_err!(
            "{what} needs a square matrix, got {}x{}",
            a.rows,
            a.cols
        ));
    }
    let scale = a.max_abs().max(1.0);
    let asym = a.asymmetry();
    if asym > tol * scale {
        return Err(domain_err!(
            "{what} needs a symmetric matrix (asymmetry {asym:e})"
        ));
    }
    Ok(())
}
