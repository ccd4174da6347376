//! Dense double-precision kernels shared by the solvers and oracles.

use std::ops::{Index, IndexMut, Range};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix with finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("Matrix::new", rows * cols, data.len()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data).expect("finite entries")
    }

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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Copies the block `rows × cols`.
    pub fn submatrix(&self, rows: Range<usize>, cols: Range<usize>) -> Matrix {
        assert!(rows.end <= self.rows && cols.end <= self.cols);
        let mut out = Matrix::zeros(rows.len(), cols.len());
        for (oi, i) in rows.enumerate() {
            out.row_mut(oi)
                .copy_from_slice(&self.row(i)[cols.start..cols.end]);
        }
        out
    }

    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            let src = self.row(i);
            for (o, &j) in idx.iter().enumerate() {
                out[(i, o)] = src[j];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dims(
                "matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                rhs.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (ov, &b) in o.iter_mut().zip(rhs.row(k)) {
                    *ov += aik * b;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::dims(
                "sub",
                format!("{:?}", self.shape()),
                format!("{:?}", rhs.shape()),
            ));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Multiplies column `j` by `scale[j]`.
    pub fn scale_columns(&self, scale: &[f64]) -> Matrix {
        assert_eq!(scale.len(), self.cols);
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, s) in out.row_mut(i).iter_mut().zip(scale) {
                *v *= s;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Which factorization produced a [`TriangularFactor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorOrigin {
    /// Upper factor `M` of the inverse: `MᵀM = G⁻¹`.
    CholOfInverse,
}

/// Upper-triangular factor with strictly positive diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangularFactor {
    dim: usize,
    data: Vec<f64>,
    origin: FactorOrigin,
    jitter: f64,
}

impl TriangularFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn origin(&self) -> FactorOrigin {
        self.origin
    }

    /// Diagonal shift `ε` that had to be added before factorization succeeded.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Full row `i`, zeros left of the diagonal.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        }
    }
}

/// Gram product `X Xᵀ`, exactly symmetric.
pub fn gram(x: &Matrix) -> Matrix {
    let d = x.rows();
    let mut g = Matrix::zeros(d, d);
    for i in 0..d {
        let xi = x.row(i);
        for j in i..d {
            let mut acc = 0.0;
            for (a, b) in xi.iter().zip(x.row(j)) {
                acc += a * b;
            }
            g[(i, j)] = acc;
            g[(j, i)] = acc;
        }
    }
    g
}

/// Sum of squared entries.
///
/// Squares are accumulated in ascending order so the result depends only on
/// the multiset of entries (in particular it is transpose-invariant).
pub fn frobenius_sq(a: &Matrix) -> f64 {
    sum_sq(a.data())
}

pub(crate) fn sum_sq(values: &[f64]) -> f64 {
    let mut sq: Vec<f64> = values.iter().map(|v| v * v).collect();
    sq.sort_unstable_by(f64::total_cmp);
    sq.iter().sum()
}

/// Maximum number of jitter retries after the unshifted attempt.
pub const MAX_JITTER_RETRIES: u32 = 10;

/// Starting jitter `1e-6 · mean(diag(G))`, or `1e-6` if that mean is not positive.
pub fn default_jitter_base(g: &Matrix) -> f64 {
    let d = g.diag();
    let mean = if d.is_empty() {
        0.0
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    };
    if mean > 0.0 && mean.is_finite() {
        1e-6 * mean
    } else {
        1e-6
    }
}

/// Lower Cholesky factor of `a + shift·I`; `None` if a pivot is not positive.
fn cholesky_lower(a: &Matrix, shift: f64) -> Option<Vec<f64>> {
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = a[(j, j)] + shift;
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Some(l)
}

/// Inverse of a lower-triangular matrix (row-major, `n × n`).
fn invert_lower(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for j in 0..n {
        inv[j * n + j] = 1.0 / l[j * n + j];
        for i in (j + 1)..n {
            let mut s = 0.0;
            for k in j..i {
                s -= l[i * n + k] * inv[k * n + j];
            }
            inv[i * n + j] = s / l[i * n + i];
        }
    }
    inv
}

fn check_square_symmetric(g: &Matrix, op: &'static str) -> Result<()> {
    if g.rows() != g.cols() || g.rows() == 0 {
        return Err(Error::dims(op, "non-empty square matrix", format!("{:?}", g.shape())));
    }
    let tol = 1e-10 * g.max_abs().max(1.0);
    if g.asymmetry() > tol {
        return Err(Error::invalid(format!("{op}: matrix is not symmetric")));
    }
    Ok(())
}

/// Runs `attempt(ε)` for ε = 0, base, 2·base, … until it succeeds.
fn with_jitter<T>(
    base: f64,
    what: &str,
    mut attempt: impl FnMut(f64) -> Option<T>,
) -> Result<(T, f64)> {
    if let Some(v) = attempt(0.0) {
        return Ok((v, 0.0));
    }
    let mut eps = base;
    for _ in 0..MAX_JITTER_RETRIES {
        if let Some(v) = attempt(eps) {
            return Ok((v, eps));
        }
        eps *= 2.0;
    }
    Err(Error::NumericalFailure(format!(
        "{what}: not positive definite after {MAX_JITTER_RETRIES} jitter retries (last ε = {:e})",
        eps / 2.0
    )))
}

/// Upper-triangular `M` with `MᵀM = G⁻¹`.
///
/// If `G` (or its inverse) cannot be factorized, `ε·I` is added with `ε`
/// starting at `jitter_base` and doubling, at most [`MAX_JITTER_RETRIES`] times.
pub fn chol_upper_of_inverse(g: &Matrix, jitter_base: f64) -> Result<TriangularFactor> {
    check_square_symmetric(g, "chol_upper_of_inverse")?;
    let n = g.rows();
    let (data, jitter) = with_jitter(jitter_base, "curvature matrix", |eps| {
        let l = cholesky_lower(g, eps)?;
        let linv = invert_lower(&l, n);
        // G⁻¹ = L⁻ᵀ L⁻¹, built symmetric.
        let mut ginv = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in j..n {
                    acc += linv[k * n + i] * linv[k * n + j];
                }
                ginv[(i, j)] = acc;
                ginv[(j, i)] = acc;
            }
        }
        let l2 = cholesky_lower(&ginv, 0.0)?;
        // M = L2ᵀ
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                m[j * n + i] = l2[i * n + j];
            }
        }
        Some(m)
    })?;
    Ok(TriangularFactor {
        dim: n,
        data,
        origin: FactorOrigin::CholOfInverse,
        jitter,
    })
}

/// Solves `G y = b` for symmetric positive-definite `G` (jitter policy as
/// [`chol_upper_of_inverse`], one step of iterative refinement).
pub fn solve_spd(g: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    check_square_symmetric(g, "solve_spd")?;
    let n = g.rows();
    if b.len() != n {
        return Err(Error::dims("solve_spd", n, b.len()));
    }
    let (l, jitter) = with_jitter(default_jitter_base(g), "linear system", |eps| {
        cholesky_lower(g, eps)
    })?;
    let solve = |rhs: &[f64]| {
        let mut y = rhs.to_vec();
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
        y
    };
    let mut y = solve(b);
    if jitter == 0.0 {
        let r: Vec<f64> = (0..n)
            .map(|i| b[i] - g.row(i).iter().zip(&y).map(|(a, v)| a * v).sum::<f64>())
            .collect();
        let dy = solve(&r);
        for (v, d) in y.iter_mut().zip(dy) {
            *v += d;
        }
    }
    Ok(y)
}

/// `A v` for a row-major matrix.
pub fn matvec(a: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

/// `vᵀ A v`.
pub fn quad_form(a: &Matrix, v: &[f64]) -> f64 {
    matvec(a, v).iter().zip(v).map(|(x, y)| x * y).sum()
}
