//! Dense row-major binary32 matrices.
//!
//! Storage is always `f32`; products and norms accumulate in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix from row-major values, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{rows}x{cols} matrix")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Rounds an `f64` buffer to binary32 storage.
    pub(crate) fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            rows,
            cols,
            data: data.iter().map(|&v| v as f32).collect(),
        }
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
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_row(&mut self, i: usize, values: &[f32]) {
        assert_eq!(values.len(), self.cols);
        self.data[i * self.cols..(i + 1) * self.cols].copy_from_slice(values);
    }

    pub fn set_column(&mut self, j: usize, values: &[f32]) {
        assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self.set(i, j, v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Keeps the listed columns, in the order given.
    pub fn select_columns(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, indices.len(), |i, j| self.get(i, indices[j]))
    }

    /// Keeps the listed rows, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "hcat of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, self.cols + other.cols, |i, j| {
            if j < self.cols {
                self.get(i, j)
            } else {
                other.get(i, j - self.cols)
            }
        }))
    }

    /// Vertical concatenation `[self; other]`.
    pub fn vcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "vcat of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Dense product accumulated in `f64`, returned row-major.
    pub fn matmul_f64(&self, other: &Matrix) -> Vec<f64> {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p] as f64;
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b as f64;
                }
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let prod = self.matmul_f64(other);
        Matrix::from_f64(self.rows, other.cols, &prod)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// `X^T Y` for two matrices with the same row count, in `f64`.
    pub(crate) fn gram_with(&self, other: &Matrix) -> Vec<f64> {
        assert_eq!(self.rows, other.rows);
        let (p, q) = (self.cols, other.cols);
        let mut out = vec![0.0f64; p * q];
        for i in 0..self.rows {
            let x = self.row(i);
            let y = other.row(i);
            for (a, &xv) in x.iter().enumerate() {
                let xv = xv as f64;
                for (b, &yv) in y.iter().enumerate() {
                    out[a * q + b] += xv * yv as f64;
                }
            }
        }
        out
    }

    /// `X Y^T` for two matrices with the same column count, in `f64`.
    pub(crate) fn outer_gram_with(&self, other: &Matrix) -> Vec<f64> {
        assert_eq!(self.cols, other.cols);
        let (p, q) = (self.rows, other.rows);
        let mut out = vec![0.0f64; p * q];
        for a in 0..p {
            let x = self.row(a);
            for b in 0..q {
                out[a * q + b] = dot_f64(x, other.row(b));
            }
        }
        out
    }
}

pub(crate) fn dot_f64(x: &[f32], y: &[f32]) -> f64 {
    x.iter().zip(y).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// A low-rank product `B·A` kept in factored form.
#[derive(Debug, Clone, Copy)]
pub struct FactorPair<'a> {
    pub b: &'a Matrix,
    pub a: &'a Matrix,
}

/// Frobenius norm of `Σ_k sign_k · B_k·A_k` without forming any `m×n` product.
///
/// Uses `‖Σ B_k A_k‖² = Σ_{k,l} tr((B_kᵀ B_l)(A_l A_kᵀ))`, which costs
/// `O((m + n)·r²)` per term pair.
pub fn factored_frobenius_norm(terms: &[(f64, FactorPair<'_>)]) -> f64 {
    let mut total = 0.0f64;
    for (k, (sk, tk)) in terms.iter().enumerate() {
        for (l, (sl, tl)) in terms.iter().enumerate().skip(k) {
            let gb = tk.b.gram_with(tl.b); // r_k × r_l
            let ga = tl.a.outer_gram_with(tk.a); // r_l × r_k
            let (rk, rl) = (tk.b.cols(), tl.b.cols());
            let mut tr = 0.0f64;
            for i in 0..rk {
                for j in 0..rl {
                    tr += gb[i * rl + j] * ga[j * rk + i];
                }
            }
            let w = if k == l { 1.0 } else { 2.0 };
            total += w * sk * sl * tr;
        }
    }
    total.max(0.0).sqrt()
}

/// `‖B·A − Σ B̂_k·Â_k‖_F` for a reference pair and a list of approximating pairs.
pub fn factored_difference_norm(reference: FactorPair<'_>, approx: &[FactorPair<'_>]) -> f64 {
    let mut terms = Vec::with_capacity(approx.len() + 1);
    terms.push((1.0, reference));
    terms.extend(approx.iter().map(|p| (-1.0, *p)));
    factored_frobenius_norm(&terms)
}
