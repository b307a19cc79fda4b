//! SVD reparameterization of an adapter and its split into a high- and a
//! low-importance sub-LoRA.
//!
//! The SVD of `B·A` is computed from the factors alone: `B = Q_B R_B`,
//! `Aᵀ = Q_A R_A`, so `B·A = Q_B (R_B R_Aᵀ) Q_Aᵀ` and only the `r×r` core
//! needs a dense decomposition.

use crate::error::{Error, Result};
use crate::linalg::{householder_qr, jacobi_svd, matmul, transpose};
use crate::matrix::Matrix;
use crate::tensor_store::LoraAdapter;

/// Rank-`r` SVD of `B·A`: `U` is `m×r`, `V` is `n×r`, singular values descending.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }
}

/// The two sub-LoRAs; `b_high·a_high + b_low·a_low = B·A`.
#[derive(Debug, Clone)]
pub struct SubLoraSplit {
    pub b_high: Matrix,
    pub a_high: Matrix,
    pub b_low: Matrix,
    pub a_low: Matrix,
    pub h: usize,
    pub singular_values: Vec<f64>,
}

impl SubLoraSplit {
    pub fn rank(&self) -> usize {
        self.b_high.cols() + self.b_low.cols()
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.b_high.rows(), self.a_high.cols())
    }
}

/// Truncated SVD of `B·A` without materializing the `m×n` product.
pub fn economy_svd_of_product(adapter: &LoraAdapter) -> Result<SvdFactors> {
    let (m, n) = adapter.output_shape();
    let r = adapter.rank();
    if r > m.min(n) {
        return Err(Error::ShapeMismatch(format!(
            "rank {r} exceeds min({m}, {n})"
        )));
    }
    if !adapter.b.is_finite() || !adapter.a.is_finite() {
        return Err(Error::NonFinite(format!("layer {:?}", adapter.layer_name)));
    }

    let b: Vec<f64> = adapter.b.as_slice().iter().map(|&v| v as f64).collect();
    let at: Vec<f64> = transpose(r, n, &adapter.a.as_slice().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let (q_b, r_b) = householder_qr(m, r, &b);
    let (q_a, r_a) = householder_qr(n, r, &at);
    let core = matmul(r, r, r, &r_b, &transpose(r, r, &r_a));
    let core_svd = jacobi_svd(r, &core)?;

    let mut u = matmul(m, r, r, &q_b, &core_svd.u);
    let mut v = matmul(n, r, r, &q_a, &core_svd.v);

    // Largest-magnitude entry of each U column is made non-negative.
    for j in 0..r {
        let mut best = 0.0f64;
        for i in 0..m {
            let x = u[i * r + j];
            if x.abs() > best.abs() {
                best = x;
            }
        }
        if best < 0.0 {
            for i in 0..m {
                u[i * r + j] = -u[i * r + j];
            }
            for i in 0..n {
                v[i * r + j] = -v[i * r + j];
            }
        }
    }

    Ok(SvdFactors {
        u: Matrix::from_f64(m, r, &u),
        singular_values: core_svd.s,
        v: Matrix::from_f64(n, r, &v),
    })
}

/// `B' = U·diag(√s)`, `A' = diag(√s)·Vᵀ`.
pub fn reparameterize(svd: &SvdFactors) -> (Matrix, Matrix) {
    let r = svd.rank();
    let roots: Vec<f64> = svd.singular_values.iter().map(|s| s.max(0.0).sqrt()).collect();
    let b = Matrix::from_fn(svd.u.rows(), r, |i, j| (svd.u.get(i, j) as f64 * roots[j]) as f32);
    let a = Matrix::from_fn(r, svd.v.rows(), |i, j| (svd.v.get(j, i) as f64 * roots[i]) as f32);
    (b, a)
}

/// Smallest `h` whose leading singular values cover at least `rho` of the
/// total squared mass.
pub fn select_rank_h(singular_values: &[f64], rho: f64) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidConfig(format!("ratio {rho} is outside (0, 1]")));
    }
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateSpectrum);
    }
    let mut covered = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        covered += s * s;
        if covered / total >= rho {
            return Ok(i + 1);
        }
    }
    Ok(singular_values.len())
}

/// Splits reparameterized factors at rank `h`: the first `h` components go high.
pub fn split_at(b_prime: &Matrix, a_prime: &Matrix, h: usize, singular_values: Vec<f64>) -> Result<SubLoraSplit> {
    let r = b_prime.cols();
    if h > r {
        return Err(Error::InvalidConfig(format!("split rank {h} exceeds adapter rank {r}")));
    }
    let high: Vec<usize> = (0..h).collect();
    let low: Vec<usize> = (h..r).collect();
    Ok(SubLoraSplit {
        b_high: b_prime.select_columns(&high),
        a_high: a_prime.select_rows(&high),
        b_low: b_prime.select_columns(&low),
        a_low: a_prime.select_rows(&low),
        h,
        singular_values,
    })
}

/// SVD split with `h` chosen by the variance-ratio rule.
///
/// An all-zero adapter has no defined ratio; it is split at `h = 1` with a warning.
pub fn split_subloras(adapter: &LoraAdapter, rho: f64) -> Result<SubLoraSplit> {
    let svd = economy_svd_of_product(adapter)?;
    let h = match select_rank_h(&svd.singular_values, rho) {
        Ok(h) => h,
        Err(Error::DegenerateSpectrum) => {
            log::warn!(
                "layer {:?} is all zeros; split rank clamped to 1",
                adapter.layer_name
            );
            1.min(svd.rank())
        }
        Err(e) => return Err(e),
    };
    let (b, a) = reparameterize(&svd);
    split_at(&b, &a, h, svd.singular_values)
}

/// SVD split at a fixed rank `h`.
pub fn split_static(adapter: &LoraAdapter, h: usize) -> Result<SubLoraSplit> {
    let svd = economy_svd_of_product(adapter)?;
    let (b, a) = reparameterize(&svd);
    split_at(&b, &a, h, svd.singular_values)
}
