//! Small dense kernels in `f64`: economy Householder QR and one-sided
//! Jacobi SVD for square cores.
//!
//! Buffers are row-major `Vec<f64>`.

use crate::error::{Error, Result};

/// Off-diagonal tolerance for one-sided Jacobi, relative to column norms.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Sweep cap for one-sided Jacobi.
pub const JACOBI_MAX_SWEEPS: usize = 60;

/// Economy QR of a tall `m×k` matrix (`m ≥ k`): returns `(Q m×k, R k×k)`
/// with orthonormal `Q` columns and upper-triangular `R`.
pub fn householder_qr(m: usize, k: usize, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert!(m >= k, "householder_qr needs m >= k");
    assert_eq!(a.len(), m * k);
    let mut work = a.to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);

    for j in 0..k {
        let mut v: Vec<f64> = (j..m).map(|i| work[i * k + j]).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2 = v.iter().map(|x| x * x).sum::<f64>();
        if vnorm2 == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        for c in j..k {
            let dot: f64 = (j..m).map(|i| v[i - j] * work[i * k + c]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..m {
                work[i * k + c] -= f * v[i - j];
            }
        }
        reflectors.push(v);
    }

    let mut r = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            r[i * k + j] = work[i * k + j];
        }
    }

    // Q = H_0 H_1 … H_{k-1} applied to the first k columns of I.
    let mut q = vec![0.0; m * k];
    for i in 0..k {
        q[i * k + i] = 1.0;
    }
    for j in (0..k).rev() {
        let v = &reflectors[j];
        if v.is_empty() {
            continue;
        }
        let vnorm2 = v.iter().map(|x| x * x).sum::<f64>();
        for c in 0..k {
            let dot: f64 = (j..m).map(|i| v[i - j] * q[i * k + c]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..m {
                q[i * k + c] -= f * v[i - j];
            }
        }
    }
    (q, r)
}

/// Thin SVD of a square `k×k` matrix: `(U, s, V)` with `C = U·diag(s)·Vᵀ`,
/// `s` descending, `U` and `V` orthogonal.
#[derive(Debug, Clone)]
pub struct SquareSvd {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
}

/// One-sided (Hestenes) Jacobi SVD of a `k×k` matrix.
///
/// Columns whose norm is negligible have their left singular vector
/// completed to an orthonormal basis, so `U` is orthogonal even for
/// rank-deficient input.
pub fn jacobi_svd(k: usize, c: &[f64]) -> Result<SquareSvd> {
    assert_eq!(c.len(), k * k);
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("svd core".into()));
    }
    let mut w = c.to_vec();
    let mut v = vec![0.0; k * k];
    for i in 0..k {
        v[i * k + i] = 1.0;
    }

    let scale = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    let negligible = scale * f64::EPSILON * (k.max(1) as f64);

    let mut converged = k < 2;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let (mut alpha, mut beta, mut gamma) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..k {
                    let wp = w[i * k + p];
                    let wq = w[i * k + q];
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if alpha.sqrt() <= negligible || beta.sqrt() <= negligible {
                    continue;
                }
                if gamma.abs() <= JACOBI_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..k {
                    let wp = w[i * k + p];
                    let wq = w[i * k + q];
                    w[i * k + p] = cs * wp - sn * wq;
                    w[i * k + q] = sn * wp + cs * wq;
                    let vp = v[i * k + p];
                    let vq = v[i * k + q];
                    v[i * k + p] = cs * vp - sn * vq;
                    v[i * k + q] = sn * vp + cs * vq;
                }
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::SvdNonConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = (0..k)
        .map(|j| (0..k).map(|i| w[i * k + j].powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    // Stable sort keeps the Jacobi output order among ties.
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let mut u = vec![0.0; k * k];
    let mut s = vec![0.0; k];
    let mut vs = vec![0.0; k * k];
    let mut filled = vec![false; k];
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        for i in 0..k {
            vs[i * k + dst] = v[i * k + src];
        }
        if sigma > negligible {
            s[dst] = sigma;
            for i in 0..k {
                u[i * k + dst] = w[i * k + src] / sigma;
            }
            filled[dst] = true;
        }
    }
    complete_orthonormal_columns(k, k, &mut u, &filled);
    Ok(SquareSvd { u, s, v: vs })
}

/// Fills the columns of `q` (`rows×cols`) not marked in `filled` with unit
/// vectors orthogonal to every other column, by Gram–Schmidt over the
/// standard basis.
fn complete_orthonormal_columns(rows: usize, cols: usize, q: &mut [f64], filled: &[bool]) {
    let mut done: Vec<usize> = (0..cols).filter(|&j| filled[j]).collect();
    let mut candidate = 0usize;
    for j in 0..cols {
        if filled[j] {
            continue;
        }
        loop {
            assert!(candidate < rows, "basis completion ran out of candidates");
            let mut x = vec![0.0; rows];
            x[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &d in &done {
                    let dot: f64 = (0..rows).map(|i| q[i * cols + d] * x[i]).sum();
                    for i in 0..rows {
                        x[i] -= dot * q[i * cols + d];
                    }
                }
            }
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for i in 0..rows {
                    q[i * cols + j] = x[i] / norm;
                }
                done.push(j);
                break;
            }
        }
    }
}

pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

pub(crate) fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_orth_error(rows: usize, cols: usize, q: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..cols {
            for b in 0..cols {
                let dot: f64 = (0..rows).map(|i| q[i * cols + a] * q[i * cols + b]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn qr_reconstructs_and_is_orthonormal() {
        let (m, k) = (9, 4);
        let a = pseudo_random(m * k, 3);
        let (q, r) = householder_qr(m, k, &a);
        assert!(max_orth_error(m, k, &q) < 1e-12);
        let qr = matmul(m, k, k, &q, &r);
        for (x, y) in qr.iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
        for i in 0..k {
            for j in 0..i {
                assert_eq!(r[i * k + j], 0.0);
            }
        }
    }

    #[test]
    fn qr_of_rank_deficient_input_keeps_orthonormal_q() {
        let (m, k) = (5, 3);
        let mut a = vec![0.0; m * k];
        for i in 0..m {
            a[i * k] = i as f64 + 1.0;
            a[i * k + 1] = 2.0 * (i as f64 + 1.0);
        }
        let (q, r) = householder_qr(m, k, &a);
        assert!(max_orth_error(m, k, &q) < 1e-12);
        let qr = matmul(m, k, k, &q, &r);
        for (x, y) in qr.iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_descending_and_reconstructs() {
        let k = 6;
        let c = pseudo_random(k * k, 11);
        let svd = jacobi_svd(k, &c).unwrap();
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(max_orth_error(k, k, &svd.u) < 1e-12);
        assert!(max_orth_error(k, k, &svd.v) < 1e-12);
        let mut us = svd.u.clone();
        for i in 0..k {
            for j in 0..k {
                us[i * k + j] *= svd.s[j];
            }
        }
        let rec = matmul(k, k, k, &us, &transpose(k, k, &svd.v));
        for (x, y) in rec.iter().zip(&c) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_zero_matrix() {
        let svd = jacobi_svd(3, &[0.0; 9]).unwrap();
        assert_eq!(svd.s, vec![0.0; 3]);
        assert!(max_orth_error(3, 3, &svd.u) < 1e-12);
    }

    #[test]
    fn jacobi_rank_one_completes_basis() {
        let k = 4;
        let x = [1.0, 2.0, -1.0, 0.5];
        let y = [0.3, -0.2, 0.9, 1.0];
        let c: Vec<f64> = (0..k * k).map(|idx| x[idx / k] * y[idx % k]).collect();
        let svd = jacobi_svd(k, &c).unwrap();
        assert!(svd.s[1] < 1e-12 * svd.s[0]);
        assert!(max_orth_error(k, k, &svd.u) < 1e-10);
    }

    #[test]
    fn jacobi_rejects_nan() {
        assert!(jacobi_svd(2, &[1.0, f64::NAN, 0.0, 1.0]).is_err());
    }
}
