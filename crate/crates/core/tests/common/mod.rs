#![allow(dead_code)]

use lora_mpq::{LoraAdapter, Matrix};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense row-major `x·y` in binary64.
pub fn dense(x: &Matrix, y: &Matrix) -> Vec<f64> {
    let (m, k, n) = (x.rows(), x.cols(), y.cols());
    assert_eq!(k, y.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let xv = x.get(i, p) as f64;
            if xv == 0.0 {
                continue;
            }
            let row = y.row(p);
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &yv) in dst.iter_mut().zip(row) {
                *d += xv * yv as f64;
            }
        }
    }
    out
}

pub fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

pub fn frob(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn frob_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| (rng.sample::<f64, _>(StandardNormal) * scale) as f32)
}

pub fn gaussian_adapter(rng: &mut impl Rng, name: &str, m: usize, n: usize, r: usize) -> LoraAdapter {
    let b = gaussian_matrix(rng, m, r, 1.0);
    let a = gaussian_matrix(rng, r, n, 1.0 / (n as f64).sqrt());
    LoraAdapter::new(name, b, a).unwrap()
}

/// `max |XᵀX − I|` for a column-orthonormal `X`.
pub fn orthonormality_defect(x: &Matrix) -> f64 {
    let k = x.cols();
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let dot: f64 = (0..x.rows()).map(|p| x.get(p, i) as f64 * x.get(p, j) as f64).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}
