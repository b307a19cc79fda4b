mod common;

use common::{dense, frob, frob_diff, gaussian_adapter, orthonormality_defect};
use lora_mpq::svd_split::{reparameterize, split_static};
use lora_mpq::{economy_svd_of_product, select_rank_h, split_subloras};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dense_singular_values(adapter: &lora_mpq::LoraAdapter) -> Vec<f64> {
    let (m, n) = adapter.output_shape();
    let w = dense(&adapter.b, &adapter.a);
    let mut s: Vec<f64> = DMatrix::from_row_slice(m, n, &w).singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

#[test]
fn matches_dense_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let ad = gaussian_adapter(&mut rng, "l", 64, 96, 8);
        let svd = economy_svd_of_product(&ad).unwrap();
        let oracle = dense_singular_values(&ad);
        for (i, s) in svd.singular_values.iter().enumerate() {
            assert!((s - oracle[i]).abs() <= 1e-5 * oracle[0], "trial {trial} σ{i}: {s} vs {}", oracle[i]);
        }
        assert!(oracle[8] <= 1e-5 * oracle[0]);

        assert!(orthonormality_defect(&svd.u) < 1e-5);
        assert!(orthonormality_defect(&svd.v) < 1e-5);

        let mut us = svd.u.clone();
        for j in 0..8 {
            let col: Vec<f32> = svd.u.column(j).iter().map(|x| x * svd.singular_values[j] as f32).collect();
            us.set_column(j, &col);
        }
        let rebuilt = dense(&us, &svd.v.transpose());
        let w = dense(&ad.b, &ad.a);
        assert!(frob_diff(&rebuilt, &w) <= 1e-5 * frob(&w), "trial {trial}");
    }
}

#[test]
fn reparameterized_norms_are_root_singular_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ad = gaussian_adapter(&mut rng, "l", 64, 96, 8);
    let svd = economy_svd_of_product(&ad).unwrap();
    let (b, a) = reparameterize(&svd);
    for i in 0..8 {
        let root = svd.singular_values[i].sqrt();
        let bn = b.column(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let an = a.row(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((bn - root).abs() < 1e-5 * root.max(1.0));
        assert!((an - root).abs() < 1e-5 * root.max(1.0));
    }
    let w = dense(&ad.b, &ad.a);
    assert!(frob_diff(&dense(&b, &a), &w) <= 1e-5 * frob(&w));
}

#[test]
fn sign_convention_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ad = gaussian_adapter(&mut rng, "l", 40, 30, 5);
    let svd = economy_svd_of_product(&ad).unwrap();
    for j in 0..5 {
        let col = svd.u.column(j);
        let big = col.iter().copied().fold(0.0f32, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        assert!(big >= 0.0);
    }
    let again = economy_svd_of_product(&ad).unwrap();
    assert_eq!(svd.u, again.u);
    assert_eq!(svd.v, again.v);
}

#[test]
fn h_is_monotone_in_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let ad = gaussian_adapter(&mut rng, "l", 48, 48, 12);
        let s = economy_svd_of_product(&ad).unwrap().singular_values;
        let mut prev = 0;
        for k in 1..=20 {
            let h = select_rank_h(&s, k as f64 / 20.0).unwrap();
            assert!(h >= prev && (1..=12).contains(&h));
            prev = h;
        }
        assert_eq!(select_rank_h(&s, 1.0).unwrap(), 12);
    }
}

#[test]
fn split_sums_to_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for rho in [0.3, 0.7, 0.95, 1.0] {
        let ad = gaussian_adapter(&mut rng, "l", 64, 80, 10);
        let split = split_subloras(&ad, rho).unwrap();
        assert_eq!(split.rank(), 10);
        let mut sum = dense(&split.b_high, &split.a_high);
        if split.h < 10 {
            common::add_into(&mut sum, &dense(&split.b_low, &split.a_low));
        }
        let w = dense(&ad.b, &ad.a);
        assert!(frob_diff(&sum, &w) <= 1e-5 * frob(&w), "rho {rho}");
    }
    let ad = gaussian_adapter(&mut rng, "l", 32, 32, 6);
    assert_eq!(split_static(&ad, 6).unwrap().h, 6);
    assert!(split_static(&ad, 7).is_err());
}
