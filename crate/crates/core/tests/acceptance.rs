//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{add_into, dense, frob, frob_diff, gaussian_adapter, orthonormality_defect};
use lora_mpq::accounting::{avg_bits, layer_shapes, loraquant_bits};
use lora_mpq::lqz::{decode_lqz, encode_lqz, payload_bit_walk, LqzFile};
use lora_mpq::pipeline::{layer_error, quantize_adapter, quantize_container, reconstruct_adapter, requantize_adapter, Strategy};
use lora_mpq::quantizers::{bin_quantize, bin_scale, pack_bits, rtn_dequantize, rtn_quantize, unpack_bits};
use lora_mpq::ste::{optimize_rank_one_pair_detailed, reconstruction_loss, ste_gradient, OptConfig};
use lora_mpq::svd_split::{economy_svd_of_product, split_subloras};
use lora_mpq::synth::{synthesize_adapter, SynthSpec};
use lora_mpq::{read_container, AdapterContainer, LoraAdapter, Matrix, QuantConfig, Quantizer};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn round2(x: f64) -> String {
    format!("{:.2}", (x * 100.0).round() / 100.0)
}

// 1. Bitwidth arithmetic.
fn bitwidth_arithmetic() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let adapters = vec![
        gaussian_adapter(&mut rng, "layers.0.q_proj", 256, 384, 8),
        gaussian_adapter(&mut rng, "layers.0.v_proj", 128, 128, 16),
        gaussian_adapter(&mut rng, "layers.1.q_proj", 512, 256, 4),
    ];
    let container = AdapterContainer::new(adapters, Default::default()).unwrap();
    let mut results = Vec::new();
    for (strategy, expect) in [(Strategy::BaselineBin, 1.125), (Strategy::BaselineRtn { bits: 2 }, 2.140625)] {
        let cfg = QuantConfig::default().with_strategy(strategy);
        let q = quantize_container(&container, &cfg).unwrap();
        let meta = avg_bits(&q).avg_bits();
        let walk = payload_bit_walk(&encode_lqz(&LqzFile::new(cfg, q)).unwrap()).unwrap().avg_bits();
        results.push((meta, walk, expect));
    }
    let elapsed = start.elapsed();
    let pass = results.iter().all(|&(m, w, e)| m == e && w == e)
        && round2(results[0].0) == "1.13"
        && round2(results[1].0) == "2.14"
        && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "BIN {} ({}), RTN2 {} ({}), payload walk {} / {}, {}",
            results[0].0,
            round2(results[0].0),
            results[1].0,
            round2(results[1].0),
            results[0].1,
            results[1].1,
            secs(elapsed)
        ),
    )
}

/// Singular values of `B·A` from nalgebra: QR of both factors, then SVD of the core.
fn nalgebra_singular_values(ad: &LoraAdapter) -> Vec<f64> {
    let to_na = |m: &Matrix| DMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) as f64);
    let rb = to_na(&ad.b).qr().r();
    let ra = to_na(&ad.a).transpose().qr().r();
    let mut s: Vec<f64> = (rb * ra.transpose()).singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

// 2 and 3 share their trials.
fn split_identity_and_eckart_young() -> (Outcome, Outcome) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_split, mut worst_orth, mut descending) = (0.0f64, 0.0f64, true);
    let mut worst_ey = 0.0f64;
    for trial in 0..500 {
        let m = rng.random_range(32..=512);
        let n = rng.random_range(32..=512);
        let r = rng.random_range(2..=16);
        let rho = rng.random_range(0.3..0.99);
        let ad = gaussian_adapter(&mut rng, &format!("t{trial}"), m, n, r);
        let svd = economy_svd_of_product(&ad).unwrap();
        descending &= svd.singular_values.windows(2).all(|w| w[0] >= w[1]);
        worst_orth = worst_orth.max(orthonormality_defect(&svd.u)).max(orthonormality_defect(&svd.v));

        let split = split_subloras(&ad, rho).unwrap();
        let reference = dense(&ad.b, &ad.a);
        let high = dense(&split.b_high, &split.a_high);
        let mut sum = high.clone();
        add_into(&mut sum, &dense(&split.b_low, &split.a_low));
        let norm = frob(&reference);
        worst_split = worst_split.max(frob_diff(&sum, &reference) / norm);

        let oracle = nalgebra_singular_values(&ad);
        let tail = oracle[split.h..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let err = frob_diff(&high, &reference);
        let rel = if tail > 0.0 { (err - tail).abs() / tail } else { err / norm };
        worst_ey = worst_ey.max(rel);
    }
    let elapsed = start.elapsed();
    let c2 = outcome(
        worst_split <= 1e-4 && worst_orth <= 1e-5 && descending && elapsed < Duration::from_secs(30),
        format!(
            "500 trials: max split residual {worst_split:.2e} (<= 1e-4), max orthonormality defect {worst_orth:.2e} (<= 1e-5), descending {descending}, {}",
            secs(elapsed)
        ),
    );
    let c3 = outcome(
        worst_ey <= 1e-4,
        format!("500 trials: max |err - tail| / tail {worst_ey:.2e} (<= 1e-4) against nalgebra singular values"),
    );
    (c2, c3)
}

fn fuzz_group(rng: &mut impl Rng, len: usize) -> Vec<f32> {
    let scale = 10f64.powf(rng.random_range(-3.0..2.0));
    match rng.random_range(0..5) {
        0 => (0..len).map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32).collect(),
        1 => (0..len).map(|_| (rng.random_range(0.0..1.0) * scale + scale) as f32).collect(),
        2 => (0..len).map(|_| (-rng.random_range(0.0..1.0) * scale) as f32).collect(),
        3 => vec![(scale * rng.random_range(-1.0..1.0)) as f32; len],
        _ => (0..len)
            .map(|_| if rng.random_bool(0.9) { 0.0 } else { (rng.random_range(-1.0..1.0) * scale) as f32 })
            .collect(),
    }
}

// 4. Quantizer bounds.
fn quantizer_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut elements, mut violations) = (0usize, 0usize);
    while elements < 1_000_000 {
        let len = rng.random_range(1..=256);
        let bits = rng.random_range(1..=8);
        let v = fuzz_group(&mut rng, len);
        let (codes, p) = rtn_quantize(&v, bits).unwrap();
        let d = rtn_dequantize(&codes, &p, bits).unwrap();
        let s = p.scale.to_f64();
        violations += v.iter().zip(&d).filter(|(x, y)| (**x as f64 - **y as f64).abs() > s).count();
        elements += len;
    }

    let (mut exact_losses, mut stored_losses, mut subnormal) = (0usize, 0usize, 0usize);
    let mut groups = 0usize;
    while groups < 10_000 {
        let len = rng.random_range(1..=256);
        let v = fuzz_group(&mut rng, len);
        if v.iter().all(|&x| x == 0.0) {
            continue;
        }
        let (signs, p) = bin_quantize(&v).unwrap();
        let err = |s: f64| -> f64 {
            v.iter().zip(&signs).map(|(&x, &g)| (x as f64 - s * g as f64).powi(2)).sum()
        };
        let beats = |s: f64| err(s) < err(s * 1.01) && err(s) < err(s * 0.99);
        if !beats(bin_scale(&v)) {
            exact_losses += 1;
        }
        // Binary16 subnormals are spaced wider than 1%; only normal stored scales are held to the bound.
        if p.scale.is_normal() {
            if !beats(p.scale.to_f64()) {
                stored_losses += 1;
            }
        } else {
            subnormal += 1;
        }
        groups += 1;
    }

    let mut pack_failures = 0usize;
    for bits in [1u32, 2, 3, 4, 8] {
        for _ in 0..200 {
            let n = rng.random_range(0..1000);
            let codes: Vec<u32> = (0..n).map(|_| rng.random_range(0..(1u32 << bits))).collect();
            let bytes = pack_bits(&codes, bits).unwrap();
            if unpack_bits(&bytes, bits, n).unwrap() != codes || bytes.len() != (n * bits as usize).div_ceil(8) {
                pack_failures += 1;
            }
        }
    }
    outcome(
        violations == 0 && exact_losses == 0 && stored_losses == 0 && pack_failures == 0,
        format!(
            "RTN |err| > S on {violations} of {elements} elements; S = mean|v| beaten on {exact_losses} of {groups} groups (stored binary16 S beaten on {stored_losses}, {subnormal} subnormal scales exempt); {pack_failures} pack round-trip failures over bits {{1,2,3,4,8}}"
        ),
    )
}

/// Dense squared loss with the quantization residuals frozen.
fn frozen_loss(b: &[f32], a: &[f32], xb: &[f64], xa: &[f64], rb: &[f64], ra: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, &bi) in b.iter().enumerate() {
        for (j, &aj) in a.iter().enumerate() {
            let d = bi as f64 * aj as f64 - (xb[i] + rb[i]) * (xa[j] + ra[j]);
            total += d * d;
        }
    }
    total
}

fn away_from_boundary(q: &Quantizer, v: &[f32], j: usize, h: f32, group_size: usize) -> bool {
    let base = q.fake_quantize(v, group_size).unwrap();
    [h, -h].iter().all(|&step| {
        let mut p = v.to_vec();
        p[j] += step;
        q.fake_quantize(&p, group_size).unwrap() == base
    })
}

// 5. STE contract.
fn ste_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let quantizers = [Quantizer::rtn(2).unwrap(), Quantizer::rtn(3).unwrap(), Quantizer::rtn(4).unwrap(), Quantizer::binary()];
    let rates = [1e-3, 1e-2, 5e-2];
    let (mut regressions, mut improved) = (0usize, 0usize);
    let (mut fd_checked, mut fd_failed, mut fd_worst) = (0usize, 0usize, 0.0f64);
    for pair in 0..1000 {
        let lb = rng.random_range(8..=400);
        let la = rng.random_range(8..=400);
        let scale = 10f64.powf(rng.random_range(-1.0..0.5));
        let b: Vec<f32> = (0..lb).map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32).collect();
        let a: Vec<f32> = (0..la).map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32).collect();
        let q = quantizers[pair % quantizers.len()];
        let cfg = OptConfig::new(100, rates[pair % rates.len()], q, 128).unwrap();
        let out = optimize_rank_one_pair_detailed(&b, &a, &cfg).unwrap();
        let initial = reconstruction_loss(&b, &a, &b, &a, &cfg).unwrap();
        let returned = reconstruction_loss(&b, &a, &out.b, &out.a, &cfg).unwrap();
        if returned > initial || out.best_loss > out.initial_loss {
            regressions += 1;
        }
        if returned < initial {
            improved += 1;
        }

        if pair < 200 {
            let bh = q.fake_quantize(&b, 128).unwrap();
            let ah = q.fake_quantize(&a, 128).unwrap();
            let rb: Vec<f64> = bh.iter().zip(&b).map(|(h, x)| *h as f64 - *x as f64).collect();
            let ra: Vec<f64> = ah.iter().zip(&a).map(|(h, x)| *h as f64 - *x as f64).collect();
            let (gb, ga) = ste_gradient(&b, &a, &bh, &ah);
            let gmax = gb.iter().chain(&ga).fold(0.0f64, |m, g| m.max(g.abs()));
            let xb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            let xa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
            for _ in 0..5 {
                for side in 0..2 {
                    let (vec, grad) = if side == 0 { (&b, &gb) } else { (&a, &ga) };
                    let j = rng.random_range(0..vec.len());
                    let h = (1e-4 * (vec[j].abs() as f64).max(1e-3 * scale)) as f32;
                    if grad[j].abs() < 1e-6 * gmax || !away_from_boundary(&q, vec, j, h, 128) {
                        continue;
                    }
                    let (mut plus_b, mut plus_a) = (xb.clone(), xa.clone());
                    let (mut minus_b, mut minus_a) = (xb.clone(), xa.clone());
                    if side == 0 {
                        plus_b[j] += h as f64;
                        minus_b[j] -= h as f64;
                    } else {
                        plus_a[j] += h as f64;
                        minus_a[j] -= h as f64;
                    }
                    let fd = (frozen_loss(&b, &a, &plus_b, &plus_a, &rb, &ra) - frozen_loss(&b, &a, &minus_b, &minus_a, &rb, &ra))
                        / (2.0 * h as f64);
                    let rel = (fd - grad[j]).abs() / grad[j].abs();
                    fd_worst = fd_worst.max(rel);
                    fd_checked += 1;
                    if rel > 1e-2 {
                        fd_failed += 1;
                    }
                }
            }
        }
    }
    outcome(
        regressions == 0 && fd_failed == 0 && fd_checked > 0,
        format!(
            "returned loss > initial on {regressions} of 1000 pairs ({improved} improved); finite differences: {fd_checked} coordinates, worst relative error {fd_worst:.2e} (<= 1e-2)"
        ),
    )
}

struct AblationStats {
    trials: usize,
    mean: [f64; 5],
    beats_prune: usize,
    beats_low_rtn1: usize,
    svd_le_norm: usize,
    norm_le_random: usize,
    svd_le_random: usize,
}

/// Order: main, prune, low_rtn1, norm_split, random_split.
fn ablation_stats(bits_high: u32, rho: f64, trials: usize) -> AblationStats {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let base = QuantConfig::mixed(bits_high, rho);
    let mut errs = vec![[0.0f64; 5]; trials];
    for (trial, row) in errs.iter_mut().enumerate() {
        let m = rng.random_range(128..=512);
        let n = rng.random_range(128..=512);
        let decay = rng.random_range(0.6..0.9);
        let spec = SynthSpec::new(m, n, 16, 1, trial as u64).with_decay(Some(decay));
        let ad = synthesize_adapter("layer", &spec, &mut rng).unwrap();
        let main = quantize_adapter(&ad, &base).unwrap();
        let h = main.h;
        let cfgs = [
            base.with_strategy(Strategy::Prune),
            base.with_strategy(Strategy::LowRtn1),
            base.with_strategy(Strategy::NormSplit { h }),
            QuantConfig {
                seed: trial as u64,
                ..base.with_strategy(Strategy::RandomSplit { h })
            },
        ];
        row[0] = layer_error(&ad, &main).unwrap().abs_error;
        for (k, cfg) in cfgs.iter().enumerate() {
            row[k + 1] = layer_error(&ad, &quantize_adapter(&ad, cfg).unwrap()).unwrap().abs_error;
        }
    }
    let count = |f: &dyn Fn(&[f64; 5]) -> bool| errs.iter().filter(|e| f(e)).count();
    let mut mean = [0.0; 5];
    for e in &errs {
        for k in 0..5 {
            mean[k] += e[k] / trials as f64;
        }
    }
    AblationStats {
        trials,
        mean,
        beats_prune: count(&|e| e[0] < e[1]),
        beats_low_rtn1: count(&|e| e[0] < e[2]),
        svd_le_norm: count(&|e| e[0] <= e[3]),
        norm_le_random: count(&|e| e[3] <= e[4]),
        svd_le_random: count(&|e| e[0] <= e[4]),
    }
}

fn describe(s: &AblationStats) -> String {
    format!(
        "main<prune {}/{t}, main<low_rtn1 {}/{t}, svd<=norm {}/{t}, norm<=random {}/{t}, svd<=random {}/{t}; mean abs error main {:.4} prune {:.4} low_rtn1 {:.4} norm {:.4} random {:.4}",
        s.beats_prune,
        s.beats_low_rtn1,
        s.svd_le_norm,
        s.norm_le_random,
        s.svd_le_random,
        s.mean[0],
        s.mean[1],
        s.mean[2],
        s.mean[3],
        s.mean[4],
        t = s.trials
    )
}

// 6. Ablation orderings, at 3@0.8.
fn ablation_orderings() -> (Outcome, String) {
    let start = Instant::now();
    let s = ablation_stats(3, 0.8, 100);
    let elapsed = start.elapsed();
    let pass = s.beats_prune >= 95
        && s.beats_low_rtn1 >= 90
        && s.mean[0] <= s.mean[3]
        && s.mean[3] <= s.mean[4]
        && s.svd_le_norm >= 80
        && s.norm_le_random >= 80
        && s.svd_le_random >= 80
        && elapsed < Duration::from_secs(300);
    let main = outcome(pass, format!("3@0.8, 100 adapters: {}, {}", describe(&s), secs(elapsed)));
    let two_bit = ablation_stats(2, 0.8, 100);
    (main, format!("2@0.8, 100 adapters: {}", describe(&two_bit)))
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lora-mpq"))
        .args(args)
        .env("LORA_MPQ_THREADS", "2")
        .output()
        .expect("run CLI")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

// 7. Format determinism and round trip.
fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.qla");
    let (q1, q2) = (dir.path().join("a.lqz"), dir.path().join("b.lqz"));
    let mut ok = cli(&["synthesize", "--shape", "160,96,8,4,7", "--output", p(&src)]).status.success();
    for out in [&q1, &q2] {
        ok &= cli(&["quantize", "--input", p(&src), "--output", p(out), "--ratio", "0.8", "--bits-high", "2", "--seed", "3"])
            .status
            .success();
    }
    let bytes = std::fs::read(&q1).unwrap_or_default();
    let twice = ok && bytes == std::fs::read(&q2).unwrap_or_default();

    let file = decode_lqz(&bytes).unwrap();
    let reencoded = encode_lqz(&file).unwrap() == bytes;
    let requantized: Vec<_> = file
        .adapters
        .iter()
        .map(|q| requantize_adapter(q, &reconstruct_adapter(q).unwrap()).unwrap())
        .collect();
    let requant = encode_lqz(&LqzFile {
        adapters: requantized,
        ..file.clone()
    })
    .unwrap()
        == bytes;

    let meta = avg_bits(&file.adapters);
    let walk = payload_bit_walk(&bytes).unwrap();
    let closed = loraquant_bits(&layer_shapes(&file.adapters), &file.config);
    let accounting = meta == walk && meta == closed;

    let container = read_container(&src).unwrap();
    let lib_twice = {
        let cfg = file.config;
        let a = encode_lqz(&LqzFile { adapters: quantize_container(&container, &cfg).unwrap(), ..file.clone() }).unwrap();
        a == bytes
    };
    outcome(
        twice && reencoded && requant && accounting && lib_twice,
        format!(
            "quantize twice identical {twice}, library run identical {lib_twice}, decode/encode identical {reencoded}, reconstruct/re-quantize identical {requant}, metadata == payload walk == closed form {accounting} ({} bits)",
            meta.total_bits()
        ),
    )
}

// 8. No-quantization limit through the CLI.
fn no_quantization_limit() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.qla");
    let q = dir.path().join("q.lqz");
    let rec = dir.path().join("rec.qla");
    let delta = dir.path().join("delta.qla");
    let steps = [
        cli(&["synthesize", "--shape", "200,120,12,3,21", "--output", p(&src)]),
        cli(&["quantize", "--input", p(&src), "--output", p(&q), "--ratio", "1", "--bits-high", "16", "--opt-steps", "0"]),
        cli(&["reconstruct", "--input", p(&q), "--output", p(&rec)]),
        cli(&["reconstruct", "--input", p(&q), "--output", p(&delta), "--dense"]),
    ];
    if let Some(failed) = steps.iter().find(|o| !o.status.success()) {
        return outcome(false, format!("CLI failed: {}", String::from_utf8_lossy(&failed.stderr)));
    }
    let source = read_container(&src).unwrap();
    let back = read_container(&rec).unwrap();
    let (dense_tensors, _) = lora_mpq::tensor_store::decode_tensors(&std::fs::read(&delta).unwrap()).unwrap();
    let mut worst = 0.0f64;
    for (orig, got) in source.adapters().iter().zip(back.adapters()) {
        let reference = dense(&orig.b, &orig.a);
        let norm = frob(&reference);
        worst = worst.max(frob_diff(&dense(&got.b, &got.a), &reference) / norm);
        let d = &dense_tensors[&format!("{}.delta", orig.layer_name)];
        let d: Vec<f64> = d.as_slice().iter().map(|&v| v as f64).collect();
        worst = worst.max(frob_diff(&d, &reference) / norm);
    }
    outcome(
        worst <= 1e-4 && source.len() == back.len(),
        format!("{} layers, max relative error {worst:.2e} (<= 1e-4)", source.len()),
    )
}

fn main() {
    let mut lines: Vec<(&str, &str, Outcome)> = Vec::new();
    lines.push(("1", "bitwidth arithmetic", bitwidth_arithmetic()));
    let (c2, c3) = split_identity_and_eckart_young();
    lines.push(("2", "split-sum identity", c2));
    lines.push(("3", "Eckart-Young consistency", c3));
    lines.push(("4", "quantizer bounds", quantizer_bounds()));
    lines.push(("5", "STE contract", ste_contract()));
    let (c6, note) = ablation_orderings();
    lines.push(("6", "ablation orderings", c6));
    lines.push(("7", "format determinism and round trip", format_round_trip()));
    lines.push(("8", "no-quantization limit (CLI)", no_quantization_limit()));

    let mut failed = 0;
    for (id, name, o) in &lines {
        println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.pass as usize;
    }
    println!("INFO criterion 6 at 2 bits: {note}");
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
