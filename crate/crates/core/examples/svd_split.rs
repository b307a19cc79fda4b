//! Splits a synthetic adapter through the SVD of its product.
//!
//! Prints the singular spectrum, the `h` chosen for a range of ratios, and
//! the residual of the split-sum identity.
//!
//! ```text
//! cargo run --example svd_split -- [m] [n] [r] [decay]
//! ```

use lora_mpq::svd_split::{reparameterize, split_at};
use lora_mpq::synth::{synthesize_adapter, SynthSpec};
use lora_mpq::{economy_svd_of_product, factored_difference_norm, select_rank_h, FactorPair};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lora_mpq::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (m, n, r) = (arg(0, 256), arg(1, 192), arg(2, 16));
    let decay: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.8);

    let spec = SynthSpec::new(m, n, r, 1, 0).with_decay(Some(decay));
    let adapter = synthesize_adapter("layer", &spec, &mut ChaCha8Rng::seed_from_u64(7))?;
    let svd = economy_svd_of_product(&adapter)?;
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();

    println!("{:>3} {:>12} {:>10}", "i", "sigma", "cum_mass");
    let mut covered = 0.0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        covered += s * s;
        println!("{i:>3} {s:>12.6} {:>10.4}", covered / total);
    }

    println!();
    let (b, a) = reparameterize(&svd);
    let reference = FactorPair { b: &adapter.b, a: &adapter.a };
    let norm = factored_difference_norm(reference, &[]);
    for rho in [0.5, 0.8, 0.9, 0.95, 1.0] {
        let h = select_rank_h(&svd.singular_values, rho)?;
        let split = split_at(&b, &a, h, svd.singular_values.clone())?;
        let parts = [
            FactorPair { b: &split.b_high, a: &split.a_high },
            FactorPair { b: &split.b_low, a: &split.a_low },
        ];
        let residual = factored_difference_norm(reference, &parts) / norm;
        let high_only = factored_difference_norm(reference, &parts[..1]) / norm;
        println!("rho={rho:<5} h={h:<3} split residual {residual:.2e}  high-only error {high_only:.4}");
    }
    Ok(())
}
