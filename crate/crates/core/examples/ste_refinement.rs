//! Straight-through refinement of rank-one components before quantization.
//!
//! Compares the quantized reconstruction loss before and after `T` steps for
//! each quantizer and learning rate.
//!
//! ```text
//! cargo run --release --example ste_refinement -- [pairs] [steps]
//! ```

use lora_mpq::ste::optimize_rank_one_pair_detailed;
use lora_mpq::{OptConfig, Quantizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> lora_mpq::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let pairs: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(200);
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<(Vec<f32>, Vec<f32>)> = (0..pairs)
        .map(|_| {
            let b = (0..256).map(|_| rng.sample::<f32, _>(StandardNormal) * 0.05).collect();
            let a = (0..256).map(|_| rng.sample::<f32, _>(StandardNormal) * 0.05).collect();
            (b, a)
        })
        .collect();

    println!("{:<6} {:>6} {:>12} {:>12} {:>9}", "quant", "lr", "mean_before", "mean_after", "improved");
    for q in [Quantizer::binary(), Quantizer::rtn(2)?, Quantizer::rtn(3)?] {
        for lr in [1e-3, 1e-2, 5e-2] {
            let cfg = OptConfig::new(steps, lr, q, 128)?;
            let (mut before, mut after, mut improved) = (0.0, 0.0, 0);
            for (b, a) in &data {
                let out = optimize_rank_one_pair_detailed(b, a, &cfg)?;
                before += out.initial_loss;
                after += out.best_loss;
                improved += (out.best_step > 0) as usize;
            }
            let k = pairs as f64;
            println!("{:<6} {lr:>6} {:>12.6} {:>12.6} {improved:>9}", q.label(), before / k, after / k);
        }
    }
    Ok(())
}
