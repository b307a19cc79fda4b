//! Split-strategy ablation on seeded synthetic adapters.
//!
//! For each trial the SVD ratio split picks `h`; the norm-ranked and random
//! native splits then run at that same `h`, next to the prune and low-RTN1
//! variants. Prints per-strategy mean relative error and pairwise win counts.
//!
//! ```text
//! cargo run --release --example ablation_sweep -- [trials] [mixing] [decay] [bits] [rho]
//! ```

use lora_mpq::pipeline::{layer_error, quantize_adapter, Strategy};
use lora_mpq::synth::{synthesize_adapter, SynthSpec};
use lora_mpq::QuantConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> lora_mpq::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let trials: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(30);
    let mixing: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let decay: Option<f64> = args.get(2).and_then(|s| s.parse().ok());
    let bits: u32 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let rho: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.8);

    let base = QuantConfig::mixed(bits, rho);
    let names = ["svd_ratio", "prune", "low_rtn1", "norm_split", "random_split"];
    let mut errors = vec![Vec::new(); names.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..trials {
        let m = rng.random_range(128..=512);
        let n = rng.random_range(128..=512);
        let d = decay.unwrap_or_else(|| rng.random_range(0.6..0.9));
        let spec = SynthSpec::new(m, n, 16, 1, trial as u64).with_decay(Some(d)).with_mixing(mixing);
        let adapter = synthesize_adapter("layer", &spec, &mut rng)?;

        let main = quantize_adapter(&adapter, &base)?;
        let h = main.h;
        let cfgs = [
            base.with_strategy(Strategy::Prune),
            base.with_strategy(Strategy::LowRtn1),
            base.with_strategy(Strategy::NormSplit { h }),
            QuantConfig { seed: trial as u64, ..base.with_strategy(Strategy::RandomSplit { h }) },
        ];
        errors[0].push(layer_error(&adapter, &main)?.rel_error.unwrap_or(0.0));
        for (slot, cfg) in cfgs.iter().enumerate() {
            let q = quantize_adapter(&adapter, cfg)?;
            errors[slot + 1].push(layer_error(&adapter, &q)?.rel_error.unwrap_or(0.0));
        }
    }

    for (name, e) in names.iter().zip(&errors) {
        println!("{name:>13}  mean rel error {:.5}", e.iter().sum::<f64>() / trials as f64);
    }
    let wins = |x: usize, y: usize| errors[x].iter().zip(&errors[y]).filter(|(p, q)| p < q).count();
    let ties = |x: usize, y: usize| errors[x].iter().zip(&errors[y]).filter(|(p, q)| p <= q).count();
    println!("svd_ratio < prune        {}/{trials}", wins(0, 1));
    println!("svd_ratio < low_rtn1     {}/{trials}", wins(0, 2));
    println!("svd_ratio <= norm_split  {}/{trials}", ties(0, 3));
    println!("norm_split <= random     {}/{trials}", ties(3, 4));
    Ok(())
}
