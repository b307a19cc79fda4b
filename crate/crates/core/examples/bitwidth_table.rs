//! Average bits per weight for the baselines and mixed configurations,
//! computed from quantized artifacts and from the closed form.
//!
//! ```text
//! cargo run --release --example bitwidth_table
//! ```

use lora_mpq::accounting::{layer_shapes, loraquant_bits};
use lora_mpq::synth::{synthesize_container, SynthSpec};
use lora_mpq::{avg_bits, quantize_container, QuantConfig, Strategy};

fn main() -> lora_mpq::Result<()> {
    let container = synthesize_container(&SynthSpec::new(512, 256, 16, 4, 11))?;
    let base = QuantConfig::default().with_steps(0);
    let mut configs = vec![
        base.with_strategy(Strategy::BaselineBin),
        base.with_strategy(Strategy::BaselineRtn { bits: 1 }),
        base.with_strategy(Strategy::BaselineRtn { bits: 2 }),
        base.with_strategy(Strategy::BaselineRtn { bits: 3 }),
    ];
    for bits in [2, 3] {
        for rho in [0.8, 0.9] {
            configs.push(QuantConfig::mixed(bits, rho).with_steps(0));
        }
    }

    println!("{:<14} {:>10} {:>12} {:>7}", "method", "avg_bits", "closed_form", "mean_h");
    for cfg in configs {
        let q = quantize_container(&container, &cfg)?;
        let measured = avg_bits(&q).avg_bits();
        let closed = loraquant_bits(&layer_shapes(&q), &cfg).avg_bits();
        let mean_h = q.iter().map(|a| a.h as f64).sum::<f64>() / q.len() as f64;
        println!("{:<14} {measured:>10.6} {closed:>12.6} {mean_h:>7.2}", cfg.label());
    }
    Ok(())
}
