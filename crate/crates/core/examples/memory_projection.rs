//! Resident memory for many adapters served next to one base model,
//! binary16 adapters against quantized ones.
//!
//! ```text
//! cargo run --release --example memory_projection -- [base_gib] [max_adapters]
//! ```

use lora_mpq::accounting::{projection_curve, projection_csv};
use lora_mpq::synth::{synthesize_container, SynthSpec};
use lora_mpq::{avg_bits, quantize_container, QuantConfig};

fn main() -> lora_mpq::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let base_gib: f64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(13.5);
    let max: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);

    // One adapter: a few attention projections of a mid-sized model.
    let container = synthesize_container(&SynthSpec::new(1024, 1024, 16, 8, 2))?;
    let bits = avg_bits(&quantize_container(&container, &QuantConfig::mixed(2, 0.9).with_steps(0))?);
    let base = (base_gib * (1u64 << 30) as f64) as u64;
    let rows = projection_curve(base, bits.weights() * 16, bits.total_bits(), 0, (0..=max).step_by(100));
    print!("{}", projection_csv(&rows)?);

    let last = rows.last().expect("at least one row");
    println!(
        "# avg bits {:.4}; adapter memory ratio {:.2}x",
        bits.avg_bits(),
        (last.bytes_fp16 - base) as f64 / (last.bytes_quantized - base).max(1) as f64
    );
    Ok(())
}
