//! End-to-end run on a synthetic container: quantize, write `.lqz`, read it
//! back, reconstruct, and report per-layer error and bit usage.
//!
//! ```text
//! cargo run --release --example quantize_pipeline -- [bits_high] [rho] [out.lqz]
//! ```

use lora_mpq::pipeline::error_report;
use lora_mpq::synth::{synthesize_container, SynthSpec};
use lora_mpq::{avg_bits, quantize_container, read_lqz, reconstruct_adapter, write_lqz, LqzFile, QuantConfig};

fn main() -> lora_mpq::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let bits: u32 = args.first().and_then(|s| s.parse().ok()).unwrap_or(2);
    let rho: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.9);
    let out = args
        .get(2)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("quantize_pipeline.lqz"));

    let container = synthesize_container(&SynthSpec::new(512, 384, 16, 4, 1))?;
    let cfg = QuantConfig::mixed(bits, rho);
    let adapters = quantize_container(&container, &cfg)?;
    write_lqz(&LqzFile::new(cfg, adapters), &out)?;

    let file = read_lqz(&out)?;
    let report = error_report(&container, &file.config, &file.adapters)?;
    println!("{} -> {} ({} bytes)", report.label, out.display(), std::fs::metadata(&out).map(|m| m.len()).unwrap_or(0));
    println!("{:<16} {:>3} {:>10} {:>9}", "layer", "h", "rel_err", "avg_bits");
    for l in &report.layers {
        println!("{:<16} {:>3} {:>10.4} {:>9.4}", l.layer, l.h, l.rel_error.unwrap_or(f64::NAN), l.avg_bits);
    }
    println!("overall avg bits {:.4}", avg_bits(&file.adapters).avg_bits());

    let rec = reconstruct_adapter(&file.adapters[0])?;
    println!("first layer reconstructs to {:?} with rank {}", rec.dense().shape(), rec.rank());
    Ok(())
}
