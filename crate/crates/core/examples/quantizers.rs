//! Group-wise RTN and binary quantization of one matrix, with the packed
//! payload size and reconstruction error for each scheme.
//!
//! ```text
//! cargo run --example quantizers -- [rows] [cols] [group_size]
//! ```

use lora_mpq::quantizers::packing::{pack_bits, unpack_bits};
use lora_mpq::{dequantize_matrix, quantize_matrix, GroupAxis, Matrix, Quantizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> lora_mpq::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (rows, cols, group) = (arg(0, 256), arg(1, 16), arg(2, 128));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Matrix::from_fn(rows, cols, |_, _| rng.sample::<f32, _>(StandardNormal));
    let norm = m.frobenius_norm();

    println!("{:<8} {:>10} {:>8} {:>10}", "scheme", "bytes", "groups", "rel_err");
    for q in [Quantizer::binary(), Quantizer::rtn(1)?, Quantizer::rtn(2)?, Quantizer::rtn(3)?, Quantizer::rtn(4)?] {
        let packed = quantize_matrix(&m, q, group, GroupAxis::Column)?;
        let back = dequantize_matrix(&packed)?;
        let err: f64 = m
            .as_slice()
            .iter()
            .zip(back.as_slice())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        println!(
            "{:<8} {:>10} {:>8} {:>10.4}",
            q.label(),
            packed.packed_codes.len() + packed.scales.len() * 2,
            packed.group_count(),
            err / norm
        );
    }

    let codes: Vec<u32> = (0..11).map(|i| i % 8).collect();
    let bytes = pack_bits(&codes, 3)?;
    println!("\n3-bit codes {codes:?} pack into {bytes:02x?}");
    assert_eq!(unpack_bits(&bytes, 3, codes.len())?, codes);
    Ok(())
}
