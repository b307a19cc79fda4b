//! Writes a `.qla` adapter container in binary16 and binary32, reads it
//! back, and lists the layers with their shapes.
//!
//! ```text
//! cargo run --example container_io -- [dir]
//! ```

use lora_mpq::synth::{synthesize_container, SynthSpec};
use lora_mpq::tensor_store::collect_lora_pairs;
use lora_mpq::{read_container, write_container, Dtype};

fn main() -> lora_mpq::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(std::env::temp_dir);
    let mut container = synthesize_container(&SynthSpec::new(96, 64, 8, 3, 4))?;
    container.metadata.insert("base_model".into(), "synthetic".into());

    for dtype in [Dtype::F16, Dtype::F32] {
        let path = dir.join(format!("container_io_{dtype:?}.qla").to_lowercase());
        write_container(&container, &path, dtype)?;
        let back = read_container(&path)?;
        let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        println!("{} ({size} bytes, metadata {:?})", path.display(), back.metadata);
        for ad in collect_lora_pairs(&back) {
            let (m, n) = ad.output_shape();
            println!("  {:<16} {m}x{n} rank {}", ad.layer_name, ad.rank());
        }
        if dtype == Dtype::F32 {
            assert_eq!(back, container);
        }
    }
    Ok(())
}
