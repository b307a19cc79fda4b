//! Mixed-precision post-training quantization of low-rank adapters.
//!
//! Each adapter `ΔW = B·A` is reparameterized through the SVD of its
//! product, split into a high-importance sub-LoRA kept at 2–4 bits and a
//! low-importance sub-LoRA binarized to one bit, and refined per component
//! with straight-through gradient descent before the final quantization.
//!
//! ```
//! use lora_mpq::{quantize_lora, reconstruct_adapter, LoraAdapter, Matrix, QuantConfig};
//!
//! let b = Matrix::from_fn(64, 4, |i, j| ((i * 3 + j) as f32 * 0.1).sin());
//! let a = Matrix::from_fn(4, 32, |i, j| ((i + 2 * j) as f32 * 0.2).cos());
//! let adapter = LoraAdapter::new("layers.0.q_proj", b, a)?;
//! let q = quantize_lora(&adapter, &QuantConfig::mixed(2, 0.9))?;
//! let rec = reconstruct_adapter(&q)?;
//! assert_eq!(rec.dense().shape(), (64, 32));
//! # Ok::<(), lora_mpq::Error>(())
//! ```

pub mod accounting;
pub mod cli;
mod error;
pub mod linalg;
pub mod lqz;
mod matrix;
pub mod pipeline;
pub mod quantizers;
pub mod ste;
pub mod svd_split;
pub mod synth;
pub mod tensor_store;

pub use accounting::{avg_bits, BitReport, LayerBits};
pub use error::{Error, Result};
pub use lqz::{decode_lqz, encode_lqz, read_lqz, write_lqz, LqzFile};
pub use matrix::{factored_difference_norm, factored_frobenius_norm, FactorPair, Matrix};
pub use pipeline::{
    ablation_split, baseline_quantize, compare_methods, low_rtn1_variant, prune_variant, quantize_adapter,
    quantize_container, quantize_lora, reconstruct_adapter, BaselineMethod, QuantConfig, QuantizedAdapter,
    Strategy,
};
pub use quantizers::{dequantize_matrix, quantize_matrix, GroupAxis, QuantizedMatrix, Quantizer, Scheme};
pub use ste::{optimize_rank_one_pair, OptConfig};
pub use svd_split::{economy_svd_of_product, select_rank_h, split_subloras, SubLoraSplit};
pub use tensor_store::{read_container, write_container, AdapterContainer, Dtype, LoraAdapter};
