//! End-to-end adapter quantization, baselines and ablation strategies.
//!
//! The main path ([`quantize_lora`]) is: SVD of `B·A` → reparameterize →
//! choose `h` → split → per-component STE refinement → RTN for the high
//! sub-LoRA and sign binarization for the low one, with `B` factors grouped
//! by column and `A` factors by row.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounting::{self, LayerBits};
use crate::error::{Error, Result};
use crate::matrix::{factored_difference_norm, FactorPair, Matrix};
use crate::quantizers::{dequantize_matrix, quantize_matrix, GroupAxis, QuantizedMatrix, Quantizer};
use crate::ste::{optimize_factors, OptConfig, DEFAULT_LEARNING_RATE, DEFAULT_STEPS};
use crate::svd_split::{split_static, split_subloras, SubLoraSplit};
use crate::tensor_store::{collect_lora_pairs, AdapterContainer, LoraAdapter};

pub const DEFAULT_GROUP_SIZE: usize = 128;
/// `bits_high` value selecting the unquantized binary32 passthrough.
pub const PASSTHROUGH_BITS: u32 = 16;

/// How an adapter is split and quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Variance-ratio `h` on the SVD reparameterization.
    SvdRatio,
    /// Fixed `h` on the SVD reparameterization.
    SvdStatic { h: usize },
    /// `h` native components chosen uniformly at random.
    RandomSplit { h: usize },
    /// The `h` native components with largest `‖b_i‖·‖a_i‖`.
    NormSplit { h: usize },
    /// SVD ratio split with the low sub-LoRA dropped.
    Prune,
    /// SVD ratio split with the low sub-LoRA quantized by 1-bit RTN.
    LowRtn1,
    /// Direct RTN of `B` and `A`.
    BaselineRtn { bits: u32 },
    /// Direct sign binarization of `B` and `A`.
    BaselineBin,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::SvdRatio => "svd_ratio",
            Strategy::SvdStatic { .. } => "svd_static",
            Strategy::RandomSplit { .. } => "random_split",
            Strategy::NormSplit { .. } => "norm_split",
            Strategy::Prune => "prune",
            Strategy::LowRtn1 => "low_rtn1",
            Strategy::BaselineRtn { .. } => "baseline_rtn",
            Strategy::BaselineBin => "baseline_bin",
        }
    }

    /// Parses a strategy name; `h` is required by the fixed-rank strategies.
    pub fn parse(name: &str, h: Option<usize>) -> Result<Self> {
        let need_h = || h.ok_or_else(|| Error::InvalidConfig(format!("strategy {name} needs --h")));
        Ok(match name {
            "svd_ratio" | "loraquant" => Strategy::SvdRatio,
            "svd_static" | "svd_static_h" => Strategy::SvdStatic { h: need_h()? },
            "random_split" => Strategy::RandomSplit { h: need_h()? },
            "norm_split" => Strategy::NormSplit { h: need_h()? },
            "prune" => Strategy::Prune,
            "low_rtn1" => Strategy::LowRtn1,
            "bin" | "baseline_bin" => Strategy::BaselineBin,
            other => match other.strip_prefix("rtn").or_else(|| other.strip_prefix("baseline_rtn")) {
                Some(bits) => Strategy::BaselineRtn {
                    bits: bits
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("unknown strategy {other:?}")))?,
                },
                None => return Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
            },
        })
    }

    pub fn fixed_h(&self) -> Option<usize> {
        match *self {
            Strategy::SvdStatic { h } | Strategy::RandomSplit { h } | Strategy::NormSplit { h } => Some(h),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub rho: f64,
    pub bits_high: u32,
    pub bits_low: u32,
    pub group_size: usize,
    pub opt_steps: usize,
    pub learning_rate: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub b_axis: GroupAxis,
    pub a_axis: GroupAxis,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            rho: 0.9,
            bits_high: 2,
            bits_low: 1,
            group_size: DEFAULT_GROUP_SIZE,
            opt_steps: DEFAULT_STEPS,
            learning_rate: DEFAULT_LEARNING_RATE,
            strategy: Strategy::SvdRatio,
            seed: 0,
            b_axis: GroupAxis::Column,
            a_axis: GroupAxis::Row,
        }
    }
}

impl QuantConfig {
    /// The `bits@rho` configuration of the main method.
    pub fn mixed(bits_high: u32, rho: f64) -> Self {
        Self {
            bits_high,
            rho,
            ..Self::default()
        }
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.opt_steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidConfig(format!("ratio {} is outside (0, 1]", self.rho)));
        }
        if !matches!(self.bits_high, 2..=4 | PASSTHROUGH_BITS) {
            return Err(Error::InvalidConfig(format!(
                "bits_high {} must be 2, 3, 4 (or {PASSTHROUGH_BITS} for the unquantized debug path)",
                self.bits_high
            )));
        }
        if self.bits_low != 1 {
            return Err(Error::InvalidConfig(format!("bits_low must be 1, got {}", self.bits_low)));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidConfig("group size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if let Strategy::BaselineRtn { bits } = self.strategy {
            Quantizer::rtn(bits)?;
        }
        Ok(())
    }

    pub fn high_quantizer(&self) -> Result<Quantizer> {
        if self.bits_high == PASSTHROUGH_BITS {
            Ok(Quantizer::passthrough())
        } else {
            Quantizer::rtn(self.bits_high)
        }
    }

    pub fn low_quantizer(&self) -> Result<Quantizer> {
        match self.strategy {
            Strategy::LowRtn1 => Quantizer::rtn(1),
            _ => Ok(Quantizer::binary()),
        }
    }

    /// Short human-readable label, e.g. `2@0.9` or `norm_split(h=4,2b)`.
    pub fn label(&self) -> String {
        let mixed = format!("{}@{}", self.bits_high, self.rho);
        match self.strategy {
            Strategy::SvdRatio => mixed,
            Strategy::Prune => format!("prune({mixed})"),
            Strategy::LowRtn1 => format!("low_rtn1({mixed})"),
            Strategy::SvdStatic { h } => format!("svd_static(h={h},{}b)", self.bits_high),
            Strategy::NormSplit { h } => format!("norm_split(h={h},{}b)", self.bits_high),
            Strategy::RandomSplit { h } => format!("random_split(h={h},{}b,seed={})", self.bits_high, self.seed),
            Strategy::BaselineRtn { bits } => format!("rtn{bits}"),
            Strategy::BaselineBin => "bin".into(),
        }
    }
}

impl fmt::Display for QuantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// A quantized `(B, A)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPair {
    pub b: QuantizedMatrix,
    pub a: QuantizedMatrix,
}

impl QuantizedPair {
    pub fn rank(&self) -> usize {
        self.b.cols
    }

    pub fn dequantize(&self) -> Result<(Matrix, Matrix)> {
        Ok((dequantize_matrix(&self.b)?, dequantize_matrix(&self.a)?))
    }
}

/// The quantized form of one layer's adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedAdapter {
    pub layer_name: String,
    /// Rows of `B`.
    pub m: usize,
    /// Columns of `A`.
    pub n: usize,
    /// Rank of the source adapter.
    pub rank: usize,
    pub h: usize,
    pub high: Option<QuantizedPair>,
    pub low: Option<QuantizedPair>,
    pub config: QuantConfig,
}

impl QuantizedAdapter {
    pub fn pairs(&self) -> impl Iterator<Item = &QuantizedPair> {
        self.high.iter().chain(self.low.iter())
    }

    pub fn matrices(&self) -> impl Iterator<Item = &QuantizedMatrix> {
        self.pairs().flat_map(|p| [&p.b, &p.a])
    }

    /// Parameter count of the source adapter, `(m + n)·r`.
    pub fn weight_count(&self) -> u64 {
        ((self.m + self.n) * self.rank) as u64
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn quantize_pair(b: &Matrix, a: &Matrix, q: Quantizer, cfg: &QuantConfig) -> Result<Option<QuantizedPair>> {
    if b.cols() == 0 {
        return Ok(None);
    }
    Ok(Some(QuantizedPair {
        b: quantize_matrix(b, q, cfg.group_size, cfg.b_axis)?,
        a: quantize_matrix(a, q, cfg.group_size, cfg.a_axis)?,
    }))
}

/// Refines and quantizes an already split adapter.
fn quantize_split(
    layer_name: &str,
    split: &SubLoraSplit,
    cfg: &QuantConfig,
    keep_low: bool,
) -> Result<QuantizedAdapter> {
    let high_q = cfg.high_quantizer()?;
    let low_q = cfg.low_quantizer()?;
    let cfg_high = OptConfig::new(cfg.opt_steps, cfg.learning_rate, high_q, cfg.group_size)?;
    let cfg_low = OptConfig::new(cfg.opt_steps, cfg.learning_rate, low_q, cfg.group_size)?;
    let (b_high, a_high) = optimize_factors(&split.b_high, &split.a_high, &cfg_high)?;
    let high = quantize_pair(&b_high, &a_high, high_q, cfg)?;
    let low = if keep_low {
        let (b_low, a_low) = optimize_factors(&split.b_low, &split.a_low, &cfg_low)?;
        quantize_pair(&b_low, &a_low, low_q, cfg)?
    } else {
        None
    };
    let (m, n) = split.output_shape();
    Ok(QuantizedAdapter {
        layer_name: layer_name.to_string(),
        m,
        n,
        rank: split.rank(),
        h: split.h,
        high,
        low,
        config: *cfg,
    })
}

fn svd_split_for(adapter: &LoraAdapter, cfg: &QuantConfig) -> Result<SubLoraSplit> {
    match cfg.strategy {
        Strategy::SvdStatic { h } => {
            if h > adapter.rank() {
                return Err(Error::InvalidConfig(format!(
                    "static h {h} exceeds rank {} of layer {:?}",
                    adapter.rank(),
                    adapter.layer_name
                )));
            }
            split_static(adapter, h)
        }
        _ => split_subloras(adapter, cfg.rho),
    }
}

/// The main method: SVD ratio split (or a static `h` when the strategy is
/// [`Strategy::SvdStatic`]), STE refinement, mixed-precision quantization.
pub fn quantize_lora(adapter: &LoraAdapter, cfg: &QuantConfig) -> Result<QuantizedAdapter> {
    cfg.validate()?;
    let split = svd_split_for(adapter, cfg)?;
    quantize_split(&adapter.layer_name, &split, cfg, true)
}

/// The main method with the low sub-LoRA dropped.
pub fn prune_variant(adapter: &LoraAdapter, cfg: &QuantConfig) -> Result<QuantizedAdapter> {
    let cfg = cfg.with_strategy(Strategy::Prune);
    cfg.validate()?;
    let split = split_subloras(adapter, cfg.rho)?;
    quantize_split(&adapter.layer_name, &split, &cfg, false)
}

/// The main method with the low sub-LoRA quantized by 1-bit RTN.
pub fn low_rtn1_variant(adapter: &LoraAdapter, cfg: &QuantConfig) -> Result<QuantizedAdapter> {
    let cfg = cfg.with_strategy(Strategy::LowRtn1);
    cfg.validate()?;
    let split = split_subloras(adapter, cfg.rho)?;
    quantize_split(&adapter.layer_name, &split, &cfg, true)
}

/// Indices of native components sent to high precision.
pub fn native_high_indices(adapter: &LoraAdapter, strategy: Strategy, seed: u64) -> Result<Vec<usize>> {
    let r = adapter.rank();
    let h = strategy
        .fixed_h()
        .ok_or_else(|| Error::InvalidConfig(format!("{} has no fixed h", strategy.name())))?;
    if h > r {
        return Err(Error::InvalidConfig(format!(
            "h {h} exceeds rank {r} of layer {:?}",
            adapter.layer_name
        )));
    }
    let mut idx = match strategy {
        Strategy::RandomSplit { .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&adapter.layer_name));
            sample(&mut rng, r, h).into_vec()
        }
        Strategy::NormSplit { .. } => {
            let importance: Vec<f64> = (0..r)
                .map(|i| {
                    let b = adapter.b.column(i);
                    let bn = b.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    let an = adapter.a.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    bn * an
                })
                .collect();
            let mut order: Vec<usize> = (0..r).collect();
            order.sort_by(|&x, &y| importance[y].total_cmp(&importance[x]));
            order.truncate(h);
            order
        }
        _ => return Err(Error::InvalidConfig(format!("{} is not a native split", strategy.name()))),
    };
    idx.sort_unstable();
    Ok(idx)
}

/// Split strategies for the ablations: random or norm-ranked native
/// components, or a static `h` on the SVD path.
pub fn ablation_split(adapter: &LoraAdapter, cfg: &QuantConfig) -> Result<QuantizedAdapter> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::SvdStatic { .. } => quantize_lora(adapter, cfg),
        Strategy::RandomSplit { .. } | Strategy::NormSplit { .. } => {
            let high = native_high_indices(adapter, cfg.strategy, cfg.seed)?;
            let low: Vec<usize> = (0..adapter.rank()).filter(|i| !high.contains(i)).collect();
            let split = SubLoraSplit {
                b_high: adapter.b.select_columns(&high),
                a_high: adapter.a.select_rows(&high),
                b_low: adapter.b.select_columns(&low),
                a_low: adapter.a.select_rows(&low),
                h: high.len(),
                singular_values: Vec::new(),
            };
            quantize_split(&adapter.layer_name, &split, cfg, true)
        }
        other => Err(Error::InvalidConfig(format!("{} is not an ablation split", other.name()))),
    }
}

/// Baseline quantizers applied directly to `B` and `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Rtn(u32),
    Bin,
}

pub fn baseline_quantize(adapter: &LoraAdapter, method: BaselineMethod, group_size: usize) -> Result<QuantizedAdapter> {
    let strategy = match method {
        BaselineMethod::Rtn(bits) => Strategy::BaselineRtn { bits },
        BaselineMethod::Bin => Strategy::BaselineBin,
    };
    let cfg = QuantConfig {
        group_size,
        opt_steps: 0,
        strategy,
        ..QuantConfig::default()
    };
    baseline_with(adapter, &cfg)
}

fn baseline_with(adapter: &LoraAdapter, cfg: &QuantConfig) -> Result<QuantizedAdapter> {
    cfg.validate()?;
    let q = match cfg.strategy {
        Strategy::BaselineRtn { bits } => Quantizer::rtn(bits)?,
        Strategy::BaselineBin => Quantizer::binary(),
        other => return Err(Error::InvalidConfig(format!("{} is not a baseline", other.name()))),
    };
    let (m, n) = adapter.output_shape();
    Ok(QuantizedAdapter {
        layer_name: adapter.layer_name.clone(),
        m,
        n,
        rank: adapter.rank(),
        h: adapter.rank(),
        high: quantize_pair(&adapter.b, &adapter.a, q, cfg)?,
        low: None,
        config: *cfg,
    })
}

/// Dispatches on `cfg.strategy`.
pub fn quantize_adapter(adapter: &LoraAdapter, cfg: &QuantConfig) -> Result<QuantizedAdapter> {
    match cfg.strategy {
        Strategy::SvdRatio | Strategy::SvdStatic { .. } => quantize_lora(adapter, cfg),
        Strategy::Prune => prune_variant(adapter, cfg),
        Strategy::LowRtn1 => low_rtn1_variant(adapter, cfg),
        Strategy::RandomSplit { .. } | Strategy::NormSplit { .. } => ablation_split(adapter, cfg),
        Strategy::BaselineRtn { .. } | Strategy::BaselineBin => baseline_with(adapter, cfg),
    }
}

/// Dequantized factors, high sub-LoRA first.
#[derive(Debug, Clone)]
pub struct ReconstructedAdapter {
    pub layer_name: String,
    pub m: usize,
    pub n: usize,
    pub parts: Vec<(Matrix, Matrix)>,
}

impl ReconstructedAdapter {
    pub fn rank(&self) -> usize {
        self.parts.iter().map(|(b, _)| b.cols()).sum()
    }

    /// `[B_high | B_low]` and `[A_high; A_low]`; `None` when nothing is kept.
    pub fn concatenated(&self) -> Result<Option<(Matrix, Matrix)>> {
        let mut iter = self.parts.iter();
        let Some((b0, a0)) = iter.next() else {
            return Ok(None);
        };
        let (mut b, mut a) = (b0.clone(), a0.clone());
        for (bi, ai) in iter {
            b = b.hcat(bi)?;
            a = a.vcat(ai)?;
        }
        Ok(Some((b, a)))
    }

    /// Dense `m×n` delta, `Σ D(B_k)·D(A_k)`, accumulated in `f64`.
    pub fn dense_f64(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.m * self.n];
        for (b, a) in &self.parts {
            for (o, v) in out.iter_mut().zip(b.matmul_f64(a)) {
                *o += v;
            }
        }
        out
    }

    pub fn dense(&self) -> Matrix {
        Matrix::from_f64(self.m, self.n, &self.dense_f64())
    }

    fn factor_pairs(&self) -> Vec<FactorPair<'_>> {
        self.parts.iter().map(|(b, a)| FactorPair { b, a }).collect()
    }
}

pub fn reconstruct_adapter(q: &QuantizedAdapter) -> Result<ReconstructedAdapter> {
    let parts = q.pairs().map(|p| p.dequantize()).collect::<Result<Vec<_>>>()?;
    for (b, a) in &parts {
        if b.rows() != q.m || a.cols() != q.n || b.cols() != a.rows() {
            return Err(Error::CorruptPacking(format!(
                "layer {:?}: part {}x{} · {}x{} does not produce {}x{}",
                q.layer_name,
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols(),
                q.m,
                q.n
            )));
        }
    }
    Ok(ReconstructedAdapter {
        layer_name: q.layer_name.clone(),
        m: q.m,
        n: q.n,
        parts,
    })
}

/// Re-quantizes reconstructed factors with the quantizers, group sizes and
/// axes recorded in `template`. Dequantized values are fixed points of the
/// quantizers, so this reproduces `template` exactly.
pub fn requantize_adapter(template: &QuantizedAdapter, rec: &ReconstructedAdapter) -> Result<QuantizedAdapter> {
    let stored: Vec<&QuantizedPair> = template.pairs().collect();
    if stored.len() != rec.parts.len() {
        return Err(Error::ShapeMismatch(format!(
            "layer {:?}: {} stored pairs but {} reconstructed parts",
            template.layer_name,
            stored.len(),
            rec.parts.len()
        )));
    }
    let redo = |q: &QuantizedMatrix, m: &Matrix| quantize_matrix(m, q.quantizer, q.group_size, q.axis);
    let mut pairs = stored.iter().zip(&rec.parts).map(|(p, (b, a))| {
        Ok(QuantizedPair {
            b: redo(&p.b, b)?,
            a: redo(&p.a, a)?,
        })
    });
    let high = match template.high {
        Some(_) => Some(pairs.next().expect("counted")?),
        None => None,
    };
    let low = match template.low {
        Some(_) => Some(pairs.next().expect("counted")?),
        None => None,
    };
    Ok(QuantizedAdapter {
        high,
        low,
        ..template.clone()
    })
}

/// Reconstruction error of one layer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerError {
    pub layer: String,
    pub h: usize,
    pub rank: usize,
    pub abs_error: f64,
    /// `abs_error / ‖B·A‖_F`; absent for an all-zero adapter.
    pub rel_error: Option<f64>,
    pub avg_bits: f64,
}

/// `‖B·A − reconstruction‖_F` and its relative form.
pub fn reconstruction_error(adapter: &LoraAdapter, rec: &ReconstructedAdapter) -> (f64, Option<f64>) {
    let reference = FactorPair {
        b: &adapter.b,
        a: &adapter.a,
    };
    let abs = factored_difference_norm(reference, &rec.factor_pairs());
    let norm = factored_difference_norm(reference, &[]);
    let rel = (norm > 0.0).then(|| abs / norm);
    (abs, rel)
}

pub fn layer_error(adapter: &LoraAdapter, q: &QuantizedAdapter) -> Result<LayerError> {
    if adapter.output_shape() != (q.m, q.n) {
        return Err(Error::ShapeMismatch(format!(
            "layer {:?}: adapter is {:?}, quantized form is {:?}",
            adapter.layer_name,
            adapter.output_shape(),
            (q.m, q.n)
        )));
    }
    let rec = reconstruct_adapter(q)?;
    let (abs_error, rel_error) = reconstruction_error(adapter, &rec);
    Ok(LayerError {
        layer: q.layer_name.clone(),
        h: q.h,
        rank: q.rank,
        abs_error,
        rel_error,
        avg_bits: LayerBits::of(q).avg_bits(),
    })
}

/// Per-layer and aggregate reconstruction errors for one configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ErrorReport {
    pub label: String,
    pub config: QuantConfig,
    pub layers: Vec<LayerError>,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
    /// Over layers with a defined relative error.
    pub mean_rel_error: Option<f64>,
    pub max_rel_error: Option<f64>,
    pub mean_h: f64,
    pub avg_bits: f64,
}

impl ErrorReport {
    pub fn new(config: QuantConfig, layers: Vec<LayerError>, avg_bits: f64) -> Self {
        let count = layers.len().max(1) as f64;
        let rels: Vec<f64> = layers.iter().filter_map(|l| l.rel_error).collect();
        Self {
            label: config.label(),
            config,
            mean_abs_error: layers.iter().map(|l| l.abs_error).sum::<f64>() / count,
            max_abs_error: layers.iter().map(|l| l.abs_error).fold(0.0, f64::max),
            mean_rel_error: (!rels.is_empty()).then(|| rels.iter().sum::<f64>() / rels.len() as f64),
            max_rel_error: rels.iter().copied().reduce(f64::max),
            mean_h: layers.iter().map(|l| l.h as f64).sum::<f64>() / count,
            avg_bits,
            layers,
        }
    }
}

/// Quantizes every adapter of a container, in layer-name order.
pub fn quantize_container(container: &AdapterContainer, cfg: &QuantConfig) -> Result<Vec<QuantizedAdapter>> {
    cfg.validate()?;
    collect_lora_pairs(container)
        .par_iter()
        .map(|a| quantize_adapter(a, cfg))
        .collect()
}

/// Error report of already quantized adapters against their sources.
pub fn error_report(container: &AdapterContainer, cfg: &QuantConfig, quantized: &[QuantizedAdapter]) -> Result<ErrorReport> {
    let sources = collect_lora_pairs(container);
    if sources.len() != quantized.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} source layers but {} quantized layers",
            sources.len(),
            quantized.len()
        )));
    }
    let layers = sources
        .par_iter()
        .zip(quantized.par_iter())
        .map(|(src, q)| {
            if src.layer_name != q.layer_name {
                return Err(Error::ShapeMismatch(format!(
                    "layer {:?} paired with {:?}",
                    src.layer_name, q.layer_name
                )));
            }
            layer_error(src, q)
        })
        .collect::<Result<Vec<_>>>()?;
    let bits = accounting::avg_bits(quantized);
    Ok(ErrorReport::new(*cfg, layers, bits.avg_bits()))
}

/// Runs each configuration over all adapters of the container.
pub fn compare_methods(container: &AdapterContainer, configs: &[QuantConfig]) -> Result<Vec<ErrorReport>> {
    configs
        .iter()
        .map(|cfg| {
            let q = quantize_container(container, cfg)?;
            error_report(container, cfg, &q)
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct ComparisonRow<'a> {
    method: &'a str,
    strategy: &'a str,
    rho: f64,
    bits_high: u32,
    h: Option<usize>,
    group_size: usize,
    opt_steps: usize,
    learning_rate: f64,
    /// Only set for strategies that consume randomness.
    seed: Option<u64>,
    layers: usize,
    mean_h: f64,
    mean_abs_error: f64,
    max_abs_error: f64,
    mean_rel_error: Option<f64>,
    max_rel_error: Option<f64>,
    avg_bits: f64,
}

/// One CSV row per configuration.
pub fn comparison_csv(reports: &[ErrorReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if reports.is_empty() {
        w.write_record([
            "method", "strategy", "rho", "bits_high", "h", "group_size", "opt_steps", "learning_rate",
            "seed", "layers", "mean_h", "mean_abs_error", "max_abs_error", "mean_rel_error",
            "max_rel_error", "avg_bits",
        ])
        .map_err(csv_err)?;
    }
    for r in reports {
        w.serialize(ComparisonRow {
            method: &r.label,
            strategy: r.config.strategy.name(),
            rho: r.config.rho,
            bits_high: r.config.bits_high,
            h: r.config.strategy.fixed_h(),
            group_size: r.config.group_size,
            opt_steps: r.config.opt_steps,
            learning_rate: r.config.learning_rate,
            seed: matches!(r.config.strategy, Strategy::RandomSplit { .. }).then_some(r.config.seed),
            layers: r.layers.len(),
            mean_h: r.mean_h,
            mean_abs_error: r.mean_abs_error,
            max_abs_error: r.max_abs_error,
            mean_rel_error: r.mean_rel_error,
            max_rel_error: r.max_rel_error,
            avg_bits: r.avg_bits,
        })
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::MalformedHeader(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::MalformedHeader(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthogonal_example() -> LoraAdapter {
        let b = Matrix::new(3, 2, vec![1., 0., 0., 1., 0., 0.]).unwrap();
        let a = Matrix::new(2, 4, vec![2., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
        LoraAdapter::new("ortho", b, a).unwrap()
    }

    #[test]
    fn orthogonal_example_hand_trace() {
        let cfg = QuantConfig::mixed(2, 0.8).with_steps(0);
        let q = quantize_lora(&orthogonal_example(), &cfg).unwrap();
        assert_eq!(q.h, 1);
        let rec = reconstruct_adapter(&q).unwrap();
        let (bh, ah) = &rec.parts[0];
        let high = bh.matmul(ah);
        let expect = [2., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.];
        for (x, y) in high.as_slice().iter().zip(expect) {
            assert!((x - y).abs() < 2e-3, "{:?}", high.as_slice());
        }
        let (bl, al) = &rec.parts[1];
        // The σ=1 component: B_l = e2, A_l = e2ᵀ, binarized per group of 3 / 4 values.
        assert_eq!(bl.as_slice(), &[1. / 3., 1. / 3., 1. / 3.].map(|v: f32| half::f16::from_f32(v).to_f32()));
        assert_eq!(al.as_slice(), &[0.25; 4]);
    }

    #[test]
    fn zero_adapter_reconstructs_exactly() {
        let ad = LoraAdapter::new("z", Matrix::zeros(8, 2), Matrix::zeros(2, 8)).unwrap();
        let cfg = QuantConfig::mixed(2, 0.9);
        let q = quantize_lora(&ad, &cfg).unwrap();
        let err = layer_error(&ad, &q).unwrap();
        assert_eq!(err.abs_error, 0.0);
        assert_eq!(err.rel_error, None);
    }

    #[test]
    fn full_ratio_has_no_low_part() {
        let cfg = QuantConfig::mixed(2, 1.0).with_steps(0);
        let q = quantize_lora(&orthogonal_example(), &cfg).unwrap();
        assert!(q.low.is_none());
        assert_eq!(reconstruct_adapter(&q).unwrap().parts.len(), 1);
        let p = prune_variant(&orthogonal_example(), &cfg).unwrap();
        assert_eq!(p.high, q.high);
        assert!(p.low.is_none());
        let l = low_rtn1_variant(&orthogonal_example(), &cfg).unwrap();
        assert_eq!(l.high, q.high);
        assert!(l.low.is_none());
    }

    #[test]
    fn prune_orthogonal_error_is_second_singular_value() {
        let cfg = QuantConfig::mixed(2, 0.8).with_steps(0);
        let p = prune_variant(&orthogonal_example(), &cfg).unwrap();
        let err = layer_error(&orthogonal_example(), &p).unwrap();
        assert!((err.abs_error - 1.0).abs() < 2e-3, "{}", err.abs_error);
    }

    #[test]
    fn bin_baseline_matches_group_quantizer() {
        let b = Matrix::new(4, 1, vec![1., -2., 3., -4.]).unwrap();
        let a = Matrix::new(1, 4, vec![1., 1., 1., 1.]).unwrap();
        let ad = LoraAdapter::new("x", b, a).unwrap();
        let q = baseline_quantize(&ad, BaselineMethod::Bin, 128).unwrap();
        let rec = reconstruct_adapter(&q).unwrap();
        assert_eq!(rec.parts[0].0.as_slice(), &[2.5, -2.5, 2.5, -2.5]);
        assert_eq!(q.h, 1);
    }

    #[test]
    fn rtn2_baseline_on_grid_is_exact() {
        let b = Matrix::new(4, 1, vec![0., 1., 2., 3.]).unwrap();
        let a = Matrix::new(1, 4, vec![0., 1., 2., 3.]).unwrap();
        let ad = LoraAdapter::new("x", b, a).unwrap();
        let q = baseline_quantize(&ad, BaselineMethod::Rtn(2), 128).unwrap();
        assert_eq!(layer_error(&ad, &q).unwrap().abs_error, 0.0);
    }

    #[test]
    fn norm_split_picks_dominant_component() {
        let b = Matrix::from_fn(6, 3, |i, j| if j == 1 { 10.0 + i as f32 } else { 0.1 * (i + j) as f32 });
        let a = Matrix::from_fn(3, 5, |i, j| if i == 1 { 5.0 } else { 0.2 * (j as f32 - 1.0) });
        let ad = LoraAdapter::new("x", b, a).unwrap();
        assert_eq!(native_high_indices(&ad, Strategy::NormSplit { h: 1 }, 0).unwrap(), vec![1]);
    }

    #[test]
    fn random_split_is_seeded() {
        let ad = LoraAdapter::new("x", Matrix::from_fn(20, 10, |i, j| (i * j) as f32), Matrix::zeros(10, 20)).unwrap();
        let s = Strategy::RandomSplit { h: 4 };
        let x = native_high_indices(&ad, s, 7).unwrap();
        assert_eq!(x, native_high_indices(&ad, s, 7).unwrap());
        assert_eq!(x.len(), 4);
        assert!((0..20).any(|seed| native_high_indices(&ad, s, seed).unwrap() != x));
        assert!(native_high_indices(&ad, Strategy::RandomSplit { h: 11 }, 7).is_err());
    }

    #[test]
    fn static_h_above_rank_is_an_error() {
        let cfg = QuantConfig::mixed(2, 0.9).with_strategy(Strategy::SvdStatic { h: 3 });
        assert!(matches!(quantize_adapter(&orthogonal_example(), &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn config_validation() {
        assert!(QuantConfig::mixed(2, 1.5).validate().is_err());
        assert!(QuantConfig::mixed(2, 0.0).validate().is_err());
        assert!(QuantConfig::mixed(5, 0.5).validate().is_err());
        assert!(QuantConfig::mixed(16, 1.0).validate().is_ok());
        assert_eq!(QuantConfig::mixed(2, 0.9).label(), "2@0.9");
        assert_eq!(QuantConfig::mixed(3, 0.8).label(), "3@0.8");
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!(Strategy::parse("svd_ratio", None).unwrap(), Strategy::SvdRatio);
        assert_eq!(Strategy::parse("rtn2", None).unwrap(), Strategy::BaselineRtn { bits: 2 });
        assert_eq!(Strategy::parse("bin", None).unwrap(), Strategy::BaselineBin);
        assert_eq!(Strategy::parse("norm_split", Some(3)).unwrap(), Strategy::NormSplit { h: 3 });
        assert!(Strategy::parse("norm_split", None).is_err());
        assert!(Strategy::parse("gptq", None).is_err());
    }

    #[test]
    fn empty_comparison() {
        let reports = compare_methods(&AdapterContainer::default(), &[]).unwrap();
        assert!(reports.is_empty());
        assert_eq!(comparison_csv(&reports).unwrap().lines().count(), 1);
    }
}
