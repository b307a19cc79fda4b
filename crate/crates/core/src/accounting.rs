//! Bit accounting and multi-adapter memory projection.
//!
//! Every stored bit is counted: packed codes, one binary16 scale per group,
//! and for RTN groups one zero point at the code width. The weight count is
//! the source adapter's `(m + n)·r` for every strategy, so dropped parts
//! lower the average instead of shrinking the denominator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{QuantConfig, QuantizedAdapter, Strategy, PASSTHROUGH_BITS};
use crate::quantizers::{GroupAxis, QuantizedMatrix, Scheme};

pub const SCALE_BITS: u64 = 16;

/// Bits stored for one matrix or a sum of them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitTally {
    pub code_bits: u64,
    pub scale_bits: u64,
    pub zp_bits: u64,
}

impl BitTally {
    pub fn total(&self) -> u64 {
        self.code_bits + self.scale_bits + self.zp_bits
    }

    fn add(&mut self, other: BitTally) {
        self.code_bits += other.code_bits;
        self.scale_bits += other.scale_bits;
        self.zp_bits += other.zp_bits;
    }
}

/// Bits implied by a stored matrix's geometry and scheme.
pub fn matrix_bits(q: &QuantizedMatrix) -> BitTally {
    let groups = q.group_count() as u64;
    BitTally {
        code_bits: q.len() as u64 * q.bits() as u64,
        scale_bits: groups * SCALE_BITS,
        zp_bits: if q.quantizer.scheme == Scheme::Rtn { groups * q.bits() as u64 } else { 0 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBits {
    pub layer: String,
    pub weights: u64,
    pub code_bits: u64,
    pub scale_bits: u64,
    pub zp_bits: u64,
}

impl LayerBits {
    pub fn of(q: &QuantizedAdapter) -> Self {
        let mut t = BitTally::default();
        for m in q.matrices() {
            t.add(matrix_bits(m));
        }
        Self::from_tally(q.layer_name.clone(), q.weight_count(), t)
    }

    fn from_tally(layer: String, weights: u64, t: BitTally) -> Self {
        Self {
            layer,
            weights,
            code_bits: t.code_bits,
            scale_bits: t.scale_bits,
            zp_bits: t.zp_bits,
        }
    }

    pub fn total_bits(&self) -> u64 {
        self.code_bits + self.scale_bits + self.zp_bits
    }

    pub fn avg_bits(&self) -> f64 {
        if self.weights == 0 {
            0.0
        } else {
            self.total_bits() as f64 / self.weights as f64
        }
    }
}

/// Per-layer tallies and their aggregate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BitReport {
    pub layers: Vec<LayerBits>,
}

impl BitReport {
    pub fn weights(&self) -> u64 {
        self.layers.iter().map(|l| l.weights).sum()
    }

    pub fn tally(&self) -> BitTally {
        let mut t = BitTally::default();
        for l in &self.layers {
            t.add(BitTally {
                code_bits: l.code_bits,
                scale_bits: l.scale_bits,
                zp_bits: l.zp_bits,
            });
        }
        t
    }

    pub fn total_bits(&self) -> u64 {
        self.tally().total()
    }

    /// Aggregate bits per source weight; `0` for an empty report.
    pub fn avg_bits(&self) -> f64 {
        let w = self.weights();
        if w == 0 {
            0.0
        } else {
            self.total_bits() as f64 / w as f64
        }
    }

    /// CSV with columns `layer,weights,code_bits,scale_bits,zp_bits,avg_bits`
    /// and a trailing `TOTAL` row when non-empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::MalformedHeader(format!("csv: {e}"));
        w.write_record(["layer", "weights", "code_bits", "scale_bits", "zp_bits", "avg_bits"])
            .map_err(err)?;
        let mut row = |l: &str, weights: u64, t: BitTally, avg: f64| {
            w.write_record([
                l.to_string(),
                weights.to_string(),
                t.code_bits.to_string(),
                t.scale_bits.to_string(),
                t.zp_bits.to_string(),
                avg.to_string(),
            ])
        };
        for l in &self.layers {
            let t = BitTally {
                code_bits: l.code_bits,
                scale_bits: l.scale_bits,
                zp_bits: l.zp_bits,
            };
            row(&l.layer, l.weights, t, l.avg_bits()).map_err(err)?;
        }
        if !self.layers.is_empty() {
            row("TOTAL", self.weights(), self.tally(), self.avg_bits()).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::MalformedHeader(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
    }
}

/// Bit report of stored adapters, from their matrix metadata.
pub fn avg_bits(adapters: &[QuantizedAdapter]) -> BitReport {
    BitReport {
        layers: adapters.iter().map(LayerBits::of).collect(),
    }
}

/// Shape of one layer for closed-form accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    /// Rank of the high sub-LoRA.
    pub h: usize,
}

fn groups(rows: usize, cols: usize, axis: GroupAxis, group_size: usize) -> u64 {
    let (lines, len) = match axis {
        GroupAxis::Column => (cols, rows),
        GroupAxis::Row => (rows, cols),
    };
    (lines * len.div_ceil(group_size)) as u64
}

fn closed_form_pair(m: usize, n: usize, k: usize, scheme: Scheme, bits: u32, cfg: &QuantConfig) -> BitTally {
    if k == 0 {
        return BitTally::default();
    }
    let weights = ((m + n) * k) as u64;
    let g = match scheme {
        Scheme::F32 => 0,
        _ => groups(m, k, cfg.b_axis, cfg.group_size) + groups(k, n, cfg.a_axis, cfg.group_size),
    };
    BitTally {
        code_bits: weights * bits as u64,
        scale_bits: g * SCALE_BITS,
        zp_bits: if scheme == Scheme::Rtn { g * bits as u64 } else { 0 },
    }
}

/// Closed-form bit count of one layer under `cfg`, independent of any payload.
pub fn closed_form_layer_bits(shape: LayerShape, cfg: &QuantConfig) -> BitTally {
    let LayerShape { m, n, rank, h } = shape;
    let high = if cfg.bits_high == PASSTHROUGH_BITS {
        (Scheme::F32, 32)
    } else {
        (Scheme::Rtn, cfg.bits_high)
    };
    let mut t = BitTally::default();
    match cfg.strategy {
        Strategy::BaselineRtn { bits } => t.add(closed_form_pair(m, n, rank, Scheme::Rtn, bits, cfg)),
        Strategy::BaselineBin => t.add(closed_form_pair(m, n, rank, Scheme::Binary, 1, cfg)),
        strategy => {
            t.add(closed_form_pair(m, n, h, high.0, high.1, cfg));
            let low = match strategy {
                Strategy::Prune => None,
                Strategy::LowRtn1 => Some((Scheme::Rtn, 1)),
                _ => Some((Scheme::Binary, 1)),
            };
            if let Some((scheme, bits)) = low {
                t.add(closed_form_pair(m, n, rank - h, scheme, bits, cfg));
            }
        }
    }
    t
}

/// Closed-form report over layers of the given shapes.
pub fn loraquant_bits(layers: &[(String, LayerShape)], cfg: &QuantConfig) -> BitReport {
    BitReport {
        layers: layers
            .iter()
            .map(|(name, s)| LayerBits::from_tally(name.clone(), ((s.m + s.n) * s.rank) as u64, closed_form_layer_bits(*s, cfg)))
            .collect(),
    }
}

/// Shapes of stored adapters, for [`loraquant_bits`].
pub fn layer_shapes(adapters: &[QuantizedAdapter]) -> Vec<(String, LayerShape)> {
    adapters
        .iter()
        .map(|q| {
            (
                q.layer_name.clone(),
                LayerShape {
                    m: q.m,
                    n: q.n,
                    rank: q.rank,
                    h: q.h,
                },
            )
        })
        .collect()
}

/// One row of the memory projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub n_adapters: u64,
    pub bytes_fp16: u64,
    pub bytes_quantized: u64,
}

/// Bytes resident for `count` adapters next to a base model: each adapter
/// costs its payload bytes (`⌈bits/8⌉`) plus `header_bytes`.
pub fn memory_projection(base_bytes: u64, adapter_bits: u64, header_bytes: u64, count: u64) -> u64 {
    base_bytes + count * (adapter_bits.div_ceil(8) + header_bytes)
}

/// Projection for `1..=max_adapters` adapters, binary16 against quantized.
pub fn projection_curve(
    base_bytes: u64,
    fp16_adapter_bits: u64,
    quantized_adapter_bits: u64,
    header_bytes: u64,
    counts: impl IntoIterator<Item = u64>,
) -> Vec<ProjectionRow> {
    counts
        .into_iter()
        .map(|n| ProjectionRow {
            n_adapters: n,
            bytes_fp16: memory_projection(base_bytes, fp16_adapter_bits, header_bytes, n),
            bytes_quantized: memory_projection(base_bytes, quantized_adapter_bits, header_bytes, n),
        })
        .collect()
}

pub fn projection_csv(rows: &[ProjectionRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::MalformedHeader(format!("csv: {e}"));
    w.write_record(["n_adapters", "bytes_fp16", "bytes_quantized"]).map_err(err)?;
    for r in rows {
        w.write_record([r.n_adapters.to_string(), r.bytes_fp16.to_string(), r.bytes_quantized.to_string()])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::MalformedHeader(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
}
