//! Group-wise round-to-nearest (RTN) and sign-binarization quantizers.
//!
//! A matrix is cut into lines (columns or rows, see [`GroupAxis`]) and each
//! line into contiguous groups of `group_size` weights; groups never span
//! lines and a short trailing group keeps its own parameters. Codes are
//! stored in line order (line 0 first, then line 1, …) and bit-packed with
//! [`pack_bits`].

pub mod packing;

pub use packing::{pack_bits, packed_len, unpack_bits};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Lower bound on the RTN range of an all-zero group.
pub const DEGENERATE_RANGE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Rtn,
    Binary,
    /// Unquantized binary32 passthrough, for debugging the pipeline.
    F32,
}

/// Which lines carry the groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupAxis {
    /// Groups run down each column.
    Column,
    /// Groups run along each row.
    Row,
}

/// A validated `(scheme, bits)` combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Quantizer {
    pub scheme: Scheme,
    pub bits: u32,
}

impl Quantizer {
    pub fn new(scheme: Scheme, bits: u32) -> Result<Self> {
        match scheme {
            Scheme::Rtn if (1..=8).contains(&bits) => {}
            Scheme::Rtn => {
                return Err(Error::InvalidConfig(format!("RTN needs 1..=8 bits, got {bits}")))
            }
            Scheme::Binary if bits == 1 => {}
            Scheme::Binary => {
                return Err(Error::InvalidConfig(format!("binary scheme needs 1 bit, got {bits}")))
            }
            Scheme::F32 if bits == 32 => {}
            Scheme::F32 => {
                return Err(Error::InvalidConfig(format!("f32 passthrough needs 32 bits, got {bits}")))
            }
        }
        Ok(Self { scheme, bits })
    }

    pub fn rtn(bits: u32) -> Result<Self> {
        Self::new(Scheme::Rtn, bits)
    }

    pub fn binary() -> Self {
        Self {
            scheme: Scheme::Binary,
            bits: 1,
        }
    }

    pub fn passthrough() -> Self {
        Self {
            scheme: Scheme::F32,
            bits: 32,
        }
    }

    pub fn label(&self) -> String {
        match self.scheme {
            Scheme::Rtn => format!("rtn{}", self.bits),
            Scheme::Binary => "bin".into(),
            Scheme::F32 => "f32".into(),
        }
    }

    /// Quantize-then-dequantize one contiguous vector, grouped along its length.
    pub fn fake_quantize(&self, values: &[f32], group_size: usize) -> Result<Vec<f32>> {
        if group_size == 0 {
            return Err(Error::InvalidConfig("group size must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(values.len());
        for group in values.chunks(group_size) {
            match self.scheme {
                Scheme::Rtn => {
                    let (codes, params) = rtn_quantize(group, self.bits)?;
                    out.extend(rtn_dequantize(&codes, &params, self.bits)?);
                }
                Scheme::Binary => {
                    let (signs, params) = bin_quantize(group)?;
                    out.extend(bin_dequantize(&signs, &params)?);
                }
                Scheme::F32 => out.extend_from_slice(group),
            }
        }
        Ok(out)
    }
}

/// Parameters of one RTN group. `q_min = 0`, `q_max = 2^bits − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtnGroupParams {
    pub scale: f16,
    pub zero_point: u32,
}

/// Parameters of one binary group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinGroupParams {
    pub scale: f16,
}

pub fn q_max(bits: u32) -> u32 {
    (1u32 << bits) - 1
}

/// Largest binary16 value `≤ s` (for `s ≥ 0`).
fn f16_round_down(s: f64) -> f16 {
    let mut h = f16::from_f64(s);
    if h.to_f64() > s {
        h = f16::from_bits(h.to_bits() - 1);
    }
    h
}

/// Smallest binary16 value `≥ s` (for `s > 0`).
fn f16_round_up(s: f64) -> f16 {
    let mut h = f16::from_f64(s);
    if h.to_f64() < s {
        h = f16::from_bits(h.to_bits() + 1);
    }
    h
}

fn f16_nearest(s: f64) -> Result<f16> {
    let h = f16::from_f64(s);
    if !h.is_finite() {
        return Err(Error::ScaleOutOfRange(s as f32));
    }
    Ok(h)
}

/// Binary16 RTN scale for an exact scale `s`.
///
/// Rounding down makes the group minimum land on `q_min` and the maximum
/// on `q_max`, so re-quantizing a dequantized group is the identity. When
/// rounding down loses more than half a step over the full range (tiny,
/// subnormal scales) the scale is rounded up instead.
fn rtn_scale(s: f64, qmax: u32) -> Result<f16> {
    let down = f16_round_down(s);
    let d = down.to_f64();
    let h = if d > 0.0 && (s / d - 1.0) * qmax as f64 <= 0.5 {
        down
    } else {
        f16_round_up(s)
    };
    if !h.is_finite() || h.to_f64() > f16::MAX.to_f64() {
        return Err(Error::ScaleOutOfRange(s as f32));
    }
    Ok(h)
}

/// Asymmetric round-to-nearest quantization of one group.
///
/// `S = (max − min)/(q_max − q_min)`, `Z = round(q_min − min/S)` and
/// `code = clamp(round(v/S) + Z)`, ties away from zero, where the range
/// `[min, max]` is widened to contain 0 so that `Z` is always a valid code.
/// Codes are computed with the stored binary16 scale (see [`rtn_scale`]),
/// which keeps `|v − S·(code − Z)| ≤ S`. An all-zero group uses a range of
/// [`DEGENERATE_RANGE_EPSILON`].
pub fn rtn_quantize(values: &[f32], bits: u32) -> Result<(Vec<u32>, RtnGroupParams)> {
    Quantizer::rtn(bits)?;
    let qmax = q_max(bits);
    let (lo, hi) = values
        .iter()
        .fold((0.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    let range = (hi - lo).max(DEGENERATE_RANGE_EPSILON);
    let scale = rtn_scale(range / qmax as f64, qmax)?;
    let s = scale.to_f64();
    let zero_point = (-lo / s).round().clamp(0.0, qmax as f64) as u32;
    let codes = values
        .iter()
        .map(|&v| ((v as f64 / s).round() + zero_point as f64).clamp(0.0, qmax as f64) as u32)
        .collect();
    Ok((codes, RtnGroupParams { scale, zero_point }))
}

/// `S·(code − Z)` with the stored binary16 scale.
pub fn rtn_dequantize(codes: &[u32], params: &RtnGroupParams, bits: u32) -> Result<Vec<f32>> {
    let qmax = q_max(bits);
    if params.zero_point > qmax {
        return Err(Error::CodeOverflow {
            code: params.zero_point,
            bits,
        });
    }
    let s = params.scale.to_f32();
    codes
        .iter()
        .map(|&c| {
            if c > qmax {
                Err(Error::CodeOverflow { code: c, bits })
            } else {
                Ok(s * (c as f32 - params.zero_point as f32))
            }
        })
        .collect()
}

/// Exact binary scale `mean|v|` before binary16 storage; `0` for an empty group.
pub fn bin_scale(values: &[f32]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().map(|&v| (v as f64).abs()).sum::<f64>() / values.len() as f64
    }
}

/// Sign binarization of one group: `sign(0) = +1`, `S = mean|v|` rounded
/// to the nearest binary16 value.
pub fn bin_quantize(values: &[f32]) -> Result<(Vec<i8>, BinGroupParams)> {
    let signs = values.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
    Ok((signs, BinGroupParams { scale: f16_nearest(bin_scale(values))? }))
}

pub fn bin_dequantize(signs: &[i8], params: &BinGroupParams) -> Result<Vec<f32>> {
    let s = params.scale.to_f32();
    signs
        .iter()
        .map(|&g| match g {
            1 => Ok(s),
            -1 => Ok(-s),
            other => Err(Error::CorruptPacking(format!("sign value {other}"))),
        })
        .collect()
}

/// A bit-packed quantized matrix with its per-group parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub quantizer: Quantizer,
    pub group_size: usize,
    pub axis: GroupAxis,
    pub packed_codes: Vec<u8>,
    /// One scale per group, in line order; empty for the f32 passthrough.
    pub scales: Vec<f16>,
    /// One zero point per group for RTN; empty otherwise.
    pub zero_points: Vec<u32>,
}

impl QuantizedMatrix {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bits(&self) -> u32 {
        self.quantizer.bits
    }

    fn line_len(&self) -> usize {
        line_geometry(self.rows, self.cols, self.axis).1
    }

    fn line_count(&self) -> usize {
        line_geometry(self.rows, self.cols, self.axis).0
    }

    pub fn groups_per_line(&self) -> usize {
        self.line_len().div_ceil(self.group_size)
    }

    /// Number of parameter groups (zero for the f32 passthrough).
    pub fn group_count(&self) -> usize {
        match self.quantizer.scheme {
            Scheme::F32 => 0,
            _ => self.groups_per_line() * self.line_count(),
        }
    }

    /// Checks the payload lengths against the declared geometry.
    pub fn validate(&self) -> Result<()> {
        Quantizer::new(self.quantizer.scheme, self.quantizer.bits)?;
        if self.group_size == 0 {
            return Err(Error::CorruptPacking("group size 0".into()));
        }
        let expect = packed_len(self.len(), self.bits());
        if self.packed_codes.len() != expect {
            return Err(Error::CorruptPacking(format!(
                "{}x{} at {} bits needs {expect} bytes, got {}",
                self.rows,
                self.cols,
                self.bits(),
                self.packed_codes.len()
            )));
        }
        let groups = self.group_count();
        if self.scales.len() != groups {
            return Err(Error::CorruptPacking(format!(
                "{} scales for {groups} groups",
                self.scales.len()
            )));
        }
        let zps = if self.quantizer.scheme == Scheme::Rtn { groups } else { 0 };
        if self.zero_points.len() != zps {
            return Err(Error::CorruptPacking(format!(
                "{} zero points for {zps} groups",
                self.zero_points.len()
            )));
        }
        Ok(())
    }
}

/// `(line count, line length)` for a grouping axis.
fn line_geometry(rows: usize, cols: usize, axis: GroupAxis) -> (usize, usize) {
    match axis {
        GroupAxis::Column => (cols, rows),
        GroupAxis::Row => (rows, cols),
    }
}

fn lines_of(m: &Matrix, axis: GroupAxis) -> Vec<Vec<f32>> {
    match axis {
        GroupAxis::Column => (0..m.cols()).map(|j| m.column(j)).collect(),
        GroupAxis::Row => (0..m.rows()).map(|i| m.row(i).to_vec()).collect(),
    }
}

/// Group-wise quantization of a whole matrix.
pub fn quantize_matrix(
    m: &Matrix,
    quantizer: Quantizer,
    group_size: usize,
    axis: GroupAxis,
) -> Result<QuantizedMatrix> {
    Quantizer::new(quantizer.scheme, quantizer.bits)?;
    if group_size == 0 {
        return Err(Error::InvalidConfig("group size must be at least 1".into()));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("matrix to quantize".into()));
    }
    let mut codes: Vec<u32> = Vec::with_capacity(m.len());
    let mut scales = Vec::new();
    let mut zero_points = Vec::new();
    for line in lines_of(m, axis) {
        match quantizer.scheme {
            Scheme::F32 => codes.extend(line.iter().map(|v| v.to_bits())),
            Scheme::Rtn => {
                for group in line.chunks(group_size) {
                    let (c, p) = rtn_quantize(group, quantizer.bits)?;
                    codes.extend(c);
                    scales.push(p.scale);
                    zero_points.push(p.zero_point);
                }
            }
            Scheme::Binary => {
                for group in line.chunks(group_size) {
                    let (s, p) = bin_quantize(group)?;
                    codes.extend(s.iter().map(|&g| (g > 0) as u32));
                    scales.push(p.scale);
                }
            }
        }
    }
    Ok(QuantizedMatrix {
        rows: m.rows(),
        cols: m.cols(),
        quantizer,
        group_size,
        axis,
        packed_codes: pack_bits(&codes, quantizer.bits)?,
        scales,
        zero_points,
    })
}

/// Convenience wrapper taking the scheme and bit width separately.
pub fn quantize_matrix_with(
    m: &Matrix,
    scheme: Scheme,
    bits: u32,
    group_size: usize,
    axis: GroupAxis,
) -> Result<QuantizedMatrix> {
    quantize_matrix(m, Quantizer::new(scheme, bits)?, group_size, axis)
}

pub fn dequantize_matrix(q: &QuantizedMatrix) -> Result<Matrix> {
    q.validate()?;
    let codes = unpack_bits(&q.packed_codes, q.bits(), q.len())?;
    let (line_count, line_len) = line_geometry(q.rows, q.cols, q.axis);
    let mut out = Matrix::zeros(q.rows, q.cols);
    let gpl = q.groups_per_line();
    let mut cursor = 0usize;
    for line in 0..line_count {
        let mut values = Vec::with_capacity(line_len);
        match q.quantizer.scheme {
            Scheme::F32 => {
                values.extend(codes[cursor..cursor + line_len].iter().map(|&c| f32::from_bits(c)));
                cursor += line_len;
            }
            _ => {
                for g in 0..gpl {
                    let len = q.group_size.min(line_len - g * q.group_size);
                    let group_codes = &codes[cursor..cursor + len];
                    let gi = line * gpl + g;
                    let deq = if q.quantizer.scheme == Scheme::Rtn {
                        let p = RtnGroupParams {
                            scale: q.scales[gi],
                            zero_point: q.zero_points[gi],
                        };
                        rtn_dequantize(group_codes, &p, q.bits())?
                    } else {
                        let signs: Vec<i8> = group_codes.iter().map(|&c| if c == 1 { 1 } else { -1 }).collect();
                        bin_dequantize(&signs, &BinGroupParams { scale: q.scales[gi] })?
                    };
                    values.extend(deq);
                    cursor += len;
                }
            }
        }
        match q.axis {
            GroupAxis::Column => out.set_column(line, &values),
            GroupAxis::Row => out.set_row(line, &values),
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("dequantized matrix".into()));
    }
    Ok(out)
}
