//! The `.lqz` quantized-adapter container.
//!
//! Same framing as `.qla`: a little-endian `u64` header length, a JSON
//! header, then the data section. The header holds the run configuration
//! and, per layer, every stored matrix with its scheme, geometry and the
//! byte ranges of its packed codes, binary16 scales (little-endian) and
//! packed zero points. Sections are laid out in layer-name order, then
//! `b_high, a_high, b_low, a_low`, then codes, scales, zero points.

use std::collections::BTreeMap;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::accounting::{BitReport, LayerBits};
use crate::error::{Error, Result};
use crate::pipeline::{QuantConfig, QuantizedAdapter, QuantizedPair};
use crate::quantizers::{pack_bits, packed_len, unpack_bits, GroupAxis, QuantizedMatrix, Quantizer, Scheme};
use crate::tensor_store::{join_frame, split_frame};

pub const FORMAT_NAME: &str = "lqz";
pub const FORMAT_VERSION: u32 = 1;

const SLOTS: [&str; 4] = ["b_high", "a_high", "b_low", "a_low"];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    format_version: u32,
    config: QuantConfig,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    layers: BTreeMap<String, LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    m: usize,
    n: usize,
    rank: usize,
    h: usize,
    matrices: BTreeMap<String, MatrixEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixEntry {
    scheme: Scheme,
    bits: u32,
    rows: usize,
    cols: usize,
    group_size: usize,
    axis: GroupAxis,
    groups: usize,
    codes: [usize; 2],
    scales: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    zero_points: Option<[usize; 2]>,
}

/// Decoded contents of a `.lqz` file.
#[derive(Debug, Clone, PartialEq)]
pub struct LqzFile {
    pub config: QuantConfig,
    pub metadata: BTreeMap<String, String>,
    pub adapters: Vec<QuantizedAdapter>,
}

impl LqzFile {
    pub fn new(config: QuantConfig, adapters: Vec<QuantizedAdapter>) -> Self {
        Self {
            config,
            metadata: BTreeMap::new(),
            adapters,
        }
    }
}

fn push_section(data: &mut Vec<u8>, bytes: &[u8]) -> [usize; 2] {
    let begin = data.len();
    data.extend_from_slice(bytes);
    [begin, data.len()]
}

fn encode_matrix(q: &QuantizedMatrix, data: &mut Vec<u8>) -> Result<MatrixEntry> {
    q.validate()?;
    let codes = push_section(data, &q.packed_codes);
    let scale_bytes: Vec<u8> = q.scales.iter().flat_map(|s| s.to_le_bytes()).collect();
    let scales = push_section(data, &scale_bytes);
    let zero_points = match q.quantizer.scheme {
        Scheme::Rtn => Some(push_section(data, &pack_bits(&q.zero_points, q.bits())?)),
        _ => None,
    };
    Ok(MatrixEntry {
        scheme: q.quantizer.scheme,
        bits: q.bits(),
        rows: q.rows,
        cols: q.cols,
        group_size: q.group_size,
        axis: q.axis,
        groups: q.group_count(),
        codes,
        scales,
        zero_points,
    })
}

/// Serializes adapters deterministically; identical inputs give identical bytes.
pub fn encode_lqz(file: &LqzFile) -> Result<Vec<u8>> {
    let mut sorted: Vec<&QuantizedAdapter> = file.adapters.iter().collect();
    sorted.sort_by(|x, y| x.layer_name.cmp(&y.layer_name));
    let mut data = Vec::new();
    let mut layers = BTreeMap::new();
    for q in sorted {
        let mut matrices = BTreeMap::new();
        let slots = [
            q.high.as_ref().map(|p| &p.b),
            q.high.as_ref().map(|p| &p.a),
            q.low.as_ref().map(|p| &p.b),
            q.low.as_ref().map(|p| &p.a),
        ];
        for (name, m) in SLOTS.iter().zip(slots) {
            if let Some(m) = m {
                matrices.insert(name.to_string(), encode_matrix(m, &mut data)?);
            }
        }
        let entry = LayerEntry {
            m: q.m,
            n: q.n,
            rank: q.rank,
            h: q.h,
            matrices,
        };
        if layers.insert(q.layer_name.clone(), entry).is_some() {
            return Err(Error::DuplicateLayer(q.layer_name.clone()));
        }
    }
    let header = Header {
        format: FORMAT_NAME.into(),
        format_version: FORMAT_VERSION,
        config: file.config,
        metadata: file.metadata.clone(),
        layers,
    };
    let value = serde_json::to_value(&header).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    Ok(join_frame(&value, &data))
}

fn section<'a>(data: &'a [u8], range: [usize; 2], what: &str) -> Result<&'a [u8]> {
    let [begin, end] = range;
    if begin > end || end > data.len() {
        return Err(Error::MalformedHeader(format!(
            "{what}: byte range [{begin}, {end}) outside a {}-byte data section",
            data.len()
        )));
    }
    Ok(&data[begin..end])
}

fn decode_matrix(e: &MatrixEntry, data: &[u8], what: &str) -> Result<QuantizedMatrix> {
    let quantizer = Quantizer::new(e.scheme, e.bits)?;
    let codes = section(data, e.codes, what)?.to_vec();
    let scale_bytes = section(data, e.scales, what)?;
    if scale_bytes.len() % 2 != 0 {
        return Err(Error::CorruptPacking(format!("{what}: odd scale section length")));
    }
    let scales: Vec<f16> = scale_bytes
        .chunks_exact(2)
        .map(|c| f16::from_le_bytes([c[0], c[1]]))
        .collect();
    let zero_points = match (e.scheme, e.zero_points) {
        (Scheme::Rtn, Some(range)) => {
            let bytes = section(data, range, what)?;
            if bytes.len() != packed_len(e.groups, e.bits) {
                return Err(Error::CorruptPacking(format!("{what}: zero point section length")));
            }
            unpack_bits(bytes, e.bits, e.groups)?
        }
        (Scheme::Rtn, None) => return Err(Error::MalformedHeader(format!("{what}: RTN matrix without zero points"))),
        (_, Some(_)) => return Err(Error::MalformedHeader(format!("{what}: zero points on a non-RTN matrix"))),
        (_, None) => Vec::new(),
    };
    let q = QuantizedMatrix {
        rows: e.rows,
        cols: e.cols,
        quantizer,
        group_size: e.group_size,
        axis: e.axis,
        packed_codes: codes,
        scales,
        zero_points,
    };
    q.validate()
        .map_err(|err| Error::CorruptPacking(format!("{what}: {err}")))?;
    if q.group_count() != e.groups {
        return Err(Error::CorruptPacking(format!(
            "{what}: header declares {} groups, geometry gives {}",
            e.groups,
            q.group_count()
        )));
    }
    Ok(q)
}

fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let (map, data) = split_frame(bytes)?;
    let header: Header = serde_json::from_value(serde_json::Value::Object(map))
        .map_err(|e| Error::MalformedHeader(format!("lqz header: {e}")))?;
    if header.format != FORMAT_NAME || header.format_version != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported container {:?} version {}",
            header.format, header.format_version
        )));
    }
    Ok((header, data))
}

fn expect_shape(q: &QuantizedMatrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if (q.rows, q.cols) != (rows, cols) {
        return Err(Error::ShapeMismatch(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            q.rows, q.cols
        )));
    }
    Ok(())
}

pub fn decode_lqz(bytes: &[u8]) -> Result<LqzFile> {
    let (header, data) = parse_header(bytes)?;
    header.config.validate()?;
    let mut adapters = Vec::with_capacity(header.layers.len());
    for (name, entry) in &header.layers {
        if let Some(unknown) = entry.matrices.keys().find(|k| !SLOTS.contains(&k.as_str())) {
            return Err(Error::MalformedHeader(format!("layer {name:?}: unknown matrix {unknown:?}")));
        }
        if entry.h > entry.rank {
            return Err(Error::MalformedHeader(format!("layer {name:?}: h {} exceeds rank {}", entry.h, entry.rank)));
        }
        let get = |slot: &str| -> Result<Option<QuantizedMatrix>> {
            entry
                .matrices
                .get(slot)
                .map(|e| decode_matrix(e, data, &format!("{name}.{slot}")))
                .transpose()
        };
        let pair = |b: Option<QuantizedMatrix>, a: Option<QuantizedMatrix>, what: &str| -> Result<Option<QuantizedPair>> {
            match (b, a) {
                (Some(b), Some(a)) => Ok(Some(QuantizedPair { b, a })),
                (None, None) => Ok(None),
                _ => Err(Error::MalformedHeader(format!("layer {name:?}: {what} is missing a factor"))),
            }
        };
        let high = pair(get("b_high")?, get("a_high")?, "high pair")?;
        let low = pair(get("b_low")?, get("a_low")?, "low pair")?;
        let mut kept = 0;
        for p in high.iter().chain(low.iter()) {
            let k = p.b.cols;
            expect_shape(&p.b, entry.m, k, &format!("{name} B factor"))?;
            expect_shape(&p.a, k, entry.n, &format!("{name} A factor"))?;
            kept += k;
        }
        if kept > entry.rank {
            return Err(Error::MalformedHeader(format!("layer {name:?}: stored rank {kept} exceeds {}", entry.rank)));
        }
        adapters.push(QuantizedAdapter {
            layer_name: name.clone(),
            m: entry.m,
            n: entry.n,
            rank: entry.rank,
            h: entry.h,
            high,
            low,
            config: header.config,
        });
    }
    Ok(LqzFile {
        config: header.config,
        metadata: header.metadata,
        adapters,
    })
}

pub fn read_lqz(path: impl AsRef<Path>) -> Result<LqzFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_lqz(&bytes)
}

pub fn write_lqz(file: &LqzFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_lqz(file)?).map_err(|e| Error::io(path, e))
}

fn padding_is_zero(bytes: &[u8], used_bits: usize) -> bool {
    let full = used_bits / 8;
    let rem = used_bits % 8;
    let tail_start = if rem == 0 {
        full
    } else {
        if bytes[full] >> rem != 0 {
            return false;
        }
        full + 1
    };
    bytes[tail_start..].iter().all(|&b| b == 0)
}

/// Bit counts taken from the stored sections themselves: decoded codes and
/// zero points times their width, and stored scales times 16.
pub fn payload_bit_walk(bytes: &[u8]) -> Result<BitReport> {
    let (header, data) = parse_header(bytes)?;
    let mut layers = Vec::with_capacity(header.layers.len());
    for (name, entry) in &header.layers {
        let mut bits = LayerBits {
            layer: name.clone(),
            weights: ((entry.m + entry.n) * entry.rank) as u64,
            code_bits: 0,
            scale_bits: 0,
            zp_bits: 0,
        };
        for (slot, e) in &entry.matrices {
            let what = format!("{name}.{slot}");
            let codes = section(data, e.codes, &what)?;
            let count = e.rows * e.cols;
            unpack_bits(codes, e.bits, count)?;
            if codes.len() != packed_len(count, e.bits) || !padding_is_zero(codes, count * e.bits as usize) {
                return Err(Error::CorruptPacking(format!("{what}: code section padding")));
            }
            bits.code_bits += (count * e.bits as usize) as u64;
            bits.scale_bits += (section(data, e.scales, &what)?.len() * 8) as u64;
            if let Some(range) = e.zero_points {
                let zp = section(data, range, &what)?;
                let stored = e.scales[1].saturating_sub(e.scales[0]) / 2;
                unpack_bits(zp, e.bits, stored)?;
                bits.zp_bits += (stored * e.bits as usize) as u64;
            }
        }
        layers.push(bits);
    }
    Ok(BitReport { layers })
}
