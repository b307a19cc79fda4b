//! Adapter checkpoints in a self-describing tensor container (`.qla`).
//!
//! Layout:
//!
//! ```text
//! [0, 8)        little-endian u64 header length N
//! [8, 8 + N)    UTF-8 JSON: name -> {"dtype", "shape", "data_offsets"}
//! [8 + N, ..)   tensor data, row-major little-endian
//! ```
//!
//! Offsets are relative to the start of the data section. The reserved key
//! `__metadata__` holds a string-to-string map. Factor tensors are named
//! `<layer>.lora_B` (`m×r`) and `<layer>.lora_A` (`r×n`).

use std::collections::BTreeMap;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const METADATA_KEY: &str = "__metadata__";
pub const B_SUFFIX: &str = ".lora_B";
pub const A_SUFFIX: &str = ".lora_A";

/// Storage dtype of a tensor on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F16,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 => 4,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "F16" => Ok(Dtype::F16),
            "F32" => Ok(Dtype::F32),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Splits a framed buffer into its JSON header and data section.
pub fn split_frame(bytes: &[u8]) -> Result<(serde_json::Map<String, Value>, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let n = usize::try_from(n)
        .ok()
        .filter(|&n| n <= bytes.len() - 8)
        .ok_or_else(|| Error::MalformedHeader(format!("header length {n} exceeds file size")))?;
    let text = std::str::from_utf8(&bytes[8..8 + n])
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let value: Value = serde_json::from_str(text.trim_end())
        .map_err(|e| Error::MalformedHeader(format!("header is not JSON: {e}")))?;
    match value {
        Value::Object(map) => Ok((map, &bytes[8 + n..])),
        _ => Err(Error::MalformedHeader("header is not a JSON object".into())),
    }
}

/// Frames a JSON header and a data section.
pub fn join_frame(header: &Value, data: &[u8]) -> Vec<u8> {
    let text = serde_json::to_string(header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + text.len() + data.len());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(data);
    out
}

fn parse_metadata(value: &Value) -> Result<BTreeMap<String, String>> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::MalformedHeader("__metadata__ is not an object".into()))?;
    obj.iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k.clone(), s.clone())),
            _ => Err(Error::MalformedHeader(format!(
                "metadata value for {k:?} is not a string"
            ))),
        })
        .collect()
}

/// Decodes every tensor of a `.qla` buffer into binary32 matrices.
pub fn decode_tensors(bytes: &[u8]) -> Result<(BTreeMap<String, Matrix>, BTreeMap<String, String>)> {
    let (header, data) = split_frame(bytes)?;
    let mut metadata = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    let mut ranges = Vec::new();
    for (name, value) in &header {
        if name == METADATA_KEY {
            metadata = parse_metadata(value)?;
            continue;
        }
        let entry: TensorEntry = serde_json::from_value(value.clone())
            .map_err(|e| Error::MalformedHeader(format!("tensor {name:?}: {e}")))?;
        let dtype = Dtype::parse(&entry.dtype)?;
        if entry.shape.len() != 2 {
            return Err(Error::MalformedHeader(format!(
                "tensor {name:?} has rank {} (only rank-2 tensors are supported)",
                entry.shape.len()
            )));
        }
        let (rows, cols) = (entry.shape[0], entry.shape[1]);
        let [begin, end] = entry.data_offsets;
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::MalformedHeader(format!("tensor {name:?} is too large")))?;
        if begin > end || end > data.len() || end - begin != expected {
            return Err(Error::MalformedHeader(format!(
                "tensor {name:?} has offsets [{begin}, {end}) for {expected} bytes in a {}-byte data section",
                data.len()
            )));
        }
        ranges.push((begin, end, name.clone()));
        let raw = &data[begin..end];
        let values: Vec<f32> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f32())
                .collect(),
        };
        let matrix = Matrix::new(rows, cols, values)
            .map_err(|_| Error::NonFinite(format!("tensor {name:?}")))?;
        tensors.insert(name.clone(), matrix);
    }
    ranges.sort();
    for pair in ranges.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::MalformedHeader(format!(
                "tensors {:?} and {:?} overlap",
                pair[0].2, pair[1].2
            )));
        }
    }
    Ok((tensors, metadata))
}

/// Encodes named matrices; data is laid out contiguously in name order.
pub fn encode_tensors(
    tensors: &BTreeMap<String, &Matrix>,
    metadata: &BTreeMap<String, String>,
    dtype: Dtype,
) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(metadata).expect("string map"),
        );
    }
    let mut data: Vec<u8> = Vec::new();
    for (name, matrix) in tensors {
        if name == METADATA_KEY {
            return Err(Error::MalformedHeader(format!("{METADATA_KEY} is reserved")));
        }
        let begin = data.len();
        for &v in matrix.as_slice() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("tensor {name:?}")));
            }
            match dtype {
                Dtype::F32 => data.extend_from_slice(&v.to_le_bytes()),
                Dtype::F16 => {
                    let h = f16::from_f32(v);
                    if !h.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "tensor {name:?} (value {v} overflows binary16)"
                        )));
                    }
                    data.extend_from_slice(&h.to_le_bytes());
                }
            }
        }
        let entry = TensorEntry {
            dtype: format!("{dtype:?}"),
            shape: vec![matrix.rows(), matrix.cols()],
            data_offsets: [begin, data.len()],
        };
        header.insert(name.clone(), serde_json::to_value(entry).expect("entry"));
    }
    Ok(join_frame(&Value::Object(header), &data))
}

/// A pair of LoRA factors for one layer: `ΔW = B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layer_name: String,
    pub b: Matrix,
    pub a: Matrix,
}

impl LoraAdapter {
    pub fn new(layer_name: impl Into<String>, b: Matrix, a: Matrix) -> Result<Self> {
        let layer_name = layer_name.into();
        if b.cols() != a.rows() {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer_name:?}: B is {}x{} but A is {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        let r = b.cols();
        if r == 0 || r > b.rows().min(a.cols()) {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer_name:?}: rank {r} must be in 1..=min({}, {})",
                b.rows(),
                a.cols()
            )));
        }
        if !b.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!("layer {layer_name:?}")));
        }
        Ok(Self { layer_name, b, a })
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// `(m, n)` of the dense update.
    pub fn output_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn parameter_count(&self) -> usize {
        self.b.len() + self.a.len()
    }

    /// Dense `B·A` in `f64`, row-major.
    pub fn delta_f64(&self) -> Vec<f64> {
        self.b.matmul_f64(&self.a)
    }
}

/// An ordered collection of adapters with free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterContainer {
    adapters: Vec<LoraAdapter>,
    pub metadata: BTreeMap<String, String>,
}

impl AdapterContainer {
    pub fn new(adapters: Vec<LoraAdapter>, metadata: BTreeMap<String, String>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for a in &adapters {
            if !seen.insert(a.layer_name.as_str()) {
                return Err(Error::DuplicateLayer(a.layer_name.clone()));
            }
        }
        Ok(Self { adapters, metadata })
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        for a in &self.adapters {
            tensors.insert(format!("{}{B_SUFFIX}", a.layer_name), &a.b);
            tensors.insert(format!("{}{A_SUFFIX}", a.layer_name), &a.a);
        }
        encode_tensors(&tensors, &self.metadata, dtype)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut tensors, metadata) = decode_tensors(bytes)?;
        let mut layers: BTreeMap<String, (Option<Matrix>, Option<Matrix>)> = BTreeMap::new();
        for (name, matrix) in std::mem::take(&mut tensors) {
            if let Some(layer) = name.strip_suffix(B_SUFFIX) {
                layers.entry(layer.to_string()).or_default().0 = Some(matrix);
            } else if let Some(layer) = name.strip_suffix(A_SUFFIX) {
                layers.entry(layer.to_string()).or_default().1 = Some(matrix);
            } else {
                return Err(Error::UnrecognizedTensorName(name));
            }
        }
        let mut adapters = Vec::with_capacity(layers.len());
        for (layer, pair) in layers {
            match pair {
                (Some(b), Some(a)) => adapters.push(LoraAdapter::new(layer, b, a)?),
                (Some(_), None) => return Err(Error::UnpairedTensor(format!("{layer}{B_SUFFIX}"))),
                (None, Some(_)) => return Err(Error::UnpairedTensor(format!("{layer}{A_SUFFIX}"))),
                (None, None) => unreachable!(),
            }
        }
        Self::new(adapters, metadata)
    }
}

/// Reads a `.qla` file; binary16 storage is widened to binary32.
pub fn read_container(path: impl AsRef<Path>) -> Result<AdapterContainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    AdapterContainer::from_bytes(&bytes)
}

/// Writes a `.qla` file at the given storage precision.
pub fn write_container(container: &AdapterContainer, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = container.to_bytes(dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Adapters sorted by layer name.
pub fn collect_lora_pairs(container: &AdapterContainer) -> Vec<LoraAdapter> {
    let mut out = container.adapters().to_vec();
    out.sort_by(|x, y| x.layer_name.cmp(&y.layer_name));
    out
}
