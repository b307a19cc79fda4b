use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the quantization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported dtype {0:?} (expected F16 or F32)")]
    UnsupportedDtype(String),

    #[error("unpaired tensor {0:?}")]
    UnpairedTensor(String),

    #[error("unrecognized tensor name {0:?} (expected <layer>.lora_B or <layer>.lora_A)")]
    UnrecognizedTensorName(String),

    #[error("duplicate layer name {0:?}")]
    DuplicateLayer(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("singular value decomposition did not converge after {sweeps} sweeps")]
    SvdNonConvergence { sweeps: usize },

    #[error("degenerate spectrum: all singular values are zero")]
    DegenerateSpectrum,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("code {code} does not fit in {bits} bits")]
    CodeOverflow { code: u32, bits: u32 },

    #[error("corrupt packing: {0}")]
    CorruptPacking(String),

    #[error("scale {0} is outside the binary16 range")]
    ScaleOutOfRange(f32),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a bad configuration rather than bad input data.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::InvalidConfig(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
