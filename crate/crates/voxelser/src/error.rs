use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate {coord:?} out of range for {bits} bits per axis")]
    CoordinateOutOfRange { coord: (u32, u32, u32), bits: u32 },

    #[error("key {key} out of range for {bits} bits per axis")]
    KeyOutOfRange { key: u64, bits: u32 },

    #[error("bits per axis must be in [1, 20], got {0}")]
    BitsOutOfRange(u32),

    #[error("scene contains no occupied voxels")]
    EmptyScene,

    #[error("group size must be >= 1, got {0}")]
    InvalidGroupSize(usize),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward target must be a scalar")]
    NotScalar,

    #[error("backward already ran on this tape; re-run the forward pass first")]
    BackwardReplayed,

    #[error("function is not deterministic: two forward passes disagree ({a} vs {b})")]
    NonDeterministicFunction { a: f64, b: f64 },

    #[error("label {label} out of range for {classes} semantic classes")]
    LabelOutOfRange { label: u8, classes: u16 },

    #[error("primitive {0} out of grid bounds")]
    PrimitiveOutOfBounds(String),

    #[error("invalid file contents: {0}")]
    BadFormat(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
}
