use std::path::PathBuf;

use timbre_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum TimbreError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("signal of {len} samples is shorter than one {window}-sample window; zero-pad the clip to at least {window} samples")]
    TooShort { len: usize, window: usize },
    #[error("sample rate {found} Hz is not supported here (expected {expected} Hz); resample the clip first")]
    SampleRate { found: u32, expected: u32 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("overlap-add normalization vanishes at interior sample {0}")]
    ZeroNormalization(usize),
    #[error("mel filter {0} covers no FFT bin at this resolution")]
    EmptyFilter(usize),
    #[error("unsupported wav data: {0}")]
    UnsupportedWav(String),
    #[error("malformed wav file {path}: {source}")]
    Wav { path: PathBuf, source: hound::Error },
    #[error("bad magic in container header")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("container truncated while reading {0}")]
    Truncated(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TimbreError {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            TimbreError::Domain(_) => "domain",
            TimbreError::Shape(_) => "shape",
            TimbreError::TooShort { .. } => "too_short",
            TimbreError::SampleRate { .. } => "sample_rate",
            TimbreError::NonFinite(_) => "non_finite",
            TimbreError::ZeroNormalization(_) => "zero_normalization",
            TimbreError::EmptyFilter(_) => "empty_filter",
            TimbreError::UnsupportedWav(_) => "unsupported_wav",
            TimbreError::Wav { .. } => "wav",
            TimbreError::BadMagic => "bad_magic",
            TimbreError::Version(_) => "version",
            TimbreError::Truncated(_) => "truncated",
            TimbreError::Format(_) => "format",
            TimbreError::Config(_) => "config",
            TimbreError::Nn(_) => "nn",
            TimbreError::Io(_) => "io",
        }
    }
}

pub type Result<T, E = TimbreError> = std::result::Result<T, E>;
