use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("timestep {t} out of range for schedule of length {len}")]
    Timestep { t: usize, len: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("config fingerprint mismatch: file {found:016x}, current config {expected:016x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("truncated data: {0}")]
    Truncated(String),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("sample {id}: {source}")]
    Sample {
        id: String,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}
