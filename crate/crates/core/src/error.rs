use thiserror::Error;

/// Errors produced by the quantizers, the stream codec and the audio front-end.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("code id {code} out of range for codebook of size {size}")]
    CodeOutOfRange { code: u64, size: usize },
    #[error("k_r = {k} exceeds the expert pool size {n}")]
    TooManyExperts { k: usize, n: usize },
    #[error("subset enumeration of C({n}, {k}) = {count} exceeds the limit of {limit}")]
    EnumerationLimit {
        n: usize,
        k: usize,
        count: u64,
        limit: u64,
    },
    #[error("invalid subset: {0}")]
    InvalidSubset(String),
    #[error("rank {rank} out of range for C({n}, {k}) = {count}")]
    RankOutOfRange { rank: u64, n: usize, k: usize, count: u64 },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated input while reading {0}")]
    Truncated(&'static str),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("window {window}: mask rank {rank} not below C({n}, {k}) = {count}")]
    MaskRankOutOfRange {
        window: usize,
        rank: u64,
        n: usize,
        k: usize,
        count: u64,
    },
    #[error("window {window}: k_r = {k} exceeds N_r = {n}")]
    WindowKrOutOfRange { window: usize, k: usize, n: usize },
    #[error("window {window}: code {code} not below codebook size {size}")]
    StreamCodeOutOfRange { window: usize, code: u64, size: usize },
    #[error("window {window}: nonzero alignment padding")]
    NonZeroPadding { window: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after stream end")]
    TrailingBytes(usize),
    #[error("inconsistent stream: {0}")]
    InconsistentStream(String),
    #[error("wav: {0}")]
    Wav(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
