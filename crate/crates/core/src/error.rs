use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in input")]
    NonFinite,
    #[error("reserved E8M0 scale byte {0:#04x}")]
    InvalidScale(u8),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("block size {0} is not a power of two in [2, 256]")]
    BlockSize(usize),
    #[error("axis length {len} is not divisible by block size {block}")]
    Indivisible { len: usize, block: usize },
    #[error("bad container magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported group size {0}")]
    UnsupportedGroupSize(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-zero padding nibble in row {0}")]
    Padding(usize),
    #[error("zero denominator")]
    ZeroDenominator,
    #[error("non-positive argument: {0}")]
    NonPositive(&'static str),
    #[error("unknown precision id `{0}`")]
    UnknownPrecision(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("fit failed to converge from every start")]
    FitFailed,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
