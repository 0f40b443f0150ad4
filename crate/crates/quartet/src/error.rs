use std::path::PathBuf;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad flags, config values or semantically invalid input.
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    /// A file that exists but cannot be decoded.
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    /// Divergence, degenerate fits, non-finite data.
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] quartet_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit status for this error class.
    pub fn exit_code(&self) -> u8 {
        use quartet_core::Error as C;
        match self {
            Error::Usage(_) => EXIT_USAGE,
            Error::Io { .. } | Error::Format { .. } => EXIT_IO,
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Core(e) => match e {
                C::NonFinite | C::ZeroDenominator | C::FitFailed => EXIT_NUMERIC,
                C::InvalidScale(_)
                | C::BadMagic
                | C::UnsupportedVersion(_)
                | C::UnsupportedGroupSize(_)
                | C::Truncated { .. }
                | C::Padding(_) => EXIT_IO,
                C::ShapeMismatch(_)
                | C::BlockSize(_)
                | C::Indivisible { .. }
                | C::NonPositive(_)
                | C::UnknownPrecision(_)
                | C::InsufficientData(_)
                | C::InvalidConfig(_) => EXIT_USAGE,
            },
        }
    }
}
