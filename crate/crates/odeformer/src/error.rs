use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: no such file", .0.display())]
    MissingFile(PathBuf),
    #[error("bad magic: expected \"CSIQ\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported {what} version {found}")]
    UnsupportedVersion { what: &'static str, found: u32 },
    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] odeformer_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn malformed(what: &'static str, detail: impl ToString) -> Self {
        Error::Malformed {
            what,
            detail: detail.to_string(),
        }
    }

    /// Process exit status for this error: 2 missing file, 3 invalid
    /// configuration or input, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use odeformer_core::Error as C;
        match self {
            Error::MissingFile(_) => 2,
            Error::Config(_)
            | Error::BadMagic(_)
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::DimensionMismatch { .. }
            | Error::Malformed { .. } => 3,
            Error::Core(C::NonFiniteLoss { .. } | C::NonFiniteState { .. }) => 4,
            Error::Core(_) => 3,
            Error::Io { .. } => 1,
        }
    }
}
