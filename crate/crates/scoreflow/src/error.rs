use crate::nn::ParamBundle;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor/layer dimension mismatch.
    Shape(String),
    /// Input outside an operation's mathematical domain (e.g. t too close to 1).
    Domain(String),
    /// Invalid or unknown configuration, names the offending key(s).
    Config(String),
    /// A numeric quantity became NaN/inf; message carries where.
    NonFinite(String),
    /// Command-line misuse.
    Usage(String),
    Io(std::io::Error),
    /// Checkpoint file does not start with the expected magic bytes.
    BadMagic,
    /// Checkpoint format version differs from what this build writes.
    VersionMismatch { found: u32, expected: u32 },
    /// Checkpoint file ends before the declared payload.
    Truncated,
    /// Training loss became non-finite; carries the last finite parameters.
    TrainingDiverged { step: usize, last_finite: Box<ParamBundle> },
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::BadMagic => write!(f, "bad magic: not a scoreflow checkpoint"),
            Error::VersionMismatch { found, expected } => {
                write!(f, "checkpoint version {found} unsupported (expected {expected})")
            }
            Error::Truncated => write!(f, "truncated checkpoint file"),
            Error::TrainingDiverged { step, .. } => {
                write!(f, "training diverged at step {step}; last finite parameters retained")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
