use core::fmt;

/// Failures raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A user sits exactly at the base-station antenna position.
    DegenerateGeometry,
    /// A dataset whose samples are all zero cannot be normalized.
    ZeroDataset,
    /// Zero effective precoder; power normalization is undefined.
    DegeneratePrecoder,
    /// Channel matrix without full column rank.
    SingularChannel,
    /// Operation needs a non-empty input.
    Empty(&'static str),
    /// Tensor or matrix dimensions disagree.
    ShapeMismatch { expected: usize, found: usize },
    /// A configuration value is outside its declared range.
    InvalidConfig(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DegenerateGeometry => f.write_str("degenerate geometry: zero BS-user distance"),
            Error::ZeroDataset => f.write_str("all-zero dataset cannot be normalized"),
            Error::DegeneratePrecoder => f.write_str("degenerate precoder: zero transmit power"),
            Error::SingularChannel => f.write_str("singular channel: H has no full column rank"),
            Error::Empty(what) => write!(f, "empty input: {what}"),
            Error::ShapeMismatch { expected, found } => {
                write!(f, "shape mismatch: expected {expected}, found {found}")
            }
            Error::InvalidConfig(what) => write!(f, "invalid configuration: {what}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
