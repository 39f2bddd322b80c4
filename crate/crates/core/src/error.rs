use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Shapes or spatial sizes that do not line up.
    Dimension(String),
    /// A configuration value outside its allowed range.
    Config(String),
    /// A caller broke an operation's precondition.
    Contract(String),
    /// Input data that fails validation (e.g. a path that is not a permutation).
    Validation(String),
    /// A numeric argument outside the domain of the function.
    Domain(String),
    /// The mask has no shadow-labelled patch.
    NoShadowRegion,
    /// A metric was requested over an empty pixel region.
    UndefinedRegion,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::NoShadowRegion => f.write_str("mask contains no shadow patch"),
            Error::UndefinedRegion => f.write_str("metric region is empty"),
        }
    }
}

impl core::error::Error for Error {}
