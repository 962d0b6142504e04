use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CeError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Newton iteration residual started growing.
    #[error("numerical divergence: {message} (residual {residual:e})")]
    Numerical { message: String, residual: f64 },

    /// An iterative solver ran out of rounds.
    #[error("did not converge: {0}")]
    Divergence(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl CeError {
    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, CeError::Numerical { .. } | CeError::Divergence(_))
    }
}

impl From<std::io::Error> for CeError {
    fn from(e: std::io::Error) -> Self {
        CeError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CeError>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::CeError::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
