use std::fmt;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and a layer) do not fit together.
    #[error("{op}: shape {lhs:?} incompatible with {rhs:?}: {detail}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        detail: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The black box refused an input. The query counter is not advanced.
    #[error("query rejected: {0}")]
    QueryRejected(String),

    /// A binary or text input could not be decoded.
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Every problem found while validating a configuration.
    #[error("configuration invalid:\n{}", ValidationList(.0))]
    Validation(Vec<String>),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        lhs: &[usize],
        rhs: &[usize],
        detail: impl Into<String>,
    ) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    /// Whether the error stems from a numerical failure (as opposed to bad
    /// input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

struct ValidationList<'a>(&'a [String]);

impl fmt::Display for ValidationList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, item) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {item}")?;
        }
        Ok(())
    }
}
