use std::path::PathBuf;

/// Every failure the library can report.
///
/// The variants line up with a small set of stable error kinds (see
/// [`Error::kind`]) that the CLI maps onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape-error: {0}")]
    Shape(String),

    #[error("numeric-error: {0}")]
    Numeric(String),

    #[error("class-error: class {class} outside 1..={classes}")]
    Class { class: usize, classes: usize },

    #[error("config-error: {0}")]
    Config(String),

    #[error("empty-mask: class {0} has no foreground cells")]
    EmptyMask(usize),

    #[error("missing-class-error: class {0} never appears in the training set")]
    MissingClass(usize),

    #[error("nondeterminism-error: objective returned {first} then {second}")]
    Nondeterminism { first: f64, second: f64 },

    #[error("format-error: {0}")]
    Format(String),

    #[error("placement-error: {0}")]
    Placement(String),

    #[error("io-error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable, machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape-error",
            Error::Numeric(_) => "numeric-error",
            Error::Class { .. } => "class-error",
            Error::Config(_) => "config-error",
            Error::EmptyMask(_) => "empty-mask",
            Error::MissingClass(_) => "missing-class-error",
            Error::Nondeterminism { .. } => "nondeterminism-error",
            Error::Format(_) => "format-error",
            Error::Placement(_) => "placement-error",
            Error::Io { .. } => "io-error",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
