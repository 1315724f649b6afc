use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("empty selection: {0}")]
    EmptySelection(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

/// Process exit codes used by the command-line front end.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a prefix naming where it happened (file, layer, ...).
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with all context layers stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Usage, configuration and missing-input problems map to 2; problems
    /// with the data itself map to 3.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::EmptySelection(_) | Error::Io { .. } => EXIT_USAGE,
            Error::Format(_) | Error::Shape(_) | Error::Data(_) | Error::Numerical(_) => EXIT_DATA,
            Error::Context { .. } => unreachable!("root() strips context"),
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T> {
        self.map_err(|e| e.context(f()))
    }
}
