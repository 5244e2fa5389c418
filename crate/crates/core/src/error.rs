use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HhftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HhftError {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error in block `{block}`: id {id} out of range (size {size})")]
    Index { block: String, id: usize, size: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("checkpoint error ({field}): {message}")]
    Checkpoint { field: String, message: String },

    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: Box<HhftError>,
    },

    #[error("failed to parse {path}: line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("path not found: {0}")]
    MissingPath(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<HhftError>,
    },
}

impl HhftError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        HhftError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HhftError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_record(self, index: usize) -> Self {
        HhftError::Record {
            index,
            source: Box::new(self),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        HhftError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn parse(path: impl Into<PathBuf>, err: &serde_json::Error) -> Self {
        HhftError::Parse {
            path: path.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    /// True when the failure is caused by user input (bad config, bad data,
    /// missing files) rather than a bug; drives the CLI exit code.
    pub fn is_user_error(&self) -> bool {
        match self {
            HhftError::Record { source, .. } | HhftError::Context { source, .. } => {
                source.is_user_error()
            }
            HhftError::Shape { .. } | HhftError::Contract(_) | HhftError::Io { .. } => false,
            _ => true,
        }
    }
}
