use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("initialization failed: {usable} usable rows (need at least {required}; {total} total, {positive} positive, {truncated} within b <= {cutoff})")]
    Initialization {
        usable: usize,
        required: usize,
        total: usize,
        positive: usize,
        truncated: usize,
        cutoff: f64,
    },

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error in field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: msg.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable category used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Degenerate(_) => "degenerate",
            Error::Initialization { .. } => "init",
            Error::RankDeficient(_) => "rank",
            Error::Invalid(_) => "invalid",
            Error::Parse { .. } => "parse",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
        }
    }
}
