use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, sizes).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("non-finite value in stage `{stage}`")]
    NonFinite { stage: String },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("k-means fit failed: {0}")]
    Fit(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("parse error in {what} at line {line}, column {column}: {message}")]
    Parse { what: String, line: usize, column: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub(crate) fn json(what: impl Into<String>, err: &serde_json::Error) -> Self {
        Error::Parse { what: what.into(), line: err.line(), column: err.column(), message: err.to_string() }
    }
}
