//! Crate-wide error type. Variants map 1:1 onto the CLI exit-code classes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DistaError>;

#[derive(Debug, Error)]
pub enum DistaError {
    /// Operand shapes do not line up (matmul dims, broadcast, state shapes).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Train-mode batch statistics need at least two rows.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// A caller broke an API contract (non-binary spikes, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A parameter left its legal domain (e.g. a membrane time constant <= 1).
    #[error("parameter domain: {0}")]
    ParamDomain(String),

    /// Bad config file: unknown key, unparsable value, or cross-field conflict.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary file (checkpoint or dataset record layout).
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed file with illegal content (e.g. label out of range).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint and config describe different models.
    #[error("incompatible checkpoint: {0}")]
    Compat(String),

    /// Non-finite loss or gradient; training cannot continue.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Analytic and finite-difference gradients disagree beyond tolerance.
    #[error("gradient check failed: {0}")]
    Gradcheck(String),

    #[error("i/o error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl DistaError {
    /// Attach a human-readable context string to an I/O failure.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        DistaError::Io {
            context: context.into(),
            source,
        }
    }
}
