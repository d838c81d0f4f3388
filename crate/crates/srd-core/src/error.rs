//! Crate-wide error type. Variants map onto the failure classes the CLI
//! reports: bad configuration, violated data contracts, I/O, numeric guards,
//! and the remote-captioner transport.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its documented domain (rates, sizes, weights).
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs that parse but break an invariant (mismatched lengths,
    /// duplicate ids, empty reference sets, ...).
    #[error("data contract violated: {0}")]
    Contract(String),

    /// The failing operation is in `context`; the underlying cause stays in
    /// the source chain so wrappers like `anyhow` print it exactly once.
    #[error("i/o error while {context}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite values or other numeric guard trips; training aborts on
    /// these rather than continuing with garbage.
    #[error("arithmetic guard: {0}")]
    Arithmetic(String),

    /// The environment was driven incorrectly (e.g. stepping a finished
    /// episode).
    #[error("environment misuse: {0}")]
    EnvUsage(String),

    /// Connection/timeout class failures talking to a remote captioner.
    /// These are retryable up to the configured budget.
    #[error("transport error: {0}")]
    Transport(String),

    /// The remote endpoint answered, but not in the shape the protocol
    /// requires. Carries the raw payload for diagnosis.
    #[error("protocol error: {detail}; raw payload: {raw:?}")]
    Protocol { detail: String, raw: String },

    /// Checkpoint serialization problems: bad magic, unsupported version,
    /// truncation, or a descriptor that does not match the environment.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn arithmetic(msg: impl Into<String>) -> Self {
        Error::Arithmetic(msg.into())
    }
}
