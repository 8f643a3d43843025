use thiserror::Error;

/// Error type shared across the whole pipeline. The CLI maps each variant
/// onto a stable process exit code, so variants are coarse by design.
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration: bad dimensions, unknown keys, degenerate masks.
    #[error("config: {0}")]
    Config(String),

    /// A caller handed us data that violates an operation's preconditions.
    #[error("input: {0}")]
    Input(String),

    /// A binary file failed to decode. `offset` is the byte position at
    /// which the problem was detected.
    #[error("format: {msg} (byte offset {offset})")]
    Format { offset: u64, msg: String },

    /// Dataset-level problems: missing classes, empty splits, bad manifests.
    #[error("data: {0}")]
    Data(String),

    /// Non-finite values or other numeric breakdown during compute.
    #[error("numeric: {0}")]
    Numeric(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class: 2 config, 3 data/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Input(_) | Error::Format { .. } | Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
