//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A spatial dimension violated a contract, e.g. odd height fed to the
    /// Haar transform. `axis` names the offending axis.
    #[error("dimension error on {axis}: {detail}")]
    Dimension { axis: &'static str, detail: String },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// Cosine similarity over a zero-norm class signature.
    #[error("degenerate class signature: zero norm vector")]
    DegenerateSignature,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("cannot sample from an empty buffer")]
    EmptyBuffer,

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{key}`{}", match .suggestion {
        Some(s) => format!(" (did you mean `{s}`?)"),
        None => String::new(),
    })]
    UnknownKey {
        key: String,
        suggestion: Option<String>,
    },

    #[error("data format error: {0}")]
    Format(String),

    #[error("non-finite loss at task {task} epoch {epoch} step {step}; state dumped to {dump}")]
    NonFiniteLoss {
        task: usize,
        epoch: usize,
        step: usize,
        dump: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
