use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Bad model input, e.g. a token id outside the vocabulary.
    #[error("invalid input at position {position}: {message}")]
    Input { position: usize, message: String },

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    /// A single malformed row in an otherwise well-formed file.
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },

    /// The objective became non-finite while perturbing a parameter.
    #[error("non-finite objective while perturbing {param}[{index}]")]
    Evaluation { param: String, index: usize },

    /// Stored parameters do not match the model they are loaded into.
    #[error("checkpoint does not match the model:\n{0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
