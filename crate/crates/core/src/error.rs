use thiserror::Error;

#[derive(Debug, Error)]
pub enum MitaError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// A top-k boundary or routing argmax sits on a tie, where the selection
    /// is not differentiable.
    #[error("nondifferentiable point: {0}")]
    SelectionTie(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("unknown mechanism `{0}` (expected full, mita, compress or route)")]
    UnknownMechanism(String),

    #[error("malformed parameter file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MitaError> = std::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> MitaError {
    MitaError::DimensionMismatch {
        op,
        detail: detail.into(),
    }
}
