use thiserror::Error;

/// Errors produced by the core library.
#[derive(Error, Debug)]
pub enum Error {
    /// Incompatible shapes passed to a tensor op. Carries both shapes so the
    /// message is actionable without a debugger.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An index (class label, token id, split point, ...) fell outside its
    /// valid range.
    #[error("index out of range in {op}: {index} not in [0, {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    /// An API contract was violated (backward on a non-scalar, stepping
    /// parameters with missing gradients, ...).
    #[error("contract violation in {op}: {reason}")]
    Contract { op: &'static str, reason: String },

    /// A configuration value is out of range or inconsistent with the rest
    /// of the configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A binary or text artifact failed to parse. `offset` is the byte
    /// position at which the problem was detected.
    #[error("malformed input at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// Backdoor implantation could not proceed or did not take.
    #[error("backdoor implantation failed: {0}")]
    Implant(String),

    /// Training produced a non-finite loss. The trace holds the most recent
    /// loss values so the blow-up can be located.
    #[error("non-finite loss at step {step} (batch {batch}); recent losses {trace:?}")]
    NonFiniteLoss {
        step: u64,
        batch: usize,
        trace: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for a contract violation.
    pub fn contract(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Contract {
            op,
            reason: reason.into(),
        }
    }

    /// Shorthand for a parse failure at a byte offset.
    pub fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
