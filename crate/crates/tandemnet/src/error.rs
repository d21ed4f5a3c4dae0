//! One error type for the whole crate. Variants map onto the CLI exit codes:
//! config/input problems are recoverable by the user editing flags, numeric
//! problems mean the run itself went bad, format/io problems mean the bytes
//! on disk are not what we wrote.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error at {stage}: {detail}")]
    Numeric { stage: String, detail: String },

    #[error("invalid config `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("invalid input: {detail}")]
    Input { detail: String },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn numeric(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { stage: stage.into(), detail: detail.into() }
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config { field: field.into(), detail: detail.into() }
    }

    pub fn input(detail: impl Into<String>) -> Self {
        Error::Input { detail: detail.into() }
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format { offset, detail: detail.into() }
    }

    /// Process exit code for the CLI. 0 = success, 2 = usage (owned by the
    /// argument parser), 3 = config/input invariant, 4 = numeric, 5 = I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. } | Error::Config { .. } | Error::Input { .. } => 3,
            Error::Numeric { .. } | Error::Diverged { .. } => 4,
            Error::Format { .. } | Error::Io(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
