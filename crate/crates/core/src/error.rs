use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("row {row} has norm {norm:e}, too small to retract")]
    DegenerateRetraction { row: usize, norm: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value encountered: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Error::Shape { op, detail }
    }

    /// True for the failures a training run reports as divergence rather than as a bug.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Diverged(_) | Error::DegenerateRetraction { .. })
    }
}
