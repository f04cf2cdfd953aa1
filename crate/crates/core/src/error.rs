use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up; `detail` names the offending axes.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid parameter: {detail}")]
    Param { op: &'static str, detail: String },

    /// An operation was invoked outside the state it is defined for.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Param {
            op,
            detail: detail.into(),
        }
    }
}
