//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that must agree do not; carries both shapes and where they met.
    #[error("dimension mismatch in {context}: {lhs:?} vs {rhs:?}")]
    Dim {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("singular jacobian: determinant is zero")]
    SingularJacobian,

    /// A NaN or infinity appeared where a finite value was required.
    #[error("non-finite value in {context} at flat index {index}")]
    NonFinite { context: String, index: usize },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dim {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
