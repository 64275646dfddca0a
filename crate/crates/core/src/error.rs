use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {channels} channels cannot be split into {groups} groups")]
    GroupMismatch {
        op: &'static str,
        channels: usize,
        groups: usize,
    },

    #[error("rotary dimension {0} must be even")]
    OddRotaryDim(usize),

    #[error("value-shift needs an even number of kv heads, got {0}")]
    OddKvHeads(usize),

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("unexpected weight `{0}`")]
    UnexpectedWeight(String),

    #[error("gradient root must be a scalar, got shape {0:?}")]
    NotScalarRoot(Vec<usize>),

    #[error("decode state corrupt: {0}")]
    StateCorrupt(String),

    #[error("invalid attention spec: {0}")]
    InvalidSpec(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
