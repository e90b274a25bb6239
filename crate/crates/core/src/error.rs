use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("empty loss: every row is ignored")]
    EmptyLoss,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("{field} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        field: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("location id {0} is a special token and has no grid cell")]
    SpecialClass(u32),
    #[error("mask ratio must be positive")]
    MaskRatio,
    #[error("frequency table is empty")]
    EmptyTable,
    #[error("empty sequence")]
    EmptySequence,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("training diverged at batch {batch}: loss {loss}, max logit {max_logit}")]
    Diverged { batch: u64, loss: f64, max_logit: f64 },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}
