use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the tracking core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },
    #[error("empty attention context in {0}")]
    EmptyContext(&'static str),
    #[error("frame ordering error: track {identity} at frame {frame} is not after {latest}")]
    Ordering { identity: u64, frame: u32, latest: u32 },
    #[error("unknown or closed track {0}")]
    Lookup(u64),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("scenario spec error: {0}")]
    Spec(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
