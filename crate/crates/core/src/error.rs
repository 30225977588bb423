use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by tensor operations and network components.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: input outside the domain ({value})")]
    Domain { op: &'static str, value: f64 },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label sequence is empty")]
    EmptyLabel,
    #[error("label symbol {0} is the blank or outside the alphabet")]
    BadLabel(usize),
    #[error("label of length {label_len} needs at least {needed} frames, got {frames}")]
    CtcInfeasible {
        label_len: usize,
        needed: usize,
        frames: usize,
    },
    #[error("instance too large to enumerate: {0} alignments")]
    TooLarge(f64),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("score list is empty")]
    EmptyScores,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
