use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Error states surfaced by the core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Operand shapes do not satisfy an op's contract.
    ShapeMismatch { op: &'static str, detail: String },
    /// A softmax was requested with every position masked out.
    DegenerateMask,
    /// `backward` called on a non-scalar node.
    NonScalarLoss,
    /// A token id falls outside the embedding table.
    TokenOutOfRange { id: u32, vocab: usize },
    /// Orthogonal initialization requested for a non-square shape.
    OrthogonalNonSquare { rows: usize, cols: usize },
    /// A value became NaN or infinite.
    NonFinite(&'static str),
    /// An input that must be nonempty was empty.
    Empty(&'static str),
    /// Ensemble members disagree on vocabulary.
    VocabMismatch,
    /// A synthetic-corpus spec failed validation.
    InvalidSpec(String),
    /// Matrix too small for the requested statistic.
    DegenerateShape(&'static str),
    /// Inputs that must be parallel have different lengths.
    LengthMismatch { left: usize, right: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::DegenerateMask => write!(f, "softmax over an all-masked input"),
            Error::NonScalarLoss => write!(f, "backward requires a scalar loss node"),
            Error::TokenOutOfRange { id, vocab } => {
                write!(f, "token id {id} out of range for vocabulary of size {vocab}")
            }
            Error::OrthogonalNonSquare { rows, cols } => {
                write!(f, "orthogonal init requires a square shape, got {rows}x{cols}")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Empty(what) => write!(f, "{what} must be nonempty"),
            Error::VocabMismatch => write!(f, "ensemble members have different vocabularies"),
            Error::InvalidSpec(detail) => write!(f, "invalid corpus spec: {detail}"),
            Error::DegenerateShape(what) => write!(f, "degenerate shape for {what}"),
            Error::LengthMismatch { left, right } => {
                write!(f, "parallel inputs differ in length: {left} vs {right}")
            }
        }
    }
}
