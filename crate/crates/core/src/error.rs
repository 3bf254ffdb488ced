use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for `op`.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Data buffer length does not match the product of the shape.
    DataLength { expected: usize, found: usize },
    InvalidAxis { axis: usize, rank: usize },
    /// `backward` was called on a tensor with more than one element.
    NonScalarLoss { shape: Vec<usize> },
    /// An optimizer step found a parameter with no gradient.
    MissingGradient { name: String },
    /// A node produced NaN or infinity.
    NonFinite { node: usize, op: &'static str },
    /// The sequence is shorter than the convolution window.
    SequenceTooShort { len: usize, window: usize },
    LabelOutOfRange { label: usize, classes: usize },
    TokenOutOfRange { token: usize, vocab: usize },
    /// Classic normalization hit a row whose sum is not positive.
    ZeroRowSum { row: usize },
    InvalidConfig(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: dimension mismatch between {left:?} and {right:?}")
            }
            Error::DataLength { expected, found } => {
                write!(f, "data length {found} does not match shape volume {expected}")
            }
            Error::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} is out of range for a rank-{rank} tensor")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::MissingGradient { name } => {
                write!(f, "parameter `{name}` has no gradient")
            }
            Error::NonFinite { node, op } => {
                write!(f, "non-finite value first produced by `{op}` (node {node})")
            }
            Error::SequenceTooShort { len, window } => {
                write!(f, "sequence length {len} is shorter than the n-gram window {window}")
            }
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} is out of range for {classes} classes")
            }
            Error::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} is out of range for a vocabulary of {vocab}")
            }
            Error::ZeroRowSum { row } => write!(f, "row {row} has a non-positive degree"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;
